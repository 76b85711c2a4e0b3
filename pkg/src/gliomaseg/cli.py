"""Glioma segmentation and survival pipeline, one subcommand per stage.

Every subcommand reads its inputs from the data root or from earlier stages
under the output root, and writes to a fixed layout::

    <output_root>/stats/norm_stats.ini
    <output_root>/preprocessed/<id>.npz
    <output_root>/checkpoints/segnet.pt, history.jsonl, os_model.pt
    <output_root>/predictions/<id>.nii.gz, survival.csv
    <output_root>/features/features.csv
    <output_root>/reports/seg_eval.csv, os_eval.csv
    <output_root>/manifests/<subcommand>.json

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import nibabel
import numpy as np
import torch

from . import __version__
from .config import ConfigError, PipelineConfig, load_config
from .labelfuse import fuse
from .metrics import evaluate_subject, write_report
from .preprocess import NormStats, PreprocessedSubject, fit_norm_stats, preprocess_subject
from .segnet.model import build_model
from .segnet.train import load_checkpoint, predict_probs, save_checkpoint, train_two_phase, write_history
from .survival import (
    OSModel,
    evaluate_os,
    extract_features,
    filter_gtr,
    predict_os,
    read_features,
    read_predictions,
    train_os,
    write_features,
    write_os_report,
    write_predictions,
)
from .volume_io import (
    LABEL_SUFFIX,
    DataError,
    Volume,
    ensure_dir,
    find_nifti,
    list_subjects,
    load_subject,
    load_survival_table,
    load_volume,
    save_label_map,
)

log = logging.getLogger("gliomaseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _out(cfg: PipelineConfig, sub: str) -> Path:
    return ensure_dir(Path(cfg.output_root) / sub)


def _data_root(cfg: PipelineConfig) -> Path:
    if not cfg.data_root:
        raise ConfigError("data_root is not set (config key or GLIOMASEG_DATA_ROOT)")
    root = Path(cfg.data_root)
    if not root.is_dir():
        raise DataError(f"data root {root} does not exist")
    return root


def _subject_ids(cfg: PipelineConfig, requested: Optional[Sequence[str]]) -> List[str]:
    return sorted(requested) if requested else list_subjects(_data_root(cfg))


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _preprocessed(cfg: PipelineConfig, ids: Optional[Sequence[str]] = None) -> List[Path]:
    folder = Path(cfg.output_root) / "preprocessed"
    if ids:
        paths = [folder / f"{i}.npz" for i in sorted(ids)]
    else:
        paths = sorted(folder.glob("*.npz"))
    missing = [str(p) for p in paths if not p.is_file()]
    if missing or not paths:
        raise DataError(f"no preprocessed subjects found ({missing or folder}); run preprocess first")
    return paths


def _survival_records(cfg: PipelineConfig):
    if not cfg.survival_csv:
        raise ConfigError("survival_csv is not set")
    return load_survival_table(cfg.survival_csv, cfg.survival_columns)


def _write_manifest(cfg: PipelineConfig, command: str, outputs: Sequence[str], extra: Optional[dict] = None) -> None:
    manifest = {
        "subcommand": command,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": {
            "gliomaseg": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
            "nibabel": nibabel.__version__,
        },
        "outputs": [str(o) for o in outputs],
    }
    if extra:
        manifest.update(extra)
    path = _out(cfg, "manifests") / f"{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------- subcommands

def cmd_fit_stats(cfg: PipelineConfig, args) -> List[Path]:
    root = _data_root(cfg)
    ids = [i for i in _subject_ids(cfg, args.subjects) if find_nifti(root / i / f"{i}_{LABEL_SUFFIX}")]
    if not ids:
        raise DataError(f"no labelled training subjects under {root}")
    log.info("fitting normalization statistics on %d training subjects", len(ids))
    stats = fit_norm_stats(load_subject(root, i) for i in ids)
    path = _out(cfg, "stats") / "norm_stats.ini"
    stats.save(path)
    return [path]


def _preprocess_one(task) -> str:
    root, sid, stats_path, out_dir = task
    stats = NormStats.load(stats_path)
    pre = preprocess_subject(load_subject(root, sid), stats)
    path = Path(out_dir) / f"{sid}.npz"
    pre.save(path)
    return str(path)


def cmd_preprocess(cfg: PipelineConfig, args) -> List[Path]:
    # always reuses the training statistics; never refits
    stats_path = Path(args.stats) if args.stats else Path(cfg.output_root) / "stats" / "norm_stats.ini"
    NormStats.load(stats_path)
    root = _data_root(cfg)
    out_dir = _out(cfg, "preprocessed")
    tasks = [(str(root), sid, str(stats_path), str(out_dir)) for sid in _subject_ids(cfg, args.subjects)]
    return [Path(p) for p in _map(_preprocess_one, tasks, args.jobs)]


def cmd_train_seg(cfg: PipelineConfig, args) -> List[Path]:
    subjects = [PreprocessedSubject.load(p) for p in _preprocessed(cfg, args.subjects)]
    subjects = [s for s in subjects if s.label is not None]
    if not subjects:
        raise DataError("no labelled preprocessed subjects to train on")
    out_dir = _out(cfg, "checkpoints")
    cfg.train.seed = cfg.seed
    if cfg.model.patch_size != cfg.patch.patch_size:
        raise ConfigError(f"model.patch_size {cfg.model.patch_size} != patch.patch_size {cfg.patch.patch_size}")
    if cfg.train.epochs == 0:
        model, history = build_model(cfg.model, cfg.seed), []
        save_checkpoint(model, out_dir / "segnet.pt", cfg.seed)
    else:
        _, history = train_two_phase(cfg.model, subjects, cfg.train, cfg.patch, out_dir)
    write_history(history, out_dir / "history.jsonl")
    return [out_dir / "segnet.pt", out_dir / "history.jsonl"]


def _predict_one(task) -> str:
    pre_path, ckpt, patch_cfg, fusion_cfg, out_dir = task
    torch.set_num_threads(1)
    model = load_checkpoint(ckpt)
    pre = PreprocessedSubject.load(pre_path)
    probs = predict_probs(model, pre.image, patch_cfg, pre.box)
    labels = fuse(probs, fusion_cfg)
    ref = Volume(np.zeros(pre.image.shape[1:], dtype=np.uint8), pre.spacing, pre.affine)
    path = Path(out_dir) / f"{pre.id}.nii.gz"
    save_label_map(labels, ref, path)
    return str(path)


def cmd_predict_seg(cfg: PipelineConfig, args) -> List[Path]:
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.output_root) / "checkpoints" / "segnet.pt"
    if not ckpt.is_file():
        raise DataError(f"missing checkpoint {ckpt}")
    model = load_checkpoint(ckpt)
    if model.cfg.patch_size != cfg.patch.patch_size:
        raise ConfigError(f"checkpoint patch size {model.cfg.patch_size} != patch.patch_size {cfg.patch.patch_size}")
    out_dir = _out(cfg, "predictions")
    tasks = [(str(p), str(ckpt), cfg.patch, cfg.fusion, str(out_dir)) for p in _preprocessed(cfg, args.subjects)]
    return [Path(p) for p in _map(_predict_one, tasks, args.jobs)]


def _evaluate_one(task):
    sid, pred_path, gt_path = task
    pred, gt = load_volume(pred_path), load_volume(gt_path)
    return sid, evaluate_subject(np.rint(pred.data).astype(np.int16), np.rint(gt.data).astype(np.int16), gt.spacing)


def cmd_eval_seg(cfg: PipelineConfig, args) -> List[Path]:
    root = _data_root(cfg)
    pred_dir = Path(args.predictions) if args.predictions else Path(cfg.output_root) / "predictions"
    tasks = []
    for sid in _subject_ids(cfg, args.subjects):
        gt = find_nifti(root / sid / f"{sid}_{LABEL_SUFFIX}")
        pred = find_nifti(pred_dir / sid)
        if gt is None or pred is None:
            continue
        tasks.append((sid, str(pred), str(gt)))
    if not tasks:
        raise DataError(f"no subject has both a prediction in {pred_dir} and a ground-truth label")
    scores = dict(_map(_evaluate_one, tasks, args.jobs))
    path = _out(cfg, "reports") / "seg_eval.csv"
    write_report(scores, path)
    return [path]


def cmd_extract_features(cfg: PipelineConfig, args) -> List[Path]:
    records = {r.id: r for r in _survival_records(cfg)}
    pred_dir = Path(args.predictions) if args.predictions else Path(cfg.output_root) / "predictions"
    rows = []
    for pre_path in _preprocessed(cfg, args.subjects):
        sid = pre_path.stem
        if sid not in records:
            log.warning("%s: no survival record, skipped", sid)
            continue
        pred = find_nifti(pred_dir / sid)
        if pred is None:
            raise DataError(f"{sid}: no predicted label map in {pred_dir}")
        with np.load(pre_path) as f:
            brain = f["mask"]
        labels = np.rint(load_volume(pred).data).astype(np.int16)
        rows.append((sid, extract_features(labels, brain, records[sid].age, cfg.os.surface_mode)))
    if not rows:
        raise DataError("no subject has both a prediction and a survival record")
    path = _out(cfg, "features") / "features.csv"
    write_features(rows, path)
    return [path]


def _features_path(cfg: PipelineConfig, args) -> Path:
    path = Path(args.features) if args.features else Path(cfg.output_root) / "features" / "features.csv"
    if not path.is_file():
        raise DataError(f"missing features file {path}; run extract-features first")
    return path


def cmd_train_os(cfg: PipelineConfig, args) -> List[Path]:
    features = dict(read_features(_features_path(cfg, args)))
    usable = [r for r in filter_gtr(_survival_records(cfg)) if r.survival_days is not None and r.id in features]
    usable.sort(key=lambda r: r.id)
    log.info("training survival model on %d GTR subjects", len(usable))
    try:
        model = train_os([features[r.id] for r in usable], [r.survival_days for r in usable], cfg.os, cfg.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    path = _out(cfg, "checkpoints") / "os_model.pt"
    model.save(path)
    args._extra = {"fold_val_mse": model.fold_val_mse, "n_train": len(usable)}
    return [path]


def cmd_predict_os(cfg: PipelineConfig, args) -> List[Path]:
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.output_root) / "checkpoints" / "os_model.pt"
    if not ckpt.is_file():
        raise DataError(f"missing survival model {ckpt}")
    model = OSModel.load(ckpt)
    features = read_features(_features_path(cfg, args))
    gtr = {r.id for r in filter_gtr(_survival_records(cfg))}
    rows = [(sid, fv) for sid, fv in features if sid in gtr]
    if not rows:
        raise DataError("no GTR subjects with features to predict")
    days = predict_os(model, [fv for _, fv in rows])
    path = _out(cfg, "predictions") / "survival.csv"
    write_predictions([(sid, float(d)) for (sid, _), d in zip(rows, days)], path)
    return [path]


def cmd_eval_os(cfg: PipelineConfig, args) -> List[Path]:
    pred_path = Path(args.predictions) if args.predictions else Path(cfg.output_root) / "predictions" / "survival.csv"
    if not pred_path.is_file():
        raise DataError(f"missing survival predictions {pred_path}")
    preds = read_predictions(pred_path)
    truth = {r.id: r.survival_days for r in _survival_records(cfg) if r.survival_days is not None}
    ids = sorted(set(preds) & set(truth))
    if len(ids) < 2:
        raise DataError("need at least 2 subjects with both a prediction and a known survival")
    scores = evaluate_os([preds[i] for i in ids], [truth[i] for i in ids])
    path = _out(cfg, "reports") / "os_eval.csv"
    write_os_report(scores, path, len(ids))
    return [path]


COMMANDS = {
    "fit-stats": (cmd_fit_stats, "pool brain-voxel mean/std per modality over labelled training subjects"),
    "preprocess": (cmd_preprocess, "normalize and scale subjects with the saved training statistics"),
    "train-seg": (cmd_train_seg, "two-phase patch training of the segmentation net"),
    "predict-seg": (cmd_predict_seg, "predict label maps with a segmentation checkpoint"),
    "eval-seg": (cmd_eval_seg, "Dice / sensitivity / specificity / HD95 report against ground truth"),
    "extract-features": (cmd_extract_features, "survival features from predicted label maps"),
    "train-os": (cmd_train_os, "five-fold training of the survival regressor on GTR subjects"),
    "predict-os": (cmd_predict_os, "predict survival days for GTR subjects"),
    "eval-os": (cmd_eval_os, "accuracy / MSE / medianSE / stdSE / SpearmanR report"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=2 (repeatable)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="subjects processed in parallel (default 1)")
    common.add_argument("--subjects", nargs="+", help="restrict to these subject ids")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="gliomaseg", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "preprocess":
            p.add_argument("--stats", help="statistics file (default <output_root>/stats/norm_stats.ini)")
        if name in ("predict-seg", "predict-os"):
            p.add_argument("--checkpoint", help="checkpoint file (default under <output_root>/checkpoints)")
        if name in ("eval-seg", "extract-features", "eval-os"):
            p.add_argument("--predictions", help="predictions directory or file")
        if name in ("train-os", "predict-os"):
            p.add_argument("--features", help="features CSV (default <output_root>/features/features.csv)")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("gliomaseg: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        fn, _ = COMMANDS[args.command]
        args._extra = None
        outputs = fn(cfg, args)
        _write_manifest(cfg, args.command, outputs, args._extra)
    except ConfigError as exc:
        print(f"gliomaseg {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"gliomaseg {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        log.debug("failure", exc_info=True)
        print(f"gliomaseg {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for o in outputs:
        print(o)
    return EXIT_OK


def main() -> None:
    sys.exit(run())
