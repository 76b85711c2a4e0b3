"""Patch-wise training and full-volume prediction for the segmentation net."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
import torch

from ..labelfuse import labels_to_channels
from ..patching import PatchConfig, extract_patch, patches_phase1, patches_phase2, reconstruct
from ..preprocess import BrainBox, PreprocessedSubject, bounding_box
from .augment import AugmentConfig, augment
from .loss import dice_loss
from .model import SegModel, SegModelConfig, build_model

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gliomaseg-segnet-v1"
PHASES = ("phase1", "phase2")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    lr_decay: float = 0.5
    patience: int = 10
    min_delta: float = 1e-4
    epochs: int = 100
    batch_size: int = 1
    max_steps: Optional[int] = None  # cap on optimizer steps per phase
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")


class PlateauScheduler:
    """Multiply the LR by ``factor`` once ``patience`` epochs pass without
    the monitored loss improving by more than ``min_delta``."""

    def __init__(self, optimizer: torch.optim.Optimizer, factor: float = 0.5, patience: int = 10,
                 min_delta: float = 1e-4):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, loss: float) -> None:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.bad_epochs = 0


def _label_patch(label: np.ndarray, spec) -> np.ndarray:
    return labels_to_channels(extract_patch(label[None], spec)[0])


def _specs_for(subject: PreprocessedSubject, strategy: str, patch_cfg: PatchConfig, rng):
    if strategy == "phase1":
        return patches_phase1(subject.box, patch_cfg, rng)
    if strategy == "phase2":
        return patches_phase2(subject.box, patch_cfg)
    raise ValueError(f"unknown patch strategy {strategy!r}; expected one of {PHASES}")


def save_checkpoint(model: SegModel, path, seed: int = 0, history: Sequence[dict] = ()) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "model_config": model.cfg.to_dict(),
            "seed": seed,
            "state_dict": model.state_dict(),
            "history": list(history),
        },
        path,
    )


def load_checkpoint(path) -> SegModel:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a segmentation checkpoint")
    model = SegModel(SegModelConfig(**ckpt["model_config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model


def write_history(history: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def train_phase(
    model: SegModel,
    subjects: Sequence[PreprocessedSubject],
    strategy: str,
    tcfg: TrainConfig,
    patch_cfg: Optional[PatchConfig] = None,
    checkpoint_path=None,
    loss_trace: Optional[List[float]] = None,
):
    """Train ``model`` in place for one phase; returns ``(model, history)``.

    ``history`` holds one dict per epoch with the mean patch loss, the LR
    used during the epoch and the number of optimizer steps. The lowest-loss
    epoch is written to ``checkpoint_path`` when given. Per-step losses are
    appended to ``loss_trace`` if a list is passed.
    """
    subjects = list(subjects)
    if not subjects:
        raise ValueError("empty subject list")
    missing = [s.id for s in subjects if s.label is None]
    if missing:
        raise ValueError(f"subjects without labels: {missing}")
    patch_cfg = patch_cfg or PatchConfig(patch_size=model.cfg.patch_size)
    if patch_cfg.patch_size != model.cfg.patch_size:
        raise ValueError(f"patch size {patch_cfg.patch_size} does not match model input {model.cfg.patch_size}")
    if strategy not in PHASES:
        raise ValueError(f"unknown patch strategy {strategy!r}; expected one of {PHASES}")

    if tcfg.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    scheduler = PlateauScheduler(optimizer, tcfg.lr_decay, tcfg.patience, tcfg.min_delta)

    history: List[dict] = []
    best = float("inf")
    steps = 0
    model.train()
    for epoch in range(tcfg.epochs):
        if tcfg.max_steps is not None and steps >= tcfg.max_steps:
            break
        pairs = [(s, spec) for s in subjects for spec in _specs_for(s, strategy, patch_cfg, rng)]
        order = rng.permutation(len(pairs))
        lr = scheduler.lr
        losses = []
        for i in order:
            if tcfg.max_steps is not None and steps >= tcfg.max_steps:
                break
            subject, spec = pairs[i]
            image = extract_patch(subject.image, spec)
            target = _label_patch(subject.label, spec)
            image, target = augment(image, target, tcfg.augment, rng)
            x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
            y = torch.from_numpy(np.ascontiguousarray(target, dtype=np.float32))[None]
            optimizer.zero_grad()
            loss = dice_loss(y, model(x))
            loss.backward()
            optimizer.step()
            steps += 1
            losses.append(loss.item())
            if loss_trace is not None:
                loss_trace.append(losses[-1])
        mean_loss = float(np.mean(losses))
        history.append({"phase": strategy, "epoch": epoch, "loss": mean_loss, "lr": lr, "steps": len(losses)})
        log.info("%s epoch %d loss %.5f lr %.2e", strategy, epoch, mean_loss, lr)
        if mean_loss < best:
            best = mean_loss
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path, tcfg.seed, history)
        scheduler.step(mean_loss)
    model.eval()
    return model, history


@torch.no_grad()
def predict_probs(
    model: SegModel,
    image: np.ndarray,
    patch_cfg: Optional[PatchConfig] = None,
    box: Optional[BrainBox] = None,
) -> np.ndarray:
    """Full-volume (3, X, Y, Z) probabilities from phase-2 patches.

    ``image`` is the preprocessed (4, X, Y, Z) stack. The box is derived from
    its nonzero voxels unless given.
    """
    cfg = model.cfg
    patch_cfg = patch_cfg or PatchConfig(patch_size=cfg.patch_size)
    if image.ndim != 4 or image.shape[0] != cfg.in_channels:
        raise ValueError(f"expected a ({cfg.in_channels}, X, Y, Z) stack, got {image.shape}")
    if patch_cfg.patch_size != cfg.patch_size:
        raise ValueError(f"patch size {patch_cfg.patch_size} does not match model input {cfg.patch_size}")
    if box is None:
        box = bounding_box(np.any(image != 0, axis=0))
    model.eval()
    specs = patches_phase2(box, patch_cfg)
    outputs = []
    for spec in specs:
        x = torch.from_numpy(np.ascontiguousarray(extract_patch(image, spec), dtype=np.float32))[None]
        outputs.append(model(x)[0].numpy().astype(np.float64))
    return reconstruct(outputs, specs, image.shape[1:])


def train_two_phase(model_cfg: SegModelConfig, subjects, tcfg: TrainConfig, patch_cfg: PatchConfig,
                    out_dir) -> tuple:
    """Phase 1 from scratch, then phase 2 starting from the best phase-1 weights."""
    out_dir = Path(out_dir)
    model = build_model(model_cfg, tcfg.seed)
    history: List[dict] = []
    for phase in PHASES:
        ckpt = out_dir / f"segnet_{phase}.pt"
        save_checkpoint(model, ckpt, tcfg.seed, history)
        model, h = train_phase(model, subjects, phase, tcfg, patch_cfg, checkpoint_path=ckpt)
        history += h
        model = load_checkpoint(ckpt)
    save_checkpoint(model, out_dir / "segnet.pt", tcfg.seed, history)
    return model, history

