"""Overall-survival regression from predicted tumor labels.

Seven features per subject: the WT/TC/ET volumes relative to the brain
volume, a gradient-based surface measure for each region, and age. A small
MLP (two hidden layers of 64 units) is trained with five-fold cross
validation; the five fold models are averaged at prediction time.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import stats as sps
from sklearn.model_selection import KFold
from torch import nn

from .labelfuse import REGIONS, channels_from_labelmap_regions
from .segnet.train import PlateauScheduler
from .volume_io import DataError, ResectionStatus, SurvivalRecord

OS_CHECKPOINT_FORMAT = "gliomaseg-os-v1"
SHORT_MAX = 300  # days < 300 are short
MID_MAX = 450  # 300 <= days <= 450 are mid


@dataclass
class FeatureVector:
    ratio_WT: float
    ratio_TC: float
    ratio_ET: float
    surface_WT: float
    surface_TC: float
    surface_ET: float
    age: float

    @classmethod
    def names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.names()], dtype=np.float64)


class OSBucket(str, enum.Enum):
    SHORT = "short"
    MID = "mid"
    LONG = "long"


@dataclass
class OSModelConfig:
    hidden_layers: int = 2
    hidden_units: int = 64
    lr: float = 1e-4
    lr_decay: float = 0.5
    patience: int = 10
    min_delta: float = 1e-4
    folds: int = 5
    batch_size: int = 5
    epochs: int = 500
    leaky_slope: float = 0.01
    surface_mode: str = "magnitude"  # or "count": number of voxels with nonzero gradient

    def __post_init__(self):
        for name in ("hidden_layers", "hidden_units", "folds", "batch_size", "epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.surface_mode not in ("magnitude", "count"):
            raise ValueError(f"unknown surface_mode {self.surface_mode!r}")


def gradient_magnitude(mask: np.ndarray) -> np.ndarray:
    """Central-difference gradient norm, treating voxels outside as 0."""
    m = np.pad(np.asarray(mask, dtype=np.float64), 1)
    inner = (slice(1, -1),) * 3
    sq = np.zeros(mask.shape, dtype=np.float64)
    for axis in range(3):
        fwd = list(inner)
        bwd = list(inner)
        fwd[axis] = slice(2, None)
        bwd[axis] = slice(None, -2)
        sq += ((m[tuple(fwd)] - m[tuple(bwd)]) / 2.0) ** 2
    return np.sqrt(sq)


def surface_measure(mask: np.ndarray, mode: str = "magnitude") -> float:
    g = gradient_magnitude(mask)
    if mode == "count":
        return float(np.count_nonzero(g))
    return float(g.sum())


def extract_features(labels: np.ndarray, brain: np.ndarray, age: float,
                     surface_mode: str = "magnitude") -> FeatureVector:
    labels = np.asarray(labels)
    brain = np.asarray(brain, dtype=bool)
    if labels.shape != brain.shape:
        raise ValueError(f"shape mismatch: {labels.shape} vs {brain.shape}")
    n_brain = int(np.count_nonzero(brain))
    if n_brain == 0:
        raise DataError("empty brain mask")
    regions = channels_from_labelmap_regions(labels)
    values = {}
    for r, mask in zip(REGIONS, regions):
        values[f"ratio_{r}"] = np.count_nonzero(mask) / n_brain
        values[f"surface_{r}"] = surface_measure(mask, surface_mode)
    return FeatureVector(age=float(age), **values)


def filter_gtr(records: Sequence[SurvivalRecord]) -> List[SurvivalRecord]:
    return [r for r in records if r.resection_status == ResectionStatus.GTR]


def bucket(days: float) -> OSBucket:
    if days < 0:
        raise ValueError(f"negative survival {days}")
    if days < SHORT_MAX:
        return OSBucket.SHORT
    if days <= MID_MAX:
        return OSBucket.MID
    return OSBucket.LONG


def evaluate_os(predictions: Sequence[float], truths: Sequence[float]) -> Dict[str, float]:
    """Accuracy over survival classes plus squared-error statistics and Spearman's rho.

    stdSE is the population standard deviation of the squared errors.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    true = np.asarray(truths, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {true.size}")
    if pred.size < 2:
        raise ValueError("need at least 2 cases")
    se = (pred - true) ** 2
    acc = np.mean([bucket(p) == bucket(t) for p, t in zip(pred, true)])
    rp, rt = sps.rankdata(pred), sps.rankdata(true)
    if rp.std() == 0 or rt.std() == 0:
        rho = math.nan
    else:
        rho = float(np.corrcoef(rp, rt)[0, 1])
    return {
        "accuracy": float(acc),
        "MSE": float(se.mean()),
        "medianSE": float(np.median(se)),
        "stdSE": float(se.std()),
        "SpearmanR": rho,
    }


class OSNet(nn.Module):
    def __init__(self, n_in: int, cfg: OSModelConfig):
        super().__init__()
        layers: List[nn.Module] = []
        width = n_in
        for _ in range(cfg.hidden_layers):
            layers += [nn.Linear(width, cfg.hidden_units), nn.LeakyReLU(cfg.leaky_slope)]
            width = cfg.hidden_units
        layers.append(nn.Linear(width, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).squeeze(-1)


@dataclass
class FoldModel:
    net: OSNet
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    @torch.no_grad()
    def predict(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.x_mean) / self.x_std
        out = self.net(torch.as_tensor(z, dtype=torch.float32)).numpy().astype(np.float64)
        return out * self.y_std + self.y_mean


@dataclass
class OSModel:
    cfg: OSModelConfig
    folds: List[FoldModel]
    fold_assignment: np.ndarray  # fold index per training record
    fold_val_mse: List[float]
    seed: int = 0

    @property
    def mean_val_mse(self) -> float:
        return float(np.mean(self.fold_val_mse))

    def save(self, path) -> None:
        torch.save(
            {
                "format": OS_CHECKPOINT_FORMAT,
                "config": asdict(self.cfg),
                "seed": self.seed,
                "fold_assignment": self.fold_assignment.tolist(),
                "fold_val_mse": list(self.fold_val_mse),
                "folds": [
                    {
                        "state_dict": f.net.state_dict(),
                        "x_mean": f.x_mean.tolist(),
                        "x_std": f.x_std.tolist(),
                        "y_mean": f.y_mean,
                        "y_std": f.y_std,
                    }
                    for f in self.folds
                ],
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "OSModel":
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt.get("format") != OS_CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a survival model checkpoint")
        cfg = OSModelConfig(**ckpt["config"])
        folds = []
        for f in ckpt["folds"]:
            x_mean = np.asarray(f["x_mean"])
            net = OSNet(x_mean.size, cfg)
            net.load_state_dict(f["state_dict"])
            net.eval()
            folds.append(FoldModel(net, x_mean, np.asarray(f["x_std"]), f["y_mean"], f["y_std"]))
        return cls(cfg, folds, np.asarray(ckpt["fold_assignment"]), ckpt["fold_val_mse"], ckpt["seed"])


def _as_matrix(features) -> np.ndarray:
    rows = [f.to_array() if isinstance(f, FeatureVector) else np.asarray(f, dtype=np.float64) for f in features]
    return np.atleast_2d(np.stack(rows)) if rows else np.zeros((0, len(FeatureVector.names())))


def fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold index of each of ``n`` records; fold sizes differ by at most one."""
    out = np.empty(n, dtype=np.int64)
    for k, (_, val_idx) in enumerate(KFold(folds, shuffle=True, random_state=seed).split(np.arange(n))):
        out[val_idx] = k
    return out


def _fit_fold(x: np.ndarray, y: np.ndarray, cfg: OSModelConfig, seed: int) -> FoldModel:
    x_mean, x_std = x.mean(0), x.std(0)
    x_std = np.where(x_std > 0, x_std, 1.0)
    y_mean, y_std = float(y.mean()), float(y.std()) or 1.0
    xt = torch.as_tensor((x - x_mean) / x_std, dtype=torch.float32)
    yt = torch.as_tensor((y - y_mean) / y_std, dtype=torch.float32)

    torch.manual_seed(seed)
    net = OSNet(x.shape[1], cfg)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    scheduler = PlateauScheduler(optimizer, cfg.lr_decay, cfg.patience, cfg.min_delta)
    gen = torch.Generator().manual_seed(seed)
    loss_fn = nn.MSELoss()
    for _ in range(cfg.epochs):
        perm = torch.randperm(len(xt), generator=gen)
        total = 0.0
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            optimizer.zero_grad()
            loss = loss_fn(net(xt[idx]), yt[idx])
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
        scheduler.step(total / len(xt))
    net.eval()
    return FoldModel(net, x_mean, x_std, y_mean, y_std)


def train_os(features, days: Sequence[float], cfg: OSModelConfig = OSModelConfig(), seed: int = 0) -> OSModel:
    """Five-fold CV training; standardization is fitted on each training split only.

    Target days are standardized as well and mapped back at prediction.
    """
    x = _as_matrix(features)
    y = np.asarray(days, dtype=np.float64)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} feature rows for {len(y)} targets")
    if len(x) < cfg.folds:
        raise ValueError(f"need at least {cfg.folds} records for {cfg.folds}-fold CV, got {len(x)}")
    assignment = fold_assignment(len(x), cfg.folds, seed)
    models, val_mse = [], []
    for k in range(cfg.folds):
        train = assignment != k
        fm = _fit_fold(x[train], y[train], cfg, seed + k)
        models.append(fm)
        val_mse.append(float(np.mean((fm.predict(x[~train]) - y[~train]) ** 2)))
    return OSModel(cfg, models, assignment, val_mse, seed)


def predict_os(model: OSModel, features) -> np.ndarray:
    """Mean of the fold models, clamped at 0 days."""
    x = _as_matrix(features)
    out = np.mean([f.predict(x) for f in model.folds], axis=0)
    return np.maximum(out, 0.0)


def write_features(rows: Sequence[Tuple[str, FeatureVector]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", *FeatureVector.names()])
        for sid, fv in rows:
            writer.writerow([sid, *(repr(float(v)) for v in fv.to_array())])


def read_features(path) -> List[Tuple[str, FeatureVector]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [n for n in ["id", *FeatureVector.names()] if n not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        return [(row["id"], FeatureVector(**{n: float(row[n]) for n in FeatureVector.names()})) for row in reader]


def write_predictions(rows: Sequence[Tuple[str, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "days"])
        for sid, days in rows:
            writer.writerow([sid, f"{days:.3f}"])


def read_predictions(path) -> Dict[str, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["id"]: float(row["days"]) for row in csv.DictReader(fh)}


def write_os_report(scores: Dict[str, float], path, n: Optional[int] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n", "accuracy", "MSE", "medianSE", "stdSE", "SpearmanR"])
        writer.writerow([n if n is not None else "", *(f"{scores[k]:.6g}" for k in
                                                      ("accuracy", "MSE", "medianSE", "stdSE", "SpearmanR"))])
