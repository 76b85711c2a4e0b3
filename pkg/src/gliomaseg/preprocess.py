"""Brain-wise intensity normalization and brain bounding boxes.

Each modality is z-scored with statistics pooled over the brain voxels of the
whole training corpus, then min-max scaled per image so that brain voxels lie
in [10, 110] while the background stays exactly 0.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np

from .volume_io import MODALITIES, DataError, Subject

SCALED_MIN = 10.0
SCALED_RANGE = 100.0


@dataclass(frozen=True)
class BrainBox:
    """Inclusive voxel bounds of the smallest box holding all brain voxels."""

    lo: Tuple[int, int, int]
    hi: Tuple[int, int, int]

    def __post_init__(self):
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"invalid box lo={self.lo} hi={self.hi}")

    @property
    def extent(self) -> Tuple[int, ...]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    def slices(self) -> Tuple[slice, ...]:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))


@dataclass
class NormStats:
    mu: Dict[str, float]
    sigma: Dict[str, float]

    def __post_init__(self):
        for m, s in self.sigma.items():
            if not s > 0:
                raise DataError(f"sigma = 0 for modality {m}")

    def save(self, path) -> None:
        parser = configparser.ConfigParser()
        for m in self.mu:
            # repr keeps all 17 significant digits, so reload is lossless
            parser[m] = {"mu": repr(float(self.mu[m])), "sigma": repr(float(self.sigma[m]))}
        with open(path, "w", encoding="utf-8") as fh:
            parser.write(fh)

    @classmethod
    def load(cls, path) -> "NormStats":
        if not Path(path).is_file():
            raise DataError(f"missing stats file {path}")
        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser.read(path, encoding="utf-8")
        mu, sigma = {}, {}
        for m in parser.sections():
            mu[m] = float(parser[m]["mu"])
            sigma[m] = float(parser[m]["sigma"])
        missing = [m for m in MODALITIES if m not in mu]
        if missing:
            raise DataError(f"{path}: no statistics for {missing}")
        return cls(mu=mu, sigma=sigma)


def brain_mask(volume) -> np.ndarray:
    data = getattr(volume, "data", volume)
    return np.asarray(data) != 0


def union_brain_mask(subject: Subject) -> np.ndarray:
    mask = np.zeros(subject.shape, dtype=bool)
    for m in MODALITIES:
        mask |= brain_mask(subject.modalities[m])
    return mask


def bounding_box(mask: np.ndarray) -> BrainBox:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("no brain voxels")
    lo, hi = [], []
    for axis in range(mask.ndim):
        other = tuple(a for a in range(mask.ndim) if a != axis)
        idx = np.flatnonzero(mask.any(axis=other))
        lo.append(int(idx[0]))
        hi.append(int(idx[-1]))
    return BrainBox(tuple(lo), tuple(hi))


def fit_norm_stats(subjects: Iterable[Subject], modalities: Sequence[str] = MODALITIES) -> NormStats:
    """Pooled mean and population std of brain voxels per modality.

    Two passes over the corpus (sum, then squared deviations) in float64.
    """
    subjects = list(subjects)
    if not subjects:
        raise DataError("no training subjects")
    mu, sigma = {}, {}
    for m in modalities:
        total, count = 0.0, 0
        for s in subjects:
            v = np.asarray(s.modalities[m].data, dtype=np.float64)
            v = v[v != 0]
            total += float(v.sum())
            count += v.size
        if count == 0:
            raise DataError(f"zero brain voxels for modality {m}")
        mean = total / count
        sq = 0.0
        for s in subjects:
            v = np.asarray(s.modalities[m].data, dtype=np.float64)
            v = v[v != 0]
            sq += float(np.sum((v - mean) ** 2))
        std = float(np.sqrt(sq / count))
        if not std > 0:
            raise DataError(f"sigma = 0 for modality {m}")
        mu[m], sigma[m] = mean, std
    return NormStats(mu=mu, sigma=sigma)


def normalize(volume, mu: float, sigma: float, mask: np.ndarray | None = None) -> np.ndarray:
    """z-score the brain voxels; background stays 0."""
    if not sigma > 0:
        raise DataError("sigma must be positive")
    data = np.asarray(getattr(volume, "data", volume), dtype=np.float64)
    if mask is None:
        mask = data != 0
    out = np.zeros_like(data)
    out[mask] = (data[mask] - mu) / sigma
    return out


def scale(zscored: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Affine map of the masked voxels onto [10, 110].

    ``mask`` must be the brain mask of the raw image: a brain voxel whose
    z-score is exactly 0 is still brain.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("no brain voxels")
    values = zscored[mask]
    lo, hi = values.min(), values.max()
    if not hi > lo:
        raise DataError("flat image: cannot min-max scale a constant brain")
    out = np.zeros(zscored.shape, dtype=np.float64)
    out[mask] = SCALED_MIN + SCALED_RANGE * ((values - lo) / (hi - lo))
    return out


@dataclass
class PreprocessedSubject:
    id: str
    image: np.ndarray  # (4, X, Y, Z) float32, scaled
    mask: np.ndarray  # union brain mask
    box: BrainBox
    spacing: tuple
    affine: np.ndarray
    label: np.ndarray | None = None

    def save(self, path) -> None:
        arrays = dict(
            id=np.array(self.id),
            image=self.image,
            mask=self.mask,
            box=np.array([self.box.lo, self.box.hi], dtype=np.int64),
            spacing=np.array(self.spacing, dtype=np.float64),
            affine=self.affine,
        )
        if self.label is not None:
            arrays["label"] = self.label
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path) -> "PreprocessedSubject":
        with np.load(path) as f:
            box = f["box"]
            return cls(
                id=str(f["id"]),
                image=f["image"],
                mask=f["mask"],
                box=BrainBox(tuple(int(v) for v in box[0]), tuple(int(v) for v in box[1])),
                spacing=tuple(float(v) for v in f["spacing"]),
                affine=f["affine"],
                label=f["label"] if "label" in f.files else None,
            )


def preprocess_subject(subject: Subject, stats: NormStats) -> PreprocessedSubject:
    """Normalize and scale all four modalities with (training) ``stats``."""
    channels = []
    for m in MODALITIES:
        vol = subject.modalities[m]
        mask = brain_mask(vol)
        z = normalize(vol, stats.mu[m], stats.sigma[m], mask)
        channels.append(scale(z, mask).astype(np.float32))
    union = union_brain_mask(subject)
    ref = subject.reference
    return PreprocessedSubject(
        id=subject.id,
        image=np.stack(channels),
        mask=union,
        box=bounding_box(union),
        spacing=ref.spacing,
        affine=ref.affine,
        label=subject.label,
    )
