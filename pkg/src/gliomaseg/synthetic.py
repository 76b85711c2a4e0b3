"""Synthetic BraTS-like subjects for tests, demos and smoke runs.

The brain is an ellipsoid; the tumor is a set of concentric spheres with a
necrotic center (1), an enhancing rim (4) and surrounding edema (2). Each
modality gets a distinct contrast for the tumor compartments plus noise.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .volume_io import MODALITIES, MODALITY_SUFFIX, Subject, Volume, save_label_map, save_volume

# mean intensity per modality for (brain, edema, enhancing, necrosis)
_CONTRAST = {
    "T1": (400.0, 330.0, 350.0, 200.0),
    "T1Gd": (420.0, 400.0, 900.0, 250.0),
    "T2": (300.0, 700.0, 550.0, 800.0),
    "FLAIR": (250.0, 750.0, 500.0, 350.0),
}


def sphere_labels(shape: Sequence[int], center, radii: Tuple[float, float, float]) -> np.ndarray:
    """Nested spheres: r < radii[0] -> 1, < radii[1] -> 4, < radii[2] -> 2."""
    grid = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grid, center)))
    labels = np.zeros(tuple(shape), dtype=np.int16)
    labels[dist < radii[2]] = 2
    labels[dist < radii[1]] = 4
    labels[dist < radii[0]] = 1
    return labels


def make_subject(
    subject_id: str,
    shape: Sequence[int] = (64, 64, 48),
    rng: Optional[np.random.Generator] = None,
    tumor_scale: float = 1.0,
    noise: float = 20.0,
    with_label: bool = True,
) -> Subject:
    rng = rng if rng is not None else np.random.default_rng(0)
    shape = tuple(int(n) for n in shape)
    grid = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    c = np.asarray(shape) / 2 + rng.uniform(-1.5, 1.5, 3)
    semi = np.asarray(shape) * rng.uniform(0.36, 0.44, 3)
    brain = sum(((g - ci) / si) ** 2 for g, ci, si in zip(grid, c, semi)) <= 1.0

    base = min(shape) * 0.12 * tumor_scale
    tumor_center = c + rng.uniform(-0.2, 0.2, 3) * semi
    radii = (base * 0.5, base, base * 1.8)
    labels = sphere_labels(shape, tumor_center, radii)
    labels[~brain] = 0

    modalities = {}
    for m in MODALITIES:
        b, ed, et, ncr = _CONTRAST[m]
        data = np.zeros(shape, dtype=np.float64)
        data[brain] = b
        data[labels == 2] = ed
        data[labels == 4] = et
        data[labels == 1] = ncr
        data[brain] += rng.normal(0, noise, int(brain.sum()))
        data[brain] = np.maximum(data[brain], 1.0)
        modalities[m] = Volume(data.astype(np.float32))
    return Subject(id=subject_id, modalities=modalities, label=labels if with_label else None)


def write_subject(subject: Subject, root) -> Path:
    """Write ``subject`` in the BraTS folder layout under ``root``."""
    folder = Path(root) / subject.id
    folder.mkdir(parents=True, exist_ok=True)
    for m in MODALITIES:
        save_volume(subject.modalities[m], folder / f"{subject.id}_{MODALITY_SUFFIX[m]}.nii.gz")
    if subject.label is not None:
        save_label_map(subject.label, subject.reference, folder / f"{subject.id}_seg.nii.gz")
    return folder
