"""On-the-fly spatial augmentation of (image, target) patch pairs.

Every transform is applied identically to the 4 image channels and the 3
target channels. Interpolation is trilinear for both, and targets are
re-binarized at 0.5 afterwards; linear interpolation with non-negative
weights keeps ET <= TC <= WT, so the region nesting survives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    rotation: bool = True
    distortion: bool = True
    max_angle: float = 10.0  # degrees, small-angle part of the rotation
    elastic_alpha: float = 4.0  # displacement magnitude in voxels
    elastic_sigma: float = 6.0  # smoothing of the displacement field

    @property
    def enabled(self) -> bool:
        return self.flip or self.rotation or self.distortion


def flip(patch: np.ndarray, target: np.ndarray, axis: int) -> Tuple[np.ndarray, np.ndarray]:
    """Mirror spatial ``axis`` (0, 1 or 2) of both arrays."""
    return np.flip(patch, axis + 1).copy(), np.flip(target, axis + 1).copy()


def rot90(patch: np.ndarray, target: np.ndarray, k: int, plane: Tuple[int, int]):
    axes = (plane[0] + 1, plane[1] + 1)
    return np.rot90(patch, k, axes).copy(), np.rot90(target, k, axes).copy()


def _warp(arr: np.ndarray, coords: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="constant", cval=0.0) for ch in arr])


def _rotation_matrix(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    matrix = np.eye(3)
    for plane in ((0, 1), (0, 2), (1, 2)):
        theta = np.deg2rad(rng.uniform(-max_angle, max_angle))
        r = np.eye(3)
        i, j = plane
        r[i, i] = r[j, j] = np.cos(theta)
        r[i, j], r[j, i] = -np.sin(theta), np.sin(theta)
        matrix = matrix @ r
    return matrix


def _sample_grid(shape, rng: np.random.Generator, cfg: AugmentConfig, rotate: bool, distort: bool) -> np.ndarray:
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))
    center = (np.asarray(shape, dtype=np.float64) - 1) / 2
    coords = grid
    if rotate:
        rel = grid.reshape(3, -1) - center[:, None]
        coords = (_rotation_matrix(rng, cfg.max_angle) @ rel + center[:, None]).reshape(grid.shape)
    if distort:
        disp = rng.uniform(-1, 1, size=(3,) + tuple(shape))
        for d in range(3):
            disp[d] = ndimage.gaussian_filter(disp[d], cfg.elastic_sigma, mode="constant")
        peak = np.abs(disp).max()
        if peak > 0:
            disp *= cfg.elastic_alpha / peak
        coords = coords + disp
    return coords


def augment(patch: np.ndarray, target: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Random flip, rotation and elastic distortion of one patch pair."""
    if not cfg.enabled:
        return patch, target
    if cfg.flip:
        for axis in range(3):
            if rng.random() < 0.5:
                patch, target = flip(patch, target, axis)
    if cfg.rotation:
        plane = [(0, 1), (0, 2), (1, 2)][rng.integers(3)]
        if patch.shape[plane[0] + 1] == patch.shape[plane[1] + 1]:
            patch, target = rot90(patch, target, int(rng.integers(4)), plane)
    small_rotation = cfg.rotation and cfg.max_angle > 0
    if small_rotation or cfg.distortion:
        coords = _sample_grid(patch.shape[1:], rng, cfg, small_rotation, cfg.distortion)
        patch = _warp(patch, coords).astype(patch.dtype)
        target = (_warp(target.astype(np.float64), coords) >= 0.5).astype(target.dtype)
    return patch, target
