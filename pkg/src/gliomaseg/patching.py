"""Patch placement over the brain box, patch extraction and overlap averaging.

All coordinates are in the full-volume frame. Patches may hang over the
volume border; out-of-volume voxels read as zero.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .preprocess import BrainBox


@dataclass(frozen=True)
class PatchConfig:
    patch_size: int = 128
    overlap: int = 32
    start_offset_max: int = 4

    def __post_init__(self):
        if not 0 < self.overlap < self.patch_size:
            raise ValueError(f"need 0 < overlap < patch_size, got {self.overlap}, {self.patch_size}")
        if self.start_offset_max < 0:
            raise ValueError("start_offset_max must be >= 0")

    @property
    def stride(self) -> int:
        return self.patch_size - self.overlap


@dataclass(frozen=True)
class PatchSpec:
    start: Tuple[int, int, int]
    size: Tuple[int, int, int]

    @property
    def stop(self) -> Tuple[int, ...]:
        return tuple(s + n for s, n in zip(self.start, self.size))


def _centered_start(lo: int, extent: int, size: int) -> int:
    return lo - (size - extent) // 2


def _grid_starts(lo: int, hi: int, size: int, stride: int, offset: int) -> List[int]:
    extent = hi - lo + 1
    if extent < size:
        return [_centered_start(lo, extent, size)]
    last = hi + 1 - size
    starts = []
    pos = lo - offset
    while pos < last:
        starts.append(pos)
        pos += stride
    starts.append(last)
    return starts


def _corner_starts(lo: int, hi: int, size: int, stride: int) -> List[int]:
    extent = hi - lo + 1
    if extent < size:
        return [_centered_start(lo, extent, size)]
    last = hi + 1 - size
    if extent <= 2 * size:
        return sorted({lo, last})
    # two flush patches cannot cover this axis: fill evenly, gaps <= stride
    n = -(-(last - lo) // stride) + 1
    return sorted({int(round(v)) for v in np.linspace(lo, last, n)})


def center_spec(box: BrainBox, size: int) -> PatchSpec:
    start = tuple(l + (e - size) // 2 for l, e in zip(box.lo, box.extent))
    return PatchSpec(start, (size,) * 3)


def _assemble(axis_starts: Sequence[Sequence[int]], box: BrainBox, size: int) -> List[PatchSpec]:
    specs = [PatchSpec(tuple(s), (size,) * 3) for s in itertools.product(*axis_starts)]
    specs.append(center_spec(box, size))
    return list(dict.fromkeys(specs))


def patches_phase1(box: BrainBox, cfg: PatchConfig, rng: np.random.Generator) -> List[PatchSpec]:
    """Regular grid starting a random 0..start_offset_max voxels outside the box."""
    offsets = rng.integers(0, cfg.start_offset_max + 1, size=3)
    axis_starts = [
        _grid_starts(lo, hi, cfg.patch_size, cfg.stride, int(o))
        for lo, hi, o in zip(box.lo, box.hi, offsets)
    ]
    return _assemble(axis_starts, box, cfg.patch_size)


def patches_phase2(box: BrainBox, cfg: PatchConfig) -> List[PatchSpec]:
    """Patches pushed into the box corners plus the center patch.

    Used for the second training phase and for prediction.
    """
    axis_starts = [_corner_starts(lo, hi, cfg.patch_size, cfg.stride) for lo, hi in zip(box.lo, box.hi)]
    return _assemble(axis_starts, box, cfg.patch_size)


def _overlap_slices(spec: PatchSpec, shape: Sequence[int]):
    """Matching slices into the volume and into the patch, or None if disjoint."""
    vol_sl, patch_sl = [], []
    for start, size, dim in zip(spec.start, spec.size, shape):
        a, b = max(start, 0), min(start + size, dim)
        if a >= b:
            return None
        vol_sl.append(slice(a, b))
        patch_sl.append(slice(a - start, b - start))
    return tuple(vol_sl), tuple(patch_sl)


def extract_patch(stack: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Cut ``spec`` out of a channel-first (C, X, Y, Z) array, zero padded."""
    out = np.zeros((stack.shape[0],) + tuple(spec.size), dtype=stack.dtype)
    sl = _overlap_slices(spec, stack.shape[1:])
    if sl is not None:
        vol_sl, patch_sl = sl
        out[(slice(None),) + patch_sl] = stack[(slice(None),) + vol_sl]
    return out


def reconstruct(prob_patches: Sequence[np.ndarray], specs: Sequence[PatchSpec], full_shape: Sequence[int]) -> np.ndarray:
    """Average overlapping patch predictions back into the full frame.

    Voxels covered by no patch are 0.
    """
    if len(prob_patches) != len(specs):
        raise ValueError(f"{len(prob_patches)} patches for {len(specs)} specs")
    if not specs:
        raise ValueError("no patches")
    channels = prob_patches[0].shape[0]
    total = np.zeros((channels,) + tuple(full_shape), dtype=np.float64)
    count = np.zeros(tuple(full_shape), dtype=np.int32)
    for patch, spec in zip(prob_patches, specs):
        if patch.shape[1:] != tuple(spec.size):
            raise ValueError(f"patch shape {patch.shape} does not match spec size {spec.size}")
        sl = _overlap_slices(spec, full_shape)
        if sl is None:
            continue
        vol_sl, patch_sl = sl
        total[(slice(None),) + vol_sl] += patch[(slice(None),) + patch_sl]
        count[vol_sl] += 1
    covered = count > 0
    total[:, covered] /= count[covered]
    return total


def coverage(specs: Sequence[PatchSpec], full_shape: Sequence[int]) -> np.ndarray:
    mask = np.zeros(tuple(full_shape), dtype=bool)
    for spec in specs:
        sl = _overlap_slices(spec, full_shape)
        if sl is not None:
            mask[sl[0]] = True
    return mask
