"""Conversion between BraTS label maps and nested region channels.

Labels: 1 necrosis / non-enhancing core, 2 edema, 4 enhancing tumor.
Channels are ordered (WT, TC, ET) with ET inside TC inside WT.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LABEL_VALUES = (0, 1, 2, 4)
REGIONS = ("WT", "TC", "ET")
REGION_LABELS = {"WT": (1, 2, 4), "TC": (1, 4), "ET": (4,)}


@dataclass(frozen=True)
class FusionConfig:
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


def check_labels(label_map: np.ndarray) -> None:
    bad = np.setdiff1d(np.unique(label_map), LABEL_VALUES)
    if bad.size:
        raise ValueError(f"illegal label value(s) {bad.tolist()}; expected a subset of {LABEL_VALUES}")


def channels_from_labelmap_regions(label_map: np.ndarray) -> np.ndarray:
    """Boolean (3, ...) array of WT, TC, ET masks."""
    label_map = np.asarray(label_map)
    check_labels(label_map)
    return np.stack([np.isin(label_map, REGION_LABELS[r]) for r in REGIONS])


def labels_to_channels(label_map: np.ndarray) -> np.ndarray:
    """Float32 training targets in channel order (WT, TC, ET)."""
    return channels_from_labelmap_regions(label_map).astype(np.float32)


def fuse(prob: np.ndarray, cfg: FusionConfig = FusionConfig()) -> np.ndarray:
    """Collapse (WT, TC, ET) probabilities into one label map.

    Priority beats probability: any voxel whose ET probability clears the
    threshold becomes 4, regardless of the other channels; then TC gives 1,
    then WT gives 2.
    """
    t = cfg.threshold
    p_wt, p_tc, p_et = prob[0], prob[1], prob[2]
    out = np.zeros(p_wt.shape, dtype=np.int16)
    out[p_wt >= t] = 2
    out[p_tc >= t] = 1
    out[p_et >= t] = 4
    return out
