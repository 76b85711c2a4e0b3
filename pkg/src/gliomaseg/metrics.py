"""BraTS segmentation criteria: Dice, sensitivity, specificity and HD95."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Tuple

import numpy as np
from scipy import ndimage

from .labelfuse import channels_from_labelmap_regions

INF = math.inf
EVAL_REGIONS = ("ET", "TC", "WT")
CRITERIA = ("dice", "sensitivity", "specificity", "hausdorff95")

_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


@dataclass
class RegionScores:
    dice: float
    sensitivity: float
    specificity: float
    hausdorff95: float


def _check(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def confusion(pred, gt) -> Tuple[int, int, int, int]:
    pred, gt = _check(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = pred.size - tp - fp - fn
    return tp, fp, fn, tn


def dice(pred, gt) -> float:
    tp, fp, fn, _ = confusion(pred, gt)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def sensitivity(pred, gt) -> float:
    tp, _, fn, _ = confusion(pred, gt)
    return 1.0 if tp + fn == 0 else tp / (tp + fn)


def specificity(pred, gt) -> float:
    _, fp, _, tn = confusion(pred, gt)
    return 1.0 if tn + fp == 0 else tn / (tn + fp)


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask.

    Voxels on the array border count as surface (outside is background).
    """
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FACE_NEIGHBOURS, border_value=0)


def surface_distances(pred, gt, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Pooled distances from each surface voxel of one mask to the other surface."""
    pred, gt = _check(pred, gt)
    sp, sg = surface(pred), surface(gt)
    to_gt = ndimage.distance_transform_edt(~sg, sampling=spacing)
    to_pred = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return np.concatenate([to_gt[sp], to_pred[sg]])


def hausdorff95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    pred, gt = _check(pred, gt)
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return INF
    return float(np.percentile(surface_distances(pred, gt, spacing), 95))


def score_region(pred, gt, spacing=(1.0, 1.0, 1.0)) -> RegionScores:
    return RegionScores(
        dice=dice(pred, gt),
        sensitivity=sensitivity(pred, gt),
        specificity=specificity(pred, gt),
        hausdorff95=hausdorff95(pred, gt, spacing),
    )


def evaluate_subject(pred_labels, gt_labels, spacing=(1.0, 1.0, 1.0)) -> Dict[str, RegionScores]:
    pred_labels, gt_labels = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"shape mismatch: {pred_labels.shape} vs {gt_labels.shape}")
    pred_ch = channels_from_labelmap_regions(pred_labels)
    gt_ch = channels_from_labelmap_regions(gt_labels)
    order = ("WT", "TC", "ET")
    return {r: score_region(pred_ch[order.index(r)], gt_ch[order.index(r)], spacing) for r in EVAL_REGIONS}


def aggregate(per_subject: Mapping[str, Mapping[str, RegionScores]]) -> Dict[str, Dict[str, Tuple[float, int]]]:
    """Corpus mean per region and criterion as ``(mean, n_excluded)``.

    Infinite HD95 values are left out of the mean and counted instead.
    """
    summary: Dict[str, Dict[str, Tuple[float, int]]] = {}
    for region in EVAL_REGIONS:
        summary[region] = {}
        for crit in CRITERIA:
            values = [getattr(scores[region], crit) for scores in per_subject.values()]
            finite = [v for v in values if math.isfinite(v)]
            mean = float(np.mean(finite)) if finite else math.nan
            summary[region][crit] = (mean, len(values) - len(finite))
    return summary


def _fmt(value: float) -> str:
    if value == INF:
        return "inf"
    if math.isnan(value):
        return "nan"
    return f"{value:.6f}"


def write_report(per_subject: Mapping[str, Mapping[str, RegionScores]], path) -> None:
    """One row per subject and region, then a ``mean`` row per region.

    The ``excluded`` column of mean rows counts subjects whose infinite HD95
    was left out of the average.
    """
    summary = aggregate(per_subject)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject", "region", *CRITERIA, "excluded"])
        for sid in sorted(per_subject):
            for region in EVAL_REGIONS:
                s = asdict(per_subject[sid][region])
                writer.writerow([sid, region, *(_fmt(s[c]) for c in CRITERIA), ""])
        for region in EVAL_REGIONS:
            row = summary[region]
            writer.writerow(["mean", region, *(_fmt(row[c][0]) for c in CRITERIA), row["hausdorff95"][1]])


def read_report(path) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
