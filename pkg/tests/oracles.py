"""Brute-force references used by several test modules.

Everything here is written with explicit Python loops and no scipy so that it
stays independent of the vectorized code it checks.
"""

import math

import numpy as np


def confusion_counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def surface_points(mask):
    mask = np.asarray(mask, bool)
    pts = []
    nx, ny, nz = mask.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if not mask[i, j, k]:
                    continue
                for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    a, b, c = i + di, j + dj, k + dk
                    if not (0 <= a < nx and 0 <= b < ny and 0 <= c < nz) or not mask[a, b, c]:
                        pts.append((i, j, k))
                        break
    return pts


def percentile_linear(values, q):
    v = sorted(values)
    h = (len(v) - 1) * q / 100.0
    lo = int(math.floor(h))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (h - lo) * (v[hi] - v[lo])


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)):
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if not pred.any() and not gt.any():
        return 0.0
    if pred.any() != gt.any():
        return math.inf
    sp, sg = surface_points(pred), surface_points(gt)

    def dist(a, b):
        return math.sqrt(sum(((x - y) * s) ** 2 for x, y, s in zip(a, b, spacing)))

    pooled = [min(dist(p, g) for g in sg) for p in sp] + [min(dist(g, p) for p in sp) for g in sg]
    return percentile_linear(pooled, 95)


def gradient_sum(mask, mode="magnitude"):
    m = np.asarray(mask, dtype=float)
    nx, ny, nz = m.shape

    def at(i, j, k):
        if 0 <= i < nx and 0 <= j < ny and 0 <= k < nz:
            return m[i, j, k]
        return 0.0

    total = 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                gx = (at(i + 1, j, k) - at(i - 1, j, k)) / 2
                gy = (at(i, j + 1, k) - at(i, j - 1, k)) / 2
                gz = (at(i, j, k + 1) - at(i, j, k - 1)) / 2
                g = math.sqrt(gx * gx + gy * gy + gz * gz)
                if mode == "count":
                    total += 1.0 if g != 0 else 0.0
                else:
                    total += g
    return total


def ranks(values):
    """Average ranks (1-based) with ties sharing the mean rank."""
    out = []
    for v in values:
        less = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        out.append(less + (equal + 1) / 2.0)
    return out


def pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)
