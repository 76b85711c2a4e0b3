"""Multi-class soft Dice loss.

For each channel c the term is sum(Y*P) / (sum(Y) + sum(P) + eps) and the
loss is the negated (optionally weighted) sum over channels, so a perfect
three-channel prediction scores -1.5.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch

EPS = 1e-5


def dice_loss(target: torch.Tensor, pred: torch.Tensor, weights: Optional[Sequence[float]] = None,
              eps: float = EPS) -> torch.Tensor:
    """Loss for (C, ...) or (N, C, ...) tensors; batches are averaged."""
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(pred.shape)}")
    if pred.dim() < 2:
        raise ValueError("expected a channel axis")
    batched = pred.dim() >= 5
    if not batched:
        target, pred = target.unsqueeze(0), pred.unsqueeze(0)
    dims = tuple(range(2, pred.dim()))
    num = (target * pred).sum(dim=dims)
    den = target.sum(dim=dims) + pred.sum(dim=dims) + eps
    terms = num / den
    if weights is not None:
        terms = terms * torch.as_tensor(weights, dtype=terms.dtype, device=terms.device)
    return -terms.sum(dim=1).mean()


def dice_loss_numpy(target: np.ndarray, pred: np.ndarray, weights=None, eps: float = EPS) -> float:
    """Single-sample (C, ...) loss in plain numpy."""
    c = target.shape[0]
    t = target.reshape(c, -1).astype(np.float64)
    p = pred.reshape(c, -1).astype(np.float64)
    terms = (t * p).sum(1) / (t.sum(1) + p.sum(1) + eps)
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(-(w * terms).sum())


def dice_loss_grad(target: np.ndarray, pred: np.ndarray, weights=None, eps: float = EPS) -> np.ndarray:
    """Closed-form d(loss)/d(pred) for a single (C, ...) sample.

    With N = sum(Y*P) and D = sum(Y) + sum(P) + eps per channel,
    d/dP (N/D) = (Y*D - N) / D**2.
    """
    c = target.shape[0]
    t = target.reshape(c, -1).astype(np.float64)
    p = pred.reshape(c, -1).astype(np.float64)
    num = (t * p).sum(1, keepdims=True)
    den = t.sum(1, keepdims=True) + p.sum(1, keepdims=True) + eps
    w = np.ones((c, 1)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(c, 1)
    grad = -w * (t * den - num) / den**2
    return grad.reshape(target.shape)
