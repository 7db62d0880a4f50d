"""Segmentation metrics: overlap score and normalized surface agreement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class MetricResult:
    dice: float
    nsd: float
    per_sample: list[tuple[float, float]]


def _as_bool_mask(t: Tensor, name: str) -> np.ndarray:
    arr = t.data
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return arr.astype(bool)


def dice_score(pred: Tensor, gt: Tensor) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty."""
    if pred.dims != gt.dims:
        raise ShapeError(f"shape mismatch: {pred.dims} vs {gt.dims}")
    p = _as_bool_mask(pred, "pred")
    g = _as_bool_mask(gt, "gt")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 4-/6-connected background neighbor.

    Voxels beyond the image border count as background, so foreground
    touching the border is boundary.
    """
    m = mask.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    has_bg = np.zeros_like(m)
    core = tuple(slice(1, 1 + s) for s in m.shape)
    for axis in range(m.ndim):
        for shift in (-1, 1):
            neighbor = np.roll(padded, shift, axis=axis)[core]
            has_bg |= ~neighbor
    return m & has_bg


def _boundary_coords(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(boundary_voxels(mask)).astype(np.float64)


def nsd_score(pred: Tensor, gt: Tensor, tau: float = 1.0) -> float:
    """Fraction of boundary voxels of each mask within tau of the other's.

    Distances are exact Euclidean on the voxel grid.  Both masks empty
    scores 1; exactly one empty scores 0.
    """
    if pred.dims != gt.dims:
        raise ShapeError(f"shape mismatch: {pred.dims} vs {gt.dims}")
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    p = _boundary_coords(_as_bool_mask(pred, "pred"))
    g = _boundary_coords(_as_bool_mask(gt, "gt"))
    if len(p) == 0 and len(g) == 0:
        return 1.0
    if len(p) == 0 or len(g) == 0:
        return 0.0
    # All pairwise squared distances; coordinates are small integers, so the
    # expansion |p|^2 + |g|^2 - 2 p.g is exact in float64.
    d2 = (p * p).sum(axis=1)[:, None] + (g * g).sum(axis=1)[None, :] - 2.0 * (p @ g.T)
    tau2 = tau * tau
    near_p = int((d2.min(axis=1) <= tau2).sum())
    near_g = int((d2.min(axis=0) <= tau2).sum())
    return (near_p + near_g) / (len(p) + len(g))


def evaluate_masks(preds: list[Tensor], gts: list[Tensor], tau: float = 1.0) -> MetricResult:
    """Mean Dice/NSD over a list of mask pairs, with the per-sample breakdown."""
    per = [(dice_score(p, g), nsd_score(p, g, tau)) for p, g in zip(preds, gts)]
    dice = float(np.mean([d for d, _ in per])) if per else 0.0
    nsd = float(np.mean([n for _, n in per])) if per else 0.0
    return MetricResult(dice=dice, nsd=nsd, per_sample=per)
