"""Track-permutation-invariant regression loss for multi-track targets.

Per (frame, class) cell the loss is the minimum over all 6 permutations of
the 3 prediction tracks of the mean squared error across the 3 tracks and
the 3 components (x, y, distance * lambda_dist); the total is the mean over
frames and classes.  Ties between permutations break toward the lowest
permutation index so the backward pass is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from numpy.typing import NDArray

from .errors import InputError

TRACK_PERMUTATIONS = tuple(permutations(range(3)))
LAMBDA_DIST = 1.0


@dataclass
class LossBreakdown:
    total: float
    per_frame: NDArray[np.floating]  # [frames]
    chosen_permutation: NDArray[np.intp]  # [frames][classes], index into TRACK_PERMUTATIONS


def _component_scale(dtype, lambda_dist: float) -> NDArray:
    return np.array([1.0, 1.0, lambda_dist], dtype=dtype)


def _permutation_costs(
    pred: NDArray[np.floating],
    target: NDArray[np.floating],
    lambda_dist: float,
) -> NDArray[np.floating]:
    """[n_perms][frames][classes] mean squared error per permutation."""
    scale = _component_scale(pred.dtype, lambda_dist)
    costs = np.empty((len(TRACK_PERMUTATIONS),) + pred.shape[:1] + pred.shape[2:3], dtype=pred.dtype)
    for p, perm in enumerate(TRACK_PERMUTATIONS):
        diff = (pred[:, perm] - target) * scale
        costs[p] = (diff * diff).mean(axis=(1, 3))
    return costs


def pit_loss(
    pred: NDArray[np.floating],
    target: NDArray[np.floating],
    lambda_dist: float = LAMBDA_DIST,
) -> LossBreakdown:
    """Permutation-invariant MSE over [frames][3][classes][3] tensors."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise InputError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if pred.ndim != 4 or pred.shape[1] != 3 or pred.shape[3] != 3:
        raise InputError(f"expected [frames][3][classes][3], got {pred.shape}")
    costs = _permutation_costs(pred, target, lambda_dist)
    chosen = np.argmin(costs, axis=0)
    per_cell = np.min(costs, axis=0)
    per_frame = per_cell.mean(axis=1)
    return LossBreakdown(
        total=float(per_frame.mean()),
        per_frame=per_frame,
        chosen_permutation=chosen,
    )


def pit_loss_backward(
    pred: NDArray[np.floating],
    target: NDArray[np.floating],
    chosen_permutation: NDArray[np.intp],
    lambda_dist: float = LAMBDA_DIST,
    grad_scale: float = 1.0,
) -> NDArray[np.floating]:
    """Gradient of the total w.r.t. pred under the fixed argmin permutations.

    Each element of the chosen-permutation cell contributes
    2 * scale_k^2 * (pred - target) / (9 * frames * classes); at permutation
    ties this is the subgradient along the chosen index.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    n_frames, _, n_classes, _ = pred.shape
    scale_sq = _component_scale(pred.dtype, lambda_dist) ** 2
    denom = 9.0 * n_frames * n_classes
    grad = np.zeros_like(pred)
    for p, perm in enumerate(TRACK_PERMUTATIONS):
        mask = (chosen_permutation == p)[:, None, :, None]
        cell = 2.0 * (pred[:, perm] - target) * scale_sq / denom
        grad[:, perm] += np.where(mask, cell, 0.0)
    return grad * grad_scale
