"""Autograd bridges wiring the NumPy kernels into torch graphs.

Both bridges run the NumPy forward on detached arrays and return the
hand-derived analytic gradients in backward, so the torch model trains
against exactly the kernel math that the oracle tests verify.
"""

from __future__ import annotations

import numpy as np
import torch

from . import loss as loss_np
from . import ssm


class SelectiveScanFn(torch.autograd.Function):
    """Chunked selective scan over a batch.

    Shapes: x, delta [B][L][C]; a [C][N]; b, c [B][L][N] (shared across the
    channel lanes of each batch item); d [C].  Returns y [B][L][C].
    """

    @staticmethod
    def forward(ctx, x, delta, a, b, c, d, chunk_len: int, include_skip: bool):
        batch, length, n_chan = x.shape
        n_state = a.shape[-1]
        xn = _fold_lanes(x)
        dn = _fold_lanes(delta)
        an = np.ascontiguousarray(
            np.tile(_np(a), (batch, 1))
        )
        bn = _fold_proj(b, n_chan)
        cn_ = _fold_proj(c, n_chan)
        dsk = np.tile(_np(d), batch)
        params = ssm.SsmParams(a=an, b=bn, c=cn_, delta=dn, d=dsk)
        result = ssm.scan_chunked(params, xn, chunk_len=chunk_len, include_skip=include_skip)
        ctx.saved = (xn, dn, an, bn, cn_, dsk)
        ctx.meta = (batch, length, n_chan, n_state, include_skip, x.dtype, x.device)
        return torch.from_numpy(
            np.ascontiguousarray(result.y.reshape(length, batch, n_chan).transpose(1, 0, 2))
        ).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_y):
        xn, dn, an, bn, cn_, dsk = ctx.saved
        batch, length, n_chan, n_state, include_skip, dtype, device = ctx.meta
        gy = _fold_lanes(grad_y)
        params = ssm.SsmParams(a=an, b=bn, c=cn_, delta=dn, d=dsk)
        grads = ssm.scan_backward(params, xn, gy, include_skip=include_skip)
        dx = _unfold_lanes(grads.x, batch, length, n_chan)
        ddelta = _unfold_lanes(grads.delta, batch, length, n_chan)
        da = grads.a.reshape(batch, n_chan, n_state).sum(axis=0)
        db = _unfold_proj(grads.b, batch, length, n_chan, n_state)
        dc = _unfold_proj(grads.c, batch, length, n_chan, n_state)
        dd = grads.d.reshape(batch, n_chan).sum(axis=0)

        def wrap(arr):
            return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype=dtype, device=device)

        return (
            wrap(dx), wrap(ddelta), wrap(da), wrap(db), wrap(dc), wrap(dd),
            None, None,
        )


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().contiguous().numpy()


def _fold_lanes(t: torch.Tensor) -> np.ndarray:
    """[B][L][C] -> [L][B*C] lane-major layout the kernel scans over."""
    batch, length, n_chan = t.shape
    return np.ascontiguousarray(_np(t).transpose(1, 0, 2).reshape(length, batch * n_chan))


def _unfold_lanes(arr: np.ndarray, batch: int, length: int, n_chan: int) -> np.ndarray:
    return arr.reshape(length, batch, n_chan).transpose(1, 0, 2)


def _fold_proj(t: torch.Tensor, n_chan: int) -> np.ndarray:
    """[B][L][N] -> [L][B*C][N], replicating across each item's lanes."""
    batch, length, n_state = t.shape
    arr = _np(t)[:, :, None, :]
    arr = np.broadcast_to(arr, (batch, length, n_chan, n_state))
    return np.ascontiguousarray(arr.transpose(1, 0, 2, 3).reshape(length, batch * n_chan, n_state))


def _unfold_proj(arr: np.ndarray, batch: int, length: int, n_chan: int, n_state: int) -> np.ndarray:
    return arr.reshape(length, batch, n_chan, n_state).sum(axis=2).transpose(1, 0, 2)


def selective_scan(
    x: torch.Tensor,
    delta: torch.Tensor,
    a: torch.Tensor,
    b: torch.Tensor,
    c: torch.Tensor,
    d: torch.Tensor,
    chunk_len: int = 64,
    include_skip: bool = True,
) -> torch.Tensor:
    return SelectiveScanFn.apply(x, delta, a, b, c, d, chunk_len, include_skip)


class PitLossFn(torch.autograd.Function):
    """Batched permutation-invariant loss: mean over batch items of the
    per-item total."""

    @staticmethod
    def forward(ctx, pred, target, lambda_dist: float):
        pred_np = _np(pred).astype(np.float64)
        target_np = _np(target).astype(np.float64)
        totals = []
        chosen = []
        for item_pred, item_target in zip(pred_np, target_np):
            breakdown = loss_np.pit_loss(item_pred, item_target, lambda_dist=lambda_dist)
            totals.append(breakdown.total)
            chosen.append(breakdown.chosen_permutation)
        ctx.saved = (pred_np, target_np, chosen, lambda_dist)
        ctx.meta = (pred.dtype, pred.device)
        return torch.tensor(float(np.mean(totals)), dtype=pred.dtype, device=pred.device)

    @staticmethod
    def backward(ctx, grad_out):
        pred_np, target_np, chosen, lambda_dist = ctx.saved
        dtype, device = ctx.meta
        scale = float(grad_out) / pred_np.shape[0]
        grads = np.stack([
            loss_np.pit_loss_backward(p, t, perm, lambda_dist=lambda_dist, grad_scale=scale)
            for p, t, perm in zip(pred_np, target_np, chosen)
        ])
        return torch.from_numpy(grads).to(dtype=dtype, device=device), None, None


def pit_loss(pred: torch.Tensor, target: torch.Tensor, lambda_dist: float = 1.0) -> torch.Tensor:
    """Permutation-invariant loss over [B][frames][3][classes][3] tensors."""
    return PitLossFn.apply(pred, target, lambda_dist)
