"""Decoder building blocks: bidirectional selective-scan mixing and
asymmetric time/frequency convolutions.

The temporal mixer follows the usual selective-SSM recipe: project up,
depthwise causal conv, SiLU, input-dependent (delta, b, c), scan via the
NumPy kernel bridge, gate, project down.  Bidirectionality runs a second
independently-weighted mixer on the time-reversed sequence and sums the two
branch outputs inside one pre-normalized residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .bridge import selective_scan


@dataclass
class BlockConfig:
    d_model: int
    d_state: int = 64
    d_conv: int = 4
    expand: int = 2
    n_blocks: int = 2
    bidirectional: bool = True
    chunk_len: int = 64

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


class SelectiveMixer(nn.Module):
    """One scan direction: the input-dependent SSM over time."""

    def __init__(self, config: BlockConfig):
        super().__init__()
        self.config = config
        d_model, d_inner, d_state = config.d_model, config.d_inner, config.d_state
        self.in_proj = nn.Linear(d_model, 2 * d_inner, bias=False)
        self.conv = nn.Conv1d(
            d_inner, d_inner, config.d_conv, groups=d_inner,
            padding=config.d_conv - 1, bias=True,
        )
        self.dt_proj = nn.Linear(d_inner, d_inner, bias=True)
        self.b_proj = nn.Linear(d_inner, d_state, bias=False)
        self.c_proj = nn.Linear(d_inner, d_state, bias=False)
        self.a_log = nn.Parameter(torch.empty(d_inner, d_state))
        self.d_skip = nn.Parameter(torch.ones(d_inner))
        self.out_proj = nn.Linear(d_inner, d_model, bias=False)
        self._init_state_params()

    def _init_state_params(self) -> None:
        # a = -(1..N) per lane; delta bias placed so softplus(bias) is
        # log-uniform in [1e-3, 1e-1], keeping fresh scans stable
        with torch.no_grad():
            aranged = torch.arange(1, self.config.d_state + 1, dtype=torch.float32)
            self.a_log.copy_(torch.log(aranged).expand(self.config.d_inner, -1))
            dt = torch.exp(
                torch.rand(self.config.d_inner)
                * (math.log(1e-1) - math.log(1e-3))
                + math.log(1e-3)
            )
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        length = x.shape[1]
        u, gate = self.in_proj(x).chunk(2, dim=-1)
        u = self.conv(u.transpose(1, 2))[..., :length].transpose(1, 2)
        u = F.silu(u)
        delta = F.softplus(self.dt_proj(u))
        a = -torch.exp(self.a_log)
        y = selective_scan(
            u, delta, a, self.b_proj(u), self.c_proj(u), self.d_skip,
            chunk_len=self.config.chunk_len,
        )
        return self.out_proj(y * F.silu(gate))


class BiMamba(nn.Module):
    """Pre-normalized residual pair of forward- and reverse-time mixers."""

    def __init__(self, config: BlockConfig):
        super().__init__()
        self.norm = nn.LayerNorm(config.d_model)
        self.fwd = SelectiveMixer(config)
        self.bwd = SelectiveMixer(config) if config.bidirectional else None

    def branch(self, x: torch.Tensor, direction: str) -> torch.Tensor:
        """Apply one mixer; the backward direction scans reversed time."""
        if direction == "forward":
            return self.fwd(x)
        if direction == "backward":
            if self.bwd is None:
                raise ValueError("backward branch disabled in this configuration")
            return self.bwd(x.flip(1)).flip(1)
        raise ValueError(f"unknown direction {direction!r}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(x)
        out = self.fwd(h)
        if self.bwd is not None:
            out = out + self.bwd(h.flip(1)).flip(1)
        return x + out


def _pad_1d(x: torch.Tensor, pad: int) -> torch.Tensor:
    # reflect padding needs length > pad; degenerate axes fall back to edge
    # replication so constant sequences stay constant either way
    mode = "reflect" if x.shape[-1] > pad else "replicate"
    return F.pad(x, (pad, pad), mode=mode)


class AsymmetricConv(nn.Module):
    """Depthwise 1D convolutions along time and frequency, fused additively.

    y = x + A(x) + B(x) where pathway A convolves each frequency row over
    time and pathway B convolves each frame over frequency; each pathway is
    conv -> batch norm -> SiLU.  ``use_norm_act=False`` strips the norm and
    activation, leaving the raw convolutions.
    """

    def __init__(self, d: int, k_t: int = 3, k_f: int = 3, use_norm_act: bool = True):
        super().__init__()
        if k_t % 2 == 0 or k_f % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        self.k_t, self.k_f = k_t, k_f
        self.use_norm_act = use_norm_act
        self.conv_t = nn.Conv1d(d, d, k_t, groups=d, bias=True)
        self.conv_f = nn.Conv1d(d, d, k_f, groups=d, bias=True)
        self.bn_t = nn.BatchNorm1d(d)
        self.bn_f = nn.BatchNorm1d(d)

    def _pathway(self, x: torch.Tensor, conv: nn.Conv1d, bn: nn.BatchNorm1d, k: int) -> torch.Tensor:
        out = conv(_pad_1d(x, k // 2))
        if self.use_norm_act:
            out = F.silu(bn(out))
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, n_t, n_f, d = x.shape
        xt = x.permute(0, 2, 3, 1).reshape(batch * n_f, d, n_t)
        at = self._pathway(xt, self.conv_t, self.bn_t, self.k_t)
        at = at.reshape(batch, n_f, d, n_t).permute(0, 3, 1, 2)
        xf = x.permute(0, 1, 3, 2).reshape(batch * n_t, d, n_f)
        af = self._pathway(xf, self.conv_f, self.bn_f, self.k_f)
        af = af.reshape(batch, n_t, d, n_f).permute(0, 1, 3, 2)
        return x + at + af


class FeedForward(nn.Module):
    """Pre-normalized position-wise MLP, expansion 4, SiLU."""

    def __init__(self, d: int, expansion: int = 4):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.up = nn.Linear(d, expansion * d)
        self.down = nn.Linear(expansion * d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(F.silu(self.up(self.norm(x))))


class BiMambaConvBlock(nn.Module):
    """One decoder block over a [batch][time][freq][d] map.

    Asymmetric conv first; the frequency axis is then mean-pooled into the
    channel stream for the bidirectional temporal mixing (whose update is
    broadcast back across frequency); a feed-forward residual closes the
    block.  Shape in == shape out.
    """

    def __init__(self, config: BlockConfig):
        super().__init__()
        self.asym = AsymmetricConv(config.d_model)
        self.temporal = BiMamba(config)
        self.ffn = FeedForward(config.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.asym(x)
        pooled = x.mean(dim=2)
        mixed = self.temporal(pooled)
        x = x + (mixed - pooled)[:, :, None, :]
        return x + self.ffn(x)
