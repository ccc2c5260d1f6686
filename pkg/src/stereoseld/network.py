"""Full network: convolutional encoder, selective-scan decoder stack,
temporal alignment, and the multi-track localization head.

Two configurations ship: ``full`` mirrors the published complexity budget
(forward-only by default) and ``tiny`` trains in minutes on a CPU.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .blocks import BiMambaConvBlock, BlockConfig
from .errors import InputError
from .frontend import FEATURE_CHANNELS, N_MELS, StereoClip, extract_features

INTERP_PER_LABEL_FRAME = 5


@dataclass
class ModelConfig:
    variant: str = "tiny"
    n_classes: int = 13
    n_tracks: int = 3
    label_frames: int = 50
    in_channels: int = FEATURE_CHANNELS
    n_mels: int = N_MELS
    encoder_channels: tuple[int, ...] = (16, 32, 64, 64, 64, 64)
    time_pool: tuple[int, ...] = (2, 2, 2, 2, 1, 1)
    freq_pool: tuple[int, ...] = (2, 2, 2, 2, 4, 1)
    d_model: int = 64
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    n_blocks: int = 2
    bidirectional: bool = True
    chunk_len: int = 64

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        return replace(cls(), **overrides)

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        base = cls(
            variant="full",
            encoder_channels=(64, 128, 256, 512, 1024, 2048),
            d_model=128,
            d_state=64,
        )
        return replace(base, **overrides)

    def block_config(self) -> BlockConfig:
        return BlockConfig(
            d_model=self.d_model, d_state=self.d_state, d_conv=self.d_conv,
            expand=self.expand, n_blocks=self.n_blocks,
            bidirectional=self.bidirectional, chunk_len=self.chunk_len,
        )


_CONFIG_INT_TUPLES = ("encoder_channels", "time_pool", "freq_pool")
_CONFIG_INTS = (
    "n_classes", "n_tracks", "label_frames", "in_channels", "n_mels",
    "d_model", "d_state", "d_conv", "expand", "n_blocks", "chunk_len",
)


def config_to_text(config: ModelConfig) -> str:
    lines = []
    for key in (
        "variant", "n_classes", "n_tracks", "label_frames", "in_channels",
        "n_mels", "encoder_channels", "time_pool", "freq_pool", "d_model",
        "d_state", "d_conv", "expand", "n_blocks", "bidirectional", "chunk_len",
    ):
        value = getattr(config, key)
        if key in _CONFIG_INT_TUPLES:
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in _CONFIG_INT_TUPLES:
            kwargs[key] = tuple(int(v) for v in value.split(","))
        elif key in _CONFIG_INTS:
            kwargs[key] = int(value)
        elif key == "bidirectional":
            kwargs[key] = value.lower() in ("true", "1", "yes")
        elif key == "variant":
            kwargs[key] = value
        else:
            raise InputError(f"config line {lineno}: unknown key {key!r}")
    return ModelConfig(**kwargs)


class ConvEncoder(nn.Module):
    """Six VGG-style stages: (3x3 conv, BN, ReLU) x2 then max-pool."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        stages = []
        c_in = config.in_channels
        for c_out, pool_t, pool_f in zip(
            config.encoder_channels, config.time_pool, config.freq_pool
        ):
            layers: list[nn.Module] = [
                nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
                nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
            ]
            if (pool_t, pool_f) != (1, 1):
                layers.append(nn.MaxPool2d((pool_t, pool_f), ceil_mode=True))
            stages.append(nn.Sequential(*layers))
            c_in = c_out
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.stages:
            x = stage(x)
        return x


def temporal_align(x: torch.Tensor, label_frames: int) -> torch.Tensor:
    """[B][T'][d] -> [B][label_frames][d]: linear interpolation up to
    label_frames * 5 then mean over consecutive groups of 5."""
    if x.shape[1] < 2:
        raise InputError(f"temporal alignment needs T' >= 2, got {x.shape[1]}")
    target = label_frames * INTERP_PER_LABEL_FRAME
    y = F.interpolate(
        x.transpose(1, 2), size=target, mode="linear", align_corners=True
    ).transpose(1, 2)
    batch, _, d = y.shape
    return y.reshape(batch, label_frames, INTERP_PER_LABEL_FRAME, d).mean(dim=2)


class SeldHead(nn.Module):
    """Two dense layers mapping decoder features to the output tensor;
    tanh bounds the DOA components, ReLU keeps distance non-negative."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_tracks = config.n_tracks
        self.n_classes = config.n_classes
        self.hidden = nn.Linear(config.d_model, config.d_model)
        self.out = nn.Linear(config.d_model, config.n_tracks * config.n_classes * 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, frames, _ = x.shape
        raw = self.out(F.silu(self.hidden(x)))
        raw = raw.reshape(batch, frames, self.n_tracks, self.n_classes, 3)
        return torch.cat(
            [torch.tanh(raw[..., :2]), F.relu(raw[..., 2:])], dim=-1
        )


class SeldModel(nn.Module):
    """features [B][7][T][64] -> predictions [B][50][tracks][classes][3]."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = ConvEncoder(config)
        self.proj = nn.Linear(config.encoder_channels[-1], config.d_model)
        block_cfg = config.block_config()
        self.blocks = nn.ModuleList(
            BiMambaConvBlock(block_cfg) for _ in range(config.n_blocks)
        )
        self.head = SeldHead(config)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 4 or features.shape[1] != self.config.in_channels:
            raise InputError(
                f"expected [B][{self.config.in_channels}][T][F], got {tuple(features.shape)}"
            )
        z = self.encoder(features)
        z = z.mean(dim=3)
        z = self.proj(z.transpose(1, 2))
        z = z[:, :, None, :]
        for block in self.blocks:
            z = block(z)
        z = temporal_align(z[:, :, 0, :], self.config.label_frames)
        return self.head(z)

    @torch.no_grad()
    def forward_clip(self, clip: StereoClip) -> np.ndarray:
        """Single-clip convenience: extract features, run, return numpy."""
        features = extract_features(clip)
        batch = torch.from_numpy(features.data[None]).to(
            next(self.parameters()).dtype
        )
        return self.forward(batch)[0].cpu().numpy()


def build_model(config: ModelConfig, seed: int = 0) -> SeldModel:
    """Deterministic construction: identical (config, seed) gives identical
    initial weights."""
    torch.manual_seed(seed)
    return SeldModel(config)


def _pooled_sizes(config: ModelConfig, frames: int, mels: int):
    """(T, F) seen by each encoder stage's convolutions, plus the final size."""
    sizes = []
    t, f = frames, mels
    for pool_t, pool_f in zip(config.time_pool, config.freq_pool):
        sizes.append((t, f))
        t = -(-t // pool_t)
        f = -(-f // pool_f)
    return sizes, (t, f)


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count; tests pin it to the torch modules."""
    total = 0
    c_in = config.in_channels
    for c_out in config.encoder_channels:
        total += 9 * c_in * c_out + 2 * c_out  # conv1 (no bias) + BN affine
        total += 9 * c_out * c_out + 2 * c_out
        c_in = c_out
    d, di, ds = config.d_model, config.expand * config.d_model, config.d_state
    total += config.encoder_channels[-1] * d + d  # projection into the decoder
    branch = (
        d * 2 * di  # in_proj
        + di * config.d_conv + di  # depthwise conv
        + di * di + di  # dt projection
        + 2 * di * ds  # b and c projections
        + di * ds  # a_log
        + di  # skip gain
        + di * d  # out_proj
    )
    n_branches = 2 if config.bidirectional else 1
    per_block = (
        2 * (3 * d + d) + 2 * 2 * d  # asymmetric conv weights+bias, BN affine
        + 2 * d  # bimamba layer norm
        + n_branches * branch
        + 2 * d  # ffn layer norm
        + d * 4 * d + 4 * d + 4 * d * d + d  # ffn linears
    )
    total += config.n_blocks * per_block
    out_width = config.n_tracks * config.n_classes * 3
    total += d * d + d + d * out_width + out_width  # head
    return total


def conv2d_macs(kernel: int, c_in: int, c_out: int, height: int, width: int) -> int:
    """Dense same-padding 2D conv: kernel^2 * Cin multiplies per output cell."""
    return kernel * kernel * c_in * c_out * height * width


def depthwise_1d_macs(kernel: int, channels: int, positions: int) -> int:
    """Depthwise 1D conv: kernel multiplies per channel per position."""
    return kernel * channels * positions


def count_macs(config: ModelConfig, frames: int = 251, mels: int = N_MELS) -> int:
    """Multiply-accumulates for one clip: convs cost k*k*Cin*Cout*H*W
    (depthwise: k*C*H*W), linears in*out per position, scans 6*N+1 per
    channel per step."""
    total = 0
    sizes, (t_out, f_out) = _pooled_sizes(config, frames, mels)
    c_in = config.in_channels
    for c_out, (t, f) in zip(config.encoder_channels, sizes):
        total += conv2d_macs(3, c_in, c_out, t, f)
        total += conv2d_macs(3, c_out, c_out, t, f)
        c_in = c_out
    d, di, ds = config.d_model, config.expand * config.d_model, config.d_state
    t_dec, f_dec = t_out, 1  # frequency mean precedes the decoder
    total += t_dec * config.encoder_channels[-1] * d
    branch = t_dec * (
        d * 2 * di
        + di * config.d_conv
        + di * di
        + 2 * di * ds
        + di * (6 * ds + 1)  # scan steps
        + di  # gating multiply
        + di * d
    )
    n_branches = 2 if config.bidirectional else 1
    per_block = (
        2 * depthwise_1d_macs(3, d, t_dec * f_dec)  # asymmetric conv pathways
        + n_branches * branch
        + t_dec * f_dec * 2 * d * 4 * d  # ffn
    )
    total += config.n_blocks * per_block
    interp = config.label_frames * INTERP_PER_LABEL_FRAME
    total += 2 * interp * d + config.label_frames * d  # interpolation + mean
    out_width = config.n_tracks * config.n_classes * 3
    total += config.label_frames * (d * d + d * out_width)
    return total


def count_params_and_macs(config: ModelConfig, frames: int = 251) -> dict[str, int]:
    return {"params": count_params(config), "macs": count_macs(config, frames=frames)}


def save_model(path: str, model: SeldModel) -> None:
    """Checkpoint tensors plus a key=value config sidecar at path + '.cfg'."""
    tensors = {
        name: value.detach().cpu().numpy().astype(np.float32)
        for name, value in model.state_dict().items()
    }
    checkpoint.save_tensors(path, tensors)
    with open(path + ".cfg", "w") as fh:
        fh.write(config_to_text(model.config))


def load_model(path: str) -> SeldModel:
    with open(path + ".cfg") as fh:
        config = config_from_text(fh.read())
    model = SeldModel(config)
    tensors = checkpoint.load_tensors(path)
    state = model.state_dict()
    if set(tensors) != set(state):
        missing = set(state) - set(tensors)
        extra = set(tensors) - set(state)
        raise InputError(
            f"{path}: checkpoint/config mismatch (missing {sorted(missing)[:3]}, "
            f"extra {sorted(extra)[:3]})"
        )
    converted = {
        name: torch.from_numpy(tensors[name]).to(state[name].dtype)
        for name in tensors
    }
    model.load_state_dict(converted)
    return model
