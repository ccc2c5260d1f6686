"""Audio front end: stereo input to stacked spectral features.

Stages, in pipeline order:

1. ``resample``             polyphase windowed-sinc rate conversion
2. ``stereo_to_pseudo_foa`` mid/side projection onto FOA channels
3. ``stft``                 Hann-windowed short-time Fourier transform
4. ``log_mel``              mel-band log power
5. ``intensity_vectors``    normalized acoustic intensity per mel band
6. ``extract_features``     stages 1-5 fused into one [7][T][F] tensor

Everything here is NumPy float math with no hidden state; identical inputs
give bitwise-identical outputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import gcd

import numpy as np
from numpy.typing import NDArray

from .errors import InputError, NumericalError

TARGET_RATE_HZ = 24000
WINDOW_SAMPLES = 960
HOP_SAMPLES = 480
N_MELS = 64
MEL_FMIN_HZ = 50.0
MEL_FMAX_HZ = 12000.0
POWER_FLOOR = 1e-10
INTENSITY_EPS = 1e-10
FEATURE_CHANNELS = 7

_SINC_HALF_TAPS = 32
_KAISER_BETA = 8.0

FEATURE_MAGIC = b"SELDFEAT"
FEATURE_VERSION = 1


@dataclass
class StereoClip:
    """Two-channel audio buffer at a known sample rate."""

    left: NDArray[np.floating]
    right: NDArray[np.floating]
    sample_rate: int

    def __post_init__(self) -> None:
        self.left = np.asarray(self.left)
        self.right = np.asarray(self.right)
        if self.left.ndim != 1 or self.right.ndim != 1:
            raise InputError("channels must be 1-D arrays")
        if self.left.shape[0] != self.right.shape[0]:
            raise InputError(
                f"channel lengths differ: {self.left.shape[0]} vs {self.right.shape[0]}"
            )
        if self.left.shape[0] == 0:
            raise InputError("empty audio buffer")
        if self.sample_rate <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def n_samples(self) -> int:
        return self.left.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass
class PseudoFoaClip:
    """First-order ambisonic projection of a stereo clip.

    W carries the mid signal, Y the side signal; X and Z are identically
    zero because a two-capsule desk array spans only the left/right axis.
    """

    w: NDArray[np.floating]
    y: NDArray[np.floating]
    x: NDArray[np.floating]
    z: NDArray[np.floating]
    sample_rate: int


@dataclass
class FeatureTensor:
    """Stacked front-end output: 4 log-mel channels then 3 intensity channels."""

    data: NDArray[np.float32]  # [channels][frames][mels]
    sample_rate: int
    hop_samples: int

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise InputError(f"feature tensor must be 3-D, got {self.data.ndim}-D")

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


def _sinc_kernel_weights(up: int, down: int) -> NDArray[np.float64]:
    """Per-phase filter taps for rational resampling by up/down.

    Returns [up][2 * _SINC_HALF_TAPS] weights.  Each row is a Kaiser-windowed
    sinc low-pass sampled at that output phase, normalized to unit sum so a
    constant input maps to the same constant.
    """
    half = _SINC_HALF_TAPS
    cutoff = min(1.0, up / down)
    phases = (np.arange(up) * down) % up / up  # fractional source position
    # tap k sits at source offset (k - half + 1) - frac relative to the
    # output sample's ideal position
    offsets = np.arange(2 * half) - (half - 1)
    u = offsets[None, :] - phases[:, None]
    x = u / half
    window = np.where(np.abs(x) <= 1.0, np.i0(_KAISER_BETA * np.sqrt(np.maximum(0.0, 1.0 - x * x))), 0.0)
    window = window / np.i0(_KAISER_BETA)
    taps = cutoff * np.sinc(cutoff * u) * window
    taps /= taps.sum(axis=1, keepdims=True)
    return taps


def _resample_channel(x: NDArray[np.floating], src_hz: int, dst_hz: int) -> NDArray[np.float64]:
    x = np.asarray(x, dtype=np.float64)
    if src_hz == dst_hz:
        return x.copy()
    g = gcd(src_hz, dst_hz)
    up, down = dst_hz // g, src_hz // g
    n_out = int(round(x.shape[0] * dst_hz / src_hz))
    if n_out == 0:
        raise InputError("input too short to resample at this rate")
    taps = _sinc_kernel_weights(up, down)
    half = _SINC_HALF_TAPS
    n = np.arange(n_out)
    base = (n * down) // up  # integer source index at or before each output
    phase = n % up
    # gather windows from an edge-replicated view (constant signals stay
    # constant all the way to the boundary); tap k reads base + k - half + 1
    pad_left = half - 1
    pad_right = half + 1
    padded = np.concatenate(
        [np.full(pad_left, x[0]), x, np.full(pad_right, x[-1])]
    )
    out = np.empty(n_out, dtype=np.float64)
    block = 1 << 14
    for start in range(0, n_out, block):
        stop = min(start + block, n_out)
        idx = base[start:stop, None] + np.arange(2 * half)[None, :]
        out[start:stop] = np.einsum(
            "nk,nk->n", padded[idx], taps[phase[start:stop]]
        )
    return out


def resample(clip: StereoClip, target_hz: int = TARGET_RATE_HZ) -> StereoClip:
    """Convert a clip to ``target_hz`` with a 64-tap Kaiser-windowed sinc.

    Duration is preserved to within one output sample.  Raises
    :class:`InputError` for source rates below 8 kHz, where the desk-audio
    assumption of usable bandwidth no longer holds.
    """
    if clip.sample_rate < 8000:
        raise InputError(f"source rate {clip.sample_rate} Hz below 8 kHz minimum")
    if target_hz <= 0:
        raise InputError(f"target rate must be positive, got {target_hz}")
    if clip.sample_rate == target_hz:
        return StereoClip(clip.left.copy(), clip.right.copy(), target_hz)
    return StereoClip(
        _resample_channel(clip.left, clip.sample_rate, target_hz),
        _resample_channel(clip.right, clip.sample_rate, target_hz),
        target_hz,
    )


def stereo_to_pseudo_foa(clip: StereoClip) -> PseudoFoaClip:
    """Project stereo onto FOA channels: W = (L+R)/2, Y = (L-R)/2, X = Z = 0.

    The projection is exactly invertible sample-by-sample (L = W + Y,
    R = W - Y); for any PCM- or float32-valued buffer the round trip is
    bitwise exact in float64.
    """
    left = np.asarray(clip.left, dtype=np.float64)
    right = np.asarray(clip.right, dtype=np.float64)
    w = (left + right) / 2.0
    y = (left - right) / 2.0
    zeros = np.zeros_like(w)
    return PseudoFoaClip(w=w, y=y, x=zeros, z=zeros.copy(), sample_rate=clip.sample_rate)


def hann_window(n: int) -> NDArray[np.float64]:
    """Periodic Hann window of length ``n``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(
    signal: NDArray[np.floating],
    window_samples: int = WINDOW_SAMPLES,
    hop_samples: int = HOP_SAMPLES,
) -> NDArray[np.complex128]:
    """Hann-windowed STFT with centered frames.

    The signal is padded by half a window on both ends (reflection), so
    frame t is centered on sample t * hop and a 5 s clip at 24 kHz yields
    251 frames.  Returns [frames][window_samples // 2 + 1] complex bins.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] == 0:
        raise InputError("stft input must be a non-empty 1-D array")
    pad = window_samples // 2
    mode = "reflect" if x.shape[0] > 1 else "edge"
    padded = np.pad(x, pad, mode=mode)
    n_frames = (padded.shape[0] - window_samples) // hop_samples + 1
    if n_frames < 1:
        raise InputError("signal shorter than one analysis window")
    starts = np.arange(n_frames) * hop_samples
    frames = padded[starts[:, None] + np.arange(window_samples)[None, :]]
    frames = frames * hann_window(window_samples)[None, :]
    return np.fft.rfft(frames, axis=1)


def hz_to_mel(f: NDArray[np.floating] | float) -> NDArray[np.float64]:
    """HTK mel scale: mel = 2595 log10(1 + f / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: NDArray[np.floating] | float) -> NDArray[np.float64]:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = WINDOW_SAMPLES,
    sample_rate: int = TARGET_RATE_HZ,
    fmin_hz: float = MEL_FMIN_HZ,
    fmax_hz: float = MEL_FMAX_HZ,
) -> NDArray[np.float64]:
    """Triangular mel filters on the HTK scale, [n_mels][n_fft // 2 + 1].

    Each filter rises linearly in hertz from edge i to peak i+1 and falls to
    edge i+2, with edges equally spaced in mel between fmin and fmax.
    """
    if not 0 < fmin_hz < fmax_hz <= sample_rate / 2:
        raise InputError("mel band edges must satisfy 0 < fmin < fmax <= Nyquist")
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    lower = edges_hz[:-2][:, None]
    center = edges_hz[1:-1][:, None]
    upper = edges_hz[2:][:, None]
    rising = (bin_hz[None, :] - lower) / (center - lower)
    falling = (upper - bin_hz[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(
    spectrum: NDArray[np.complexfloating],
    filterbank: NDArray[np.floating] | None = None,
) -> NDArray[np.float64]:
    """Mel-band log power, 10 log10(power) with a 1e-10 floor (min -100 dB)."""
    if filterbank is None:
        filterbank = mel_filterbank()
    power = spectrum.real**2 + spectrum.imag**2
    banded = power @ filterbank.T
    return 10.0 * np.log10(np.maximum(banded, POWER_FLOOR))


def intensity_vectors(
    spec_w: NDArray[np.complexfloating],
    spec_x: NDArray[np.complexfloating],
    spec_y: NDArray[np.complexfloating],
    spec_z: NDArray[np.complexfloating],
    filterbank: NDArray[np.floating] | None = None,
) -> NDArray[np.float64]:
    """Normalized acoustic intensity per mel band, [3][frames][n_mels].

    Per STFT bin the intensity along axis c is
    Re{conj(W) S_c} / (|W|^2 + (|X|^2 + |Y|^2 + |Z|^2) / 3 + 1e-10),
    then averaged over each mel band with the band's own triangular weights.
    The normalization bounds each component to roughly [-1, 1] regardless of
    signal level.
    """
    if filterbank is None:
        filterbank = mel_filterbank()
    denom = (
        spec_w.real**2
        + spec_w.imag**2
        + (
            spec_x.real**2
            + spec_x.imag**2
            + spec_y.real**2
            + spec_y.imag**2
            + spec_z.real**2
            + spec_z.imag**2
        )
        / 3.0
        + INTENSITY_EPS
    )
    band_norm = filterbank.sum(axis=1)
    out = np.empty((3, spec_w.shape[0], filterbank.shape[0]), dtype=np.float64)
    for i, spec_c in enumerate((spec_x, spec_y, spec_z)):
        ratio = (spec_w.real * spec_c.real + spec_w.imag * spec_c.imag) / denom
        out[i] = (ratio @ filterbank.T) / band_norm[None, :]
    return out


def extract_features(clip: StereoClip) -> FeatureTensor:
    """Full front end: resample, project, and stack log-mel plus intensity.

    Output is [7][frames][64] float32: channels 0-3 are log-mel power of
    (W, Y, X, Z) and channels 4-6 are intensity along (X, Y, Z).
    """
    if clip.sample_rate != TARGET_RATE_HZ:
        clip = resample(clip, TARGET_RATE_HZ)
    foa = stereo_to_pseudo_foa(clip)
    bank = mel_filterbank()
    specs = [stft(ch) for ch in (foa.w, foa.y, foa.x, foa.z)]
    mels = np.stack([log_mel(s, bank) for s in specs])
    intensity = intensity_vectors(specs[0], specs[2], specs[1], specs[3], bank)
    data = np.concatenate([mels, intensity]).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise NumericalError("non-finite values in feature tensor")
    return FeatureTensor(data=data, sample_rate=clip.sample_rate, hop_samples=HOP_SAMPLES)


def write_feature_file(path: str, features: FeatureTensor) -> None:
    """Serialize a feature tensor: magic, version, dims, float32 LE payload."""
    data = np.ascontiguousarray(features.data, dtype="<f4")
    channels, frames, mels = data.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<4I", FEATURE_VERSION, channels, frames, mels))
        fh.write(data.tobytes())


def read_feature_file(path: str) -> FeatureTensor:
    """Read a feature tensor written by :func:`write_feature_file`."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != FEATURE_MAGIC:
            raise InputError(f"{path}: not a feature file (bad magic {magic!r})")
        header = fh.read(16)
        if len(header) != 16:
            raise InputError(f"{path}: truncated feature header")
        version, channels, frames, mels = struct.unpack("<4I", header)
        if version != FEATURE_VERSION:
            raise InputError(f"{path}: unsupported feature version {version}")
        payload = fh.read(channels * frames * mels * 4)
        if len(payload) != channels * frames * mels * 4:
            raise InputError(f"{path}: truncated feature payload")
        data = np.frombuffer(payload, dtype="<f4").reshape(channels, frames, mels)
    return FeatureTensor(
        data=data.copy(), sample_rate=TARGET_RATE_HZ, hop_samples=HOP_SAMPLES
    )
