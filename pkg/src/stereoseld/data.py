"""Dataset plumbing: WAV ingestion, 5-second segmentation, channel-swap
augmentation, and deterministic synthetic clips for desk-scale training.

Synthetic clips place 1-3 tone bursts at random azimuths using a
constant-power pan law between L and R, with loudness inversely
proportional to the labeled distance so distance is learnable from level.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .codec import Event, sort_events
from .errors import InputError
from .frontend import TARGET_RATE_HZ, StereoClip, resample

log = logging.getLogger(__name__)

SEGMENT_S = 5.0
FRAMES_PER_SEGMENT = 50
FRAME_HOP_S = 0.1

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass
class ClipRecord:
    """One 5-second training/eval unit: audio plus frame-indexed labels."""

    audio: StereoClip
    labels: list[Event]
    source_id: str


def _decode_samples(payload: bytes, fmt: int, bits: int) -> NDArray[np.float64]:
    if fmt == _WAVE_FORMAT_PCM and bits == 16:
        return np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    if fmt == _WAVE_FORMAT_PCM and bits == 24:
        raw = np.frombuffer(payload, dtype=np.uint8)
        raw = raw[: len(raw) - len(raw) % 3].reshape(-1, 3).astype(np.int32)
        val = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        val = np.where(val >= 1 << 23, val - (1 << 24), val)
        return val.astype(np.float64) / float(1 << 23)
    if fmt == _WAVE_FORMAT_FLOAT and bits == 32:
        return np.frombuffer(payload, dtype="<f4").astype(np.float64)
    raise InputError(f"unsupported codec: format {fmt}, {bits}-bit")


def load_wav(path: str, target_hz: int = TARGET_RATE_HZ) -> StereoClip:
    """Read a PCM or float WAV into a stereo clip at ``target_hz``.

    16/24-bit integer samples normalize by 2^(bits-1); mono files duplicate
    into both channels with a warning.  Malformed structure raises
    :class:`InputError`.
    """
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) != 12 or header[:4] != b"RIFF" or header[8:] != b"WAVE":
            raise InputError(f"{path}: not a RIFF/WAVE file")
        fmt = None
        data = None
        while True:
            chunk = fh.read(8)
            if len(chunk) < 8:
                break
            cid, size = chunk[:4], struct.unpack("<I", chunk[4:])[0]
            payload = fh.read(size)
            if len(payload) != size:
                raise InputError(f"{path}: truncated {cid!r} chunk")
            if size % 2:
                fh.read(1)
            if cid == b"fmt ":
                if size < 16:
                    raise InputError(f"{path}: fmt chunk too short")
                fmt = struct.unpack("<HHIIHH", payload[:16])
                if fmt[0] == _WAVE_FORMAT_EXTENSIBLE:
                    if size < 40:
                        raise InputError(f"{path}: extensible fmt chunk too short")
                    sub = struct.unpack("<H", payload[24:26])[0]
                    fmt = (sub,) + fmt[1:]
            elif cid == b"data":
                data = payload
    if fmt is None or data is None:
        raise InputError(f"{path}: missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if channels == 0:
        raise InputError(f"{path}: zero channels")
    if channels > 2:
        raise InputError(f"{path}: {channels} channels unsupported (need 1-2)")
    samples = _decode_samples(data, audio_format, bits)
    frames = samples.shape[0] // channels
    samples = samples[: frames * channels].reshape(frames, channels)
    if channels == 1:
        log.warning("%s: mono input duplicated to stereo", path)
        left = right = samples[:, 0]
    else:
        left, right = samples[:, 0], samples[:, 1]
    clip = StereoClip(left.copy(), right.copy(), rate)
    if rate != target_hz:
        clip = resample(clip, target_hz)
    return clip


def save_wav(path: str, clip: StereoClip, sample_format: str = "float32") -> None:
    """Write a stereo WAV; float32 round-trips samples bitwise."""
    if sample_format == "float32":
        fmt_code, bits = _WAVE_FORMAT_FLOAT, 32
        interleaved = np.empty(clip.n_samples * 2, dtype="<f4")
        interleaved[0::2] = clip.left.astype(np.float32)
        interleaved[1::2] = clip.right.astype(np.float32)
        payload = interleaved.tobytes()
    elif sample_format == "pcm16":
        fmt_code, bits = _WAVE_FORMAT_PCM, 16
        interleaved = np.empty(clip.n_samples * 2, dtype=np.float64)
        interleaved[0::2] = clip.left
        interleaved[1::2] = clip.right
        ints = np.clip(np.round(interleaved * 32768.0), -32768, 32767).astype("<i2")
        payload = ints.tobytes()
    else:
        raise InputError(f"unsupported sample format {sample_format!r}")
    block_align = 2 * bits // 8
    byte_rate = clip.sample_rate * block_align
    fmt_chunk = struct.pack(
        "<HHIIHH", fmt_code, 2, clip.sample_rate, byte_rate, block_align, bits
    )
    with open(path, "wb") as fh:
        riff_size = 4 + 8 + len(fmt_chunk) + 8 + len(payload)
        fh.write(b"RIFF" + struct.pack("<I", riff_size) + b"WAVE")
        fh.write(b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk)
        fh.write(b"data" + struct.pack("<I", len(payload)) + payload)
        if len(payload) % 2:
            fh.write(b"\x00")


def acs_audio(clip: StereoClip) -> StereoClip:
    """Audio channel swap: the augmentation mate of negating azimuths."""
    return StereoClip(clip.right, clip.left, clip.sample_rate)


def segment(
    audio: StereoClip,
    labels: list[Event],
    seg_s: float = SEGMENT_S,
    source_id: str = "clip",
) -> list[ClipRecord]:
    """Split a recording into fixed non-overlapping windows.

    The trailing remainder is zero-padded; label frames (100 ms grid over
    the whole recording) are reassigned by integer division.
    """
    seg_samples = int(round(seg_s * audio.sample_rate))
    frames_per_seg = int(round(seg_s / FRAME_HOP_S))
    n_segments = max(1, -(-audio.n_samples // seg_samples))
    buckets: list[list[Event]] = [[] for _ in range(n_segments)]
    for event in labels:
        idx = event.frame // frames_per_seg
        if idx >= n_segments:
            raise InputError(
                f"label frame {event.frame} beyond audio extent ({n_segments} segments)"
            )
        buckets[idx].append(Event(
            frame=event.frame % frames_per_seg,
            class_id=event.class_id,
            azimuth_deg=event.azimuth_deg,
            distance_m=event.distance_m,
            track_hint=event.track_hint,
        ))
    records = []
    for idx in range(n_segments):
        start = idx * seg_samples
        left = np.zeros(seg_samples, dtype=audio.left.dtype)
        right = np.zeros(seg_samples, dtype=audio.right.dtype)
        chunk = audio.left[start:start + seg_samples]
        left[: chunk.shape[0]] = chunk
        chunk = audio.right[start:start + seg_samples]
        right[: chunk.shape[0]] = chunk
        records.append(ClipRecord(
            audio=StereoClip(left, right, audio.sample_rate),
            labels=sort_events(buckets[idx]),
            source_id=f"{source_id}#{idx}",
        ))
    return records


def pan_gains(azimuth_deg: float) -> tuple[float, float]:
    """Constant-power stereo gains for an azimuth, folded into [-90, 90].

    +90 is fully left, -90 fully right, 0 center; gL^2 + gR^2 = 1 always.
    """
    az = azimuth_deg
    az = (az + 180.0) % 360.0 - 180.0
    if az > 90.0:
        az = 180.0 - az
    elif az < -90.0:
        az = -180.0 - az
    theta = (90.0 - az) / 180.0 * (math.pi / 2.0)
    return math.cos(theta), math.sin(theta)


def synth_event_burst(
    class_id: int,
    azimuth_deg: float,
    distance_m: float,
    onset_s: float,
    duration_s: float,
    rng: np.random.Generator,
    sample_rate: int = TARGET_RATE_HZ,
    clip_s: float = SEGMENT_S,
) -> tuple[NDArray[np.float64], NDArray[np.float64], list[int]]:
    """One panned tone burst plus the label frames it occupies.

    Class identity is carried by pitch (a third-octave ladder); loudness
    follows an inverse-distance law so distance is recoverable from level.
    """
    n = int(round(clip_s * sample_rate))
    t = np.arange(n) / sample_rate
    freq = 280.0 * 2.0 ** (class_id / 3.0) * rng.uniform(0.98, 1.02)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    tone = np.sin(2.0 * math.pi * freq * t + phase)
    tone += 0.25 * np.sin(4.0 * math.pi * freq * t + phase * 1.7)
    envelope = np.zeros(n)
    start = int(round(onset_s * sample_rate))
    stop = min(n, int(round((onset_s + duration_s) * sample_rate)))
    ramp = min(int(0.04 * sample_rate), max(1, (stop - start) // 4))
    envelope[start:stop] = 1.0
    fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    envelope[start:start + ramp] *= fade
    envelope[stop - ramp:stop] *= fade[::-1]
    amp = 0.28 / distance_m
    mono = amp * envelope * tone
    g_left, g_right = pan_gains(azimuth_deg)
    frames = [
        k for k in range(FRAMES_PER_SEGMENT)
        if onset_s <= (k + 0.5) * FRAME_HOP_S < onset_s + duration_s
    ]
    return g_left * mono, g_right * mono, frames


def synth_dataset(
    n_clips: int,
    seed: int,
    sample_rate: int = TARGET_RATE_HZ,
    n_classes: int = 13,
) -> list[ClipRecord]:
    """Deterministic synthetic clips: 1-3 distinct-class bursts each.

    Each clip derives its own generator from (seed, clip index), so the
    dataset is reproducible bitwise regardless of generation order.
    """
    records = []
    for i in range(n_clips):
        rng = np.random.default_rng([seed, i])
        n_events = int(rng.integers(1, 4))
        classes = rng.choice(n_classes, size=n_events, replace=False)
        left = np.zeros(int(round(SEGMENT_S * sample_rate)))
        right = np.zeros_like(left)
        labels: list[Event] = []
        for class_id in classes:
            azimuth = float(rng.uniform(-88.0, 88.0))
            distance = float(rng.uniform(0.5, 5.0))
            duration = float(rng.uniform(0.8, 2.5))
            onset = float(rng.uniform(0.1, SEGMENT_S - duration - 0.1))
            ch_l, ch_r, frames = synth_event_burst(
                int(class_id), azimuth, distance, onset, duration, rng, sample_rate
            )
            left += ch_l
            right += ch_r
            labels.extend(
                Event(frame=k, class_id=int(class_id), azimuth_deg=azimuth,
                      distance_m=distance)
                for k in frames
            )
        peak = max(np.max(np.abs(left)), np.max(np.abs(right)))
        if peak > 0.99:
            left *= 0.99 / peak
            right *= 0.99 / peak
        records.append(ClipRecord(
            audio=StereoClip(
                left.astype(np.float32), right.astype(np.float32), sample_rate
            ),
            labels=sort_events(labels),
            source_id=f"synth-{seed}-{i:04d}",
        ))
    return records


def read_manifest(path: str) -> list[tuple[str, str | None]]:
    """Parse `audio_path,label_path` lines; the label column is optional."""
    entries = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) == 1:
                entries.append((row[0].strip(), None))
            elif len(row) == 2:
                entries.append((row[0].strip(), row[1].strip() or None))
            else:
                raise InputError(f"{path}:{lineno}: expected 1-2 columns, got {len(row)}")
    return entries


def write_manifest(path: str, entries: list[tuple[str, str | None]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for audio_path, label_path in entries:
            writer.writerow([audio_path] if label_path is None else [audio_path, label_path])
