"""Multi-track event codec: event lists <-> activity-coupled DOA/distance tensors.

The tensor layout is [frames][tracks][classes][3] with the last axis holding
(x, y, distance): x = cos(azimuth), y = sin(azimuth), both scaled by the
activity (unit norm for a hard target), and distance in meters.  A slot is
considered active at decode when sqrt(x^2 + y^2) exceeds the threshold
strictly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray

from .errors import CapacityError, InputError

N_CLASSES = 13
N_TRACKS = 3
N_FRAMES = 50
ACTIVITY_THRESHOLD = 0.5
MERGE_DEG = 15.0


@dataclass(frozen=True)
class Event:
    """One detected or labeled sound event at 100 ms frame resolution."""

    frame: int
    class_id: int
    azimuth_deg: float
    distance_m: float
    track_hint: int | None = None


def wrap_azimuth_deg(az: float) -> float:
    """Wrap any azimuth into [-180, 180)."""
    return float((az + 180.0) % 360.0 - 180.0)


def sort_events(events: list[Event]) -> list[Event]:
    return sorted(events, key=lambda e: (e.frame, e.class_id, e.azimuth_deg))


def validate_event(
    event: Event, n_frames: int = N_FRAMES, n_classes: int = N_CLASSES,
    n_tracks: int = N_TRACKS,
) -> None:
    if not 0 <= event.frame < n_frames:
        raise InputError(f"frame {event.frame} outside [0, {n_frames})")
    if not 0 <= event.class_id < n_classes:
        raise InputError(f"class {event.class_id} outside [0, {n_classes})")
    if not -180.0 <= event.azimuth_deg < 180.0:
        raise InputError(f"azimuth {event.azimuth_deg} outside [-180, 180)")
    if not event.distance_m > 0:
        raise InputError(f"distance {event.distance_m} must be positive")
    if event.track_hint is not None and not 0 <= event.track_hint < n_tracks:
        raise InputError(f"track hint {event.track_hint} outside [0, {n_tracks})")


def encode(
    events: list[Event],
    n_frames: int = N_FRAMES,
    n_tracks: int = N_TRACKS,
    n_classes: int = N_CLASSES,
) -> NDArray[np.float64]:
    """Build the target tensor; same-class concurrent events take distinct
    tracks (the hinted slot when free, else the first free slot).

    Raises :class:`CapacityError` when a (frame, class) cell receives more
    events than there are tracks.
    """
    tensor = np.zeros((n_frames, n_tracks, n_classes, 3), dtype=np.float64)
    occupied = np.zeros((n_frames, n_tracks, n_classes), dtype=bool)
    for event in sort_events(events):
        validate_event(event, n_frames, n_classes, n_tracks)
        f, c = event.frame, event.class_id
        track = None
        if event.track_hint is not None and not occupied[f, event.track_hint, c]:
            track = event.track_hint
        else:
            for t in range(n_tracks):
                if not occupied[f, t, c]:
                    track = t
                    break
        if track is None:
            raise CapacityError(
                f"more than {n_tracks} class-{c} events in frame {f}"
            )
        az = math.radians(event.azimuth_deg)
        tensor[f, track, c] = (math.cos(az), math.sin(az), event.distance_m)
        occupied[f, track, c] = True
    return tensor


def _circular_mean_deg(azimuths_deg: list[float]) -> float:
    rad = np.radians(azimuths_deg)
    return wrap_azimuth_deg(
        math.degrees(math.atan2(np.mean(np.sin(rad)), np.mean(np.cos(rad))))
    )


def decode(
    tensor: NDArray[np.floating],
    activity_threshold: float = ACTIVITY_THRESHOLD,
    merge_deg: float = MERGE_DEG,
) -> list[Event]:
    """Read events back out of a prediction or target tensor.

    A slot is active iff its (x, y) norm strictly exceeds the threshold.
    Same-class detections in one frame closer than ``merge_deg`` are fused
    into one event (circular-mean azimuth, mean distance, lowest track).
    """
    tensor = np.asarray(tensor)
    if tensor.ndim != 4 or tensor.shape[-1] != 3:
        raise InputError(f"tensor must be [F][T][C][3], got shape {tensor.shape}")
    norm = np.hypot(tensor[..., 0], tensor[..., 1])
    active = np.argwhere(norm > activity_threshold)
    by_cell: dict[tuple[int, int], list[tuple[int, float, float]]] = {}
    for f, t, c in active:
        az = math.degrees(math.atan2(tensor[f, t, c, 1], tensor[f, t, c, 0]))
        by_cell.setdefault((int(f), int(c)), []).append(
            (int(t), wrap_azimuth_deg(az), float(tensor[f, t, c, 2]))
        )
    events = []
    for (f, c), slots in by_cell.items():
        groups = _merge_groups(slots, merge_deg)
        for group in groups:
            tracks = [g[0] for g in group]
            azs = [g[1] for g in group]
            dists = [g[2] for g in group]
            events.append(Event(
                frame=f,
                class_id=c,
                azimuth_deg=_circular_mean_deg(azs) if len(azs) > 1 else azs[0],
                distance_m=float(np.mean(dists)),
                track_hint=min(tracks),
            ))
    return sort_events(events)


def _merge_groups(
    slots: list[tuple[int, float, float]], merge_deg: float
) -> list[list[tuple[int, float, float]]]:
    """Union-find clustering of detections linked by angular distance <
    merge_deg (strictly)."""
    n = len(slots)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            diff = abs((slots[i][1] - slots[j][1] + 180.0) % 360.0 - 180.0)
            if diff < merge_deg:
                parent[find(i)] = find(j)
    groups: dict[int, list] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(slots[i])
    return [sorted(g) for _, g in sorted(groups.items())]


def write_event_csv(path: str, events: list[Event]) -> None:
    """Event CSV, one row per event: frame,class,track,azimuth,distance.

    Events without a track hint get deterministic first-free slots per
    (frame, class), mirroring the encoder's assignment.
    """
    used: dict[tuple[int, int], set[int]] = {}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for event in sort_events(events):
            key = (event.frame, event.class_id)
            taken = used.setdefault(key, set())
            track = event.track_hint
            if track is None or track in taken:
                track = next(t for t in range(N_TRACKS + len(taken) + 1) if t not in taken)
            taken.add(track)
            writer.writerow([
                event.frame, event.class_id, track,
                f"{event.azimuth_deg:.6f}", f"{event.distance_m:.6f}",
            ])


def read_event_csv(path: str, n_frames: int | None = None) -> list[Event]:
    """Parse the CSV written by :func:`write_event_csv`.

    Tolerates an optional sixth onscreen column (ignored) and blank lines.
    Frame range is validated only when ``n_frames`` is given, so files
    spanning whole recordings parse cleanly.
    """
    events = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) not in (5, 6):
                raise InputError(f"{path}:{lineno}: expected 5 or 6 columns, got {len(row)}")
            try:
                event = Event(
                    frame=int(row[0]),
                    class_id=int(row[1]),
                    azimuth_deg=wrap_azimuth_deg(float(row[3])),
                    distance_m=float(row[4]),
                    track_hint=int(row[2]),
                )
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
            if event.distance_m <= 0:
                raise InputError(f"{path}:{lineno}: distance must be positive")
            if n_frames is not None:
                validate_event(event, n_frames=n_frames)
            events.append(event)
    return sort_events(events)


def shift_frames(events: list[Event], offset: int) -> list[Event]:
    """Re-index event frames by a constant offset (segmentation helper)."""
    return [replace(e, frame=e.frame + offset) for e in events]
