"""Shared test utilities: deterministic RNG handles and synthetic buffers."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from stereoseld.frontend import StereoClip


@pytest.fixture(autouse=True, scope="session")
def _single_thread_torch():
    torch.set_num_threads(1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


def pcm_valued_stereo(rng: np.random.Generator, n: int, rate: int = 24000) -> StereoClip:
    """Random stereo buffer whose float64 samples carry float32 values —
    the value domain produced by every supported WAV decode path."""
    left = rng.uniform(-1.0, 1.0, n).astype(np.float32).astype(np.float64)
    right = rng.uniform(-1.0, 1.0, n).astype(np.float32).astype(np.float64)
    return StereoClip(left, right, rate)


def random_stereo(rng: np.random.Generator, n: int, rate: int = 24000) -> StereoClip:
    return StereoClip(
        rng.uniform(-1.0, 1.0, n), rng.uniform(-1.0, 1.0, n), rate
    )
