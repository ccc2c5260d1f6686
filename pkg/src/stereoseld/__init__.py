"""Desk-scale stereo sound event localization and detection (SELD).

The package turns two-channel audio into per-frame sound event detections
with azimuth and distance estimates.  The pipeline is:

    stereo WAV -> pseudo-FOA -> log-mel + intensity features
               -> CNN encoder -> bidirectional selective-state-space decoder
               -> multi-track activity/DOA/distance tensor -> event list

Numerical kernels (state-space scans, assignment loss) are plain NumPy with
hand-derived backward passes; the trainable model wraps them with thin
autograd bridges.
"""

from .errors import CapacityError, InputError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "InputError",
    "NumericalError",
    "__version__",
]
