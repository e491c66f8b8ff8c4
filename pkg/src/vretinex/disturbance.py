"""Random power-function disturbance of the brightness plane.

A second lighting condition of the same scene is synthesized by raising
the value plane elementwise to a random exponent: V' = V ** gamma. The
exponent regime depends on the mean brightness of the input: images with
mean value below 0.5 are disturbed with gamma in (0, 1] (brightening on
average), brighter images with gamma in [1, 5] (darkening). The power
function keeps [0, 1] closed under the mapping and preserves the sign of
every spatial difference, so no structure is clipped away or inverted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# gamma = 0 would collapse every nonzero pixel to 1, so the dark-regime
# range is floored slightly above zero.
GAMMA_FLOOR = 1e-3
DARK_MEAN_THRESHOLD = 0.5
BRIGHT_GAMMA_MAX = 5.0


@dataclass(frozen=True)
class GammaSample:
    """A drawn exponent plus the regime its range was selected from."""

    gamma: float
    regime: str  # "dark" or "bright"


def sample_gamma(mean_v: float, rng: np.random.Generator) -> GammaSample:
    """Draw a disturbance exponent for a plane with mean brightness `mean_v`.

    mean_v < 0.5 selects the dark regime with gamma uniform on
    (GAMMA_FLOOR, 1]; otherwise gamma is uniform on [1, 5]. Deterministic
    given the generator state.
    """
    if not 0.0 <= mean_v <= 1.0:
        raise ValueError(f"mean_v must lie in [0, 1], got {mean_v}")
    if mean_v < DARK_MEAN_THRESHOLD:
        gamma = 1.0 - rng.uniform(0.0, 1.0 - GAMMA_FLOOR)
        return GammaSample(gamma=float(gamma), regime="dark")
    gamma = rng.uniform(1.0, BRIGHT_GAMMA_MAX)
    return GammaSample(gamma=float(gamma), regime="bright")


def disturb(v, gamma: float):
    """Raise a unit-interval plane elementwise to `gamma` (> 0).

    Works on numpy arrays and torch tensors alike; 0 and 1 are fixed
    points, and the output stays inside [0, 1].
    """
    if gamma <= 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return v**gamma
