"""The rectified-flow probability path between noise and data.

The path is the straight line x_t = (1 - t) * x0 + t * x1 with constant
target velocity u = x1 - x0; t = 0 sits at the noise endpoint and t = 1
at the data endpoint.  All operations are componentwise and work on
numpy arrays and torch tensors alike.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from .errors import ShapeMismatchError


@dataclass(frozen=True)
class PathSample:
    """One draw from the training path: endpoints, time, state, target."""

    x0: Any
    x1: Any
    t: float
    xt: Any
    ut: Any


def _check_shapes(a, b, op: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatchError(f"{op}: shape {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_time(t: float) -> None:
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"time must lie in [0, 1], got {t}")


def interpolate(x0, x1, t: float):
    """Point on the straight path: (1 - t) * x0 + t * x1."""
    _check_shapes(x0, x1, "interpolate")
    _check_time(t)
    return (1.0 - t) * x0 + t * x1


def target_velocity(x0, x1):
    """Constant velocity carrying x0 to x1 in unit time: x1 - x0."""
    _check_shapes(x0, x1, "target_velocity")
    return x1 - x0


def extrapolate_to_data(xt, v, t: float):
    """One-shot jump to the data endpoint: xt + (1 - t) * v.

    With the true constant field this recovers x1 exactly from any
    point on the path.
    """
    _check_shapes(xt, v, "extrapolate_to_data")
    _check_time(t)
    return xt + (1.0 - t) * v


def sample_path(x0, x1, t: float) -> PathSample:
    """Bundle (xt, ut) for a given time; convenience for training code."""
    return PathSample(x0=x0, x1=x1, t=float(t),
                      xt=interpolate(x0, x1, t),
                      ut=target_velocity(x0, x1))
