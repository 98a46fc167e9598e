"""Bounded activations.

``logclip`` passes ``log(x + 1)`` (natural log) on ``(0, theta]`` and maps
everything else, including values above the calibrated bound, to 0.
"""
from __future__ import annotations

import numpy as np


def relu(x, theta=None):
    return np.maximum(x, 0.0)


def relu_clip(x, theta):
    """``min(max(x, 0), theta)``."""
    if np.any(np.asarray(theta) <= 0):
        raise ValueError("theta must be positive")
    return np.minimum(np.maximum(x, 0.0), theta)


def logclip(x, theta):
    if np.any(np.asarray(theta) <= 0):
        raise ValueError("theta must be positive")
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        keep = (x > 0) & (x <= theta)
        out = np.where(keep, np.log1p(np.where(keep, x, 0.0)), 0.0)
    return out if out.ndim else float(out)


def identity(x, theta=None):
    return x


_BY_NAME = {"none": identity, "relu": relu, "clip": relu_clip, "logclip": logclip}


def apply(kind: str, x, theta: float):
    if kind in ("clip", "logclip") and not theta > 0:
        # an uncalibrated or corrupted bound switches the unit off
        return np.zeros_like(x)
    return _BY_NAME[kind](x, theta)
