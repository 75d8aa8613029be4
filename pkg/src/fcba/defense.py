"""Participant-level DP defense: per-update norm clipping and Gaussian noise on the aggregate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .nn import ParamVector
from .rng import substream


@dataclass(frozen=True)
class DefenseConfig:
    """``clip`` is the L2 threshold S, ``sigma`` the noise standard deviation.

    Either may be None (disabled). The defense is active from ``start_round``.
    """

    clip: float | None = None
    sigma: float | None = None
    noise_seed: int | None = None
    start_round: int = 0

    def __post_init__(self):
        if self.clip is not None and not self.clip > 0:
            raise ConfigurationError("clipping threshold S must be > 0")
        if self.sigma is not None and not self.sigma >= 0:
            raise ConfigurationError("noise sigma must be >= 0")

    @property
    def active(self) -> bool:
        return self.clip is not None or bool(self.sigma)


def clip_update(delta: ParamVector, clip: float) -> ParamVector:
    """Scale by min(1, S / ||delta||); zero vectors and S = inf pass through unchanged."""
    if not clip > 0:
        raise ConfigurationError("clipping threshold S must be > 0")
    norm = delta.norm()
    if norm == 0.0 or math.isinf(clip) or norm <= clip:
        return delta
    scaled = delta.values.astype(np.float64) * (clip / norm)
    out = scaled.astype(delta.values.dtype)
    # float32 rounding can overshoot S by an ulp; shrink once more if so
    if float(np.linalg.norm(out.astype(np.float64))) > clip:
        out = (scaled * (1.0 - 1e-7)).astype(delta.values.dtype)
    return ParamVector(out, delta.layout)


def add_noise(v: ParamVector, sigma: float, seed: int, round_index: int = 0) -> ParamVector:
    """Add i.i.d. N(0, sigma^2) to every coordinate from the (seed, round) stream."""
    if not sigma >= 0:
        raise ConfigurationError("noise sigma must be >= 0")
    if sigma == 0:
        return v
    noise = substream(seed, "noise", round_index).normal(0.0, sigma, size=len(v))
    return ParamVector((v.values + noise).astype(v.values.dtype), v.layout)
