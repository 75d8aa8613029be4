"""Clean accuracy, attack success rate, persistence and feature-space separation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .data import Dataset
from .errors import ConfigurationError, UndefinedMetricError
from .trigger import GlobalTriggerSpec, apply_trigger, full_pattern

PHASES = ("pre-attack", "attacking", "post-attack")
DEFAULT_OFFSETS = (0, 40, 80, 120)


@dataclass
class RoundRecord:
    round: int
    phase: str
    cda: float
    asr: float | None = None
    feat_dist: float | None = None
    clip_S: float | None = None
    noise_sigma: float | None = None
    wall_time: float = 0.0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigurationError(f"unknown phase {self.phase!r}")
        for name in ("cda", "asr"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PersistenceReport:
    attack_end_round: int
    offsets: list[int]
    asr: dict[int, float | None] = field(default_factory=dict)
    cda: dict[int, float | None] = field(default_factory=dict)
    feat_dist: dict[int, float | None] = field(default_factory=dict)

    @property
    def missing(self) -> list[int]:
        return [t for t in self.offsets if self.asr.get(t) is None]

    def to_dict(self) -> dict:
        return {
            "attack_end_round": self.attack_end_round,
            "offsets": self.offsets,
            "asr": {str(t): self.asr.get(t) for t in self.offsets},
            "cda": {str(t): self.cda.get(t) for t in self.offsets},
            "feat_dist": {str(t): self.feat_dist.get(t) for t in self.offsets},
            "missing": self.missing,
        }


def cda(arch: nn.ModelArch, params: nn.ParamVector, test: Dataset) -> float:
    """Fraction of clean test samples classified correctly."""
    pred = nn.predict(arch, params, test.images)
    return int(np.count_nonzero(pred == test.labels)) / len(test)


def asr_inputs(test: Dataset, spec: GlobalTriggerSpec, target: int) -> np.ndarray:
    """Non-target test images stamped with the full global trigger."""
    keep = test.labels != target
    if not keep.any():
        raise UndefinedMetricError(f"every test sample has the target label {target}; ASR undefined")
    return apply_trigger(test.images[keep], full_pattern(spec.m), spec)


def asr(arch: nn.ModelArch, params: nn.ParamVector, test: Dataset, spec: GlobalTriggerSpec, target: int,
        triggered: np.ndarray | None = None) -> float:
    """Fraction of triggered non-target samples predicted as ``target``.

    ``triggered`` may carry a precomputed :func:`asr_inputs` result.
    """
    if triggered is None:
        triggered = asr_inputs(test, spec, target)
    pred = nn.predict(arch, params, triggered)
    return int(np.count_nonzero(pred == target)) / len(triggered)


def persistence(records, attack_end: int, offsets=DEFAULT_OFFSETS) -> PersistenceReport:
    """ASR (and CDA / feature distance) read at ``attack_end + t`` for each offset."""
    offsets = sorted(int(t) for t in offsets)
    by_round = {r.round: r for r in records}
    report = PersistenceReport(attack_end, offsets)
    for t in offsets:
        rec = by_round.get(attack_end + t)
        report.asr[t] = rec.asr if rec is not None else None
        report.cda[t] = rec.cda if rec is not None else None
        report.feat_dist[t] = rec.feat_dist if rec is not None else None
    return report


def mean_pairwise_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    total = 0.0
    for s in range(0, len(a), 64):
        diff = a[s:s + 64, None, :] - b[None, :, :]
        total += float(np.sqrt((diff * diff).sum(-1)).sum())
    return total / (len(a) * len(b))


def feature_distance(arch: nn.ModelArch, params: nn.ParamVector, clean: np.ndarray, triggered: np.ndarray,
                     matched: bool = False) -> float:
    """Mean Euclidean distance between penultimate features of two sample sets.

    All (clean, triggered) pairs by default; with ``matched`` the i-th clean
    sample is only compared with the i-th triggered one.
    """
    if len(clean) == 0 or len(triggered) == 0:
        raise ConfigurationError("feature_distance needs two non-empty sample sets")
    fa = nn.features(arch, params, clean)
    fb = nn.features(arch, params, triggered)
    if matched:
        if len(fa) != len(fb):
            raise ConfigurationError("matched distance needs equally sized sets")
        d = fa.astype(np.float64) - fb.astype(np.float64)
        return float(np.sqrt((d * d).sum(1)).mean())
    return mean_pairwise_distance(fa, fb)
