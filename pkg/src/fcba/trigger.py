"""Trigger geometry, local-trigger enumeration and poison-budget alignment.

A global trigger is ``m`` one-pixel-tall sub-blocks of ``size`` columns laid
out on a two-row grid. A local trigger is a non-empty proper subset of those
blocks; the full set is reserved for evaluation.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import AlignmentInfeasibleError, ConfigurationError


class TriggerStrategy(str, enum.Enum):
    FULL_COMBINATION = "FC"
    SIMPLE_DIVISION = "SD"

    @classmethod
    def parse(cls, value) -> TriggerStrategy:
        if isinstance(value, cls):
            return value
        key = str(value).strip().upper().replace("-", "_")
        aliases = {"FC": cls.FULL_COMBINATION, "FCBA": cls.FULL_COMBINATION, "FULL_COMBINATION": cls.FULL_COMBINATION,
                   "SD": cls.SIMPLE_DIVISION, "DBA": cls.SIMPLE_DIVISION, "SIMPLE_DIVISION": cls.SIMPLE_DIVISION}
        try:
            return aliases[key]
        except KeyError:
            raise ConfigurationError(f"unknown trigger strategy {value!r} (use FC or SD)") from None


@dataclass(frozen=True)
class SubBlock:
    rows: tuple[int, int]  # half-open
    cols: tuple[int, int]

    @property
    def pixels(self) -> int:
        return (self.rows[1] - self.rows[0]) * (self.cols[1] - self.cols[0])


@dataclass(frozen=True)
class GlobalTriggerSpec:
    m: int = 4
    size: int = 4
    gap: int = 2
    shift_x: int = 0
    shift_y: int = 0
    pixel_value: float = 1.0
    image_shape: tuple[int, int, int] = (28, 28, 1)

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(d) for d in self.image_shape))
        if self.m < 2:
            raise ConfigurationError("trigger partition count m must be >= 2")
        if self.size < 1:
            raise ConfigurationError("trigger size must be >= 1")
        if self.gap < 0:
            raise ConfigurationError("trigger gap must be >= 0")
        if self.shift_x < 0 or self.shift_y < 0:
            raise ConfigurationError("trigger location offsets must be >= 0")
        if not 0.0 <= self.pixel_value <= 1.0:
            raise ConfigurationError("trigger pixel value must lie in [0, 1]")

    @classmethod
    def from_location(cls, location, **kw) -> GlobalTriggerSpec:
        """Build from a scalar location (equal x/y shift) or an (x, y) pair."""
        if isinstance(location, (int, np.integer)):
            sx = sy = int(location)
        else:
            sx, sy = (int(v) for v in location)
        return cls(shift_x=sx, shift_y=sy, **kw)


@dataclass(frozen=True, order=True)
class LocalTriggerPattern:
    block_ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(sorted(set(int(b) for b in self.block_ids)))
        if not ids:
            raise ConfigurationError("a trigger pattern needs at least one block")
        object.__setattr__(self, "block_ids", ids)

    def __len__(self) -> int:
        return len(self.block_ids)

    def label(self) -> str:
        """One-based listing, e.g. ``1,3``."""
        return ",".join(str(b + 1) for b in self.block_ids)


def layout_blocks(spec: GlobalTriggerSpec) -> list[SubBlock]:
    """Place the m sub-blocks on a 2-row grid, ceil(m/2) per row."""
    per_row = math.ceil(spec.m / 2)
    row_pitch = max(spec.gap, 1)
    col_pitch = spec.size + spec.gap
    h, w, _ = spec.image_shape
    blocks = []
    for k in range(spec.m):
        r, c = divmod(k, per_row)
        y = spec.shift_y + r * row_pitch
        x = spec.shift_x + c * col_pitch
        if y + 1 > h:
            raise ConfigurationError(f"trigger block {k} exceeds image height {h} (row {y})")
        if x + spec.size > w:
            raise ConfigurationError(f"trigger block {k} exceeds image width {w} (columns {x}..{x + spec.size - 1})")
        blocks.append(SubBlock((y, y + 1), (x, x + spec.size)))
    return blocks


def full_pattern(m: int) -> LocalTriggerPattern:
    return LocalTriggerPattern(tuple(range(m)))


def enumerate_triggers(m: int, strategy) -> list[LocalTriggerPattern]:
    """FC: every non-empty proper subset by size then lexicographically; SD: singletons."""
    if m < 2:
        raise ConfigurationError("m must be >= 2")
    strategy = TriggerStrategy.parse(strategy)
    if strategy is TriggerStrategy.SIMPLE_DIVISION:
        return [LocalTriggerPattern((i,)) for i in range(m)]
    return [
        LocalTriggerPattern(combo)
        for k in range(1, m)
        for combo in itertools.combinations(range(m), k)
    ]


def malicious_count(m: int, strategy) -> int:
    if m < 2:
        raise ConfigurationError("m must be >= 2")
    if TriggerStrategy.parse(strategy) is TriggerStrategy.SIMPLE_DIVISION:
        return m
    return 2 ** m - 2


def trigger_mask(spec: GlobalTriggerSpec, pattern: LocalTriggerPattern) -> np.ndarray:
    """Boolean [H, W] mask of the pixels a pattern writes."""
    blocks = layout_blocks(spec)
    if pattern.block_ids[-1] >= spec.m:
        raise ConfigurationError(f"pattern {pattern.block_ids} references blocks beyond m={spec.m}")
    h, w, _ = spec.image_shape
    mask = np.zeros((h, w), dtype=bool)
    for b in pattern.block_ids:
        blk = blocks[b]
        mask[blk.rows[0]:blk.rows[1], blk.cols[0]:blk.cols[1]] = True
    return mask


def apply_trigger(images: np.ndarray, pattern: LocalTriggerPattern, spec: GlobalTriggerSpec) -> np.ndarray:
    """Copy of ``images`` ([H, W, C] or [N, H, W, C]) with the pattern's pixels overwritten."""
    images = np.asarray(images)
    if images.shape[-3:] != spec.image_shape:
        raise ConfigurationError(f"image shape {images.shape[-3:]} does not match trigger spec {spec.image_shape}")
    out = images.copy()
    out[..., trigger_mask(spec, pattern), :] = spec.pixel_value
    return out


def avg_blocks_per_trigger(m: int) -> Fraction:
    """Mean number of sub-blocks per full-combination local trigger."""
    if m < 2:
        raise ConfigurationError("m must be >= 2")
    total = sum(k * math.comb(m, k) for k in range(1, m))
    return Fraction(total, 2 ** m - 2)


def poison_alignment(r_fcba: int, m: int, dba_rounds: int | None = None) -> int:
    """Per-batch poison count for the simple-division attack matching the FC pixel budget.

    Both attacks inject ``poisoned samples x blocks per sample x poison rounds``
    trigger blocks in total; FC uses 2^m - 2 rounds, SD ``dba_rounds``
    (default m) rounds with one block per sample.
    """
    if m < 2:
        raise ConfigurationError("m must be >= 2")
    dba_rounds = m if dba_rounds is None else dba_rounds
    if dba_rounds < 1:
        raise ConfigurationError("dba_rounds must be >= 1")
    budget = r_fcba * avg_blocks_per_trigger(m) * (2 ** m - 2)
    r_dba = budget / dba_rounds
    if r_dba.denominator != 1:
        raise AlignmentInfeasibleError(
            f"aligned poison count {r_dba} is not an integer (r={r_fcba}, m={m}, rounds={dba_rounds})"
        )
    return int(r_dba)


def trigger_listing(m: int, strategy) -> list[dict]:
    """Listing rows: one-based trigger id, one-based blocks and a printable label."""
    strategy = TriggerStrategy.parse(strategy)
    return [
        {"id": i + 1, "blocks": [b + 1 for b in p.block_ids], "label": f"O_{strategy.value}({i + 1})={p.label()}"}
        for i, p in enumerate(enumerate_triggers(m, strategy))
    ]
