"""Named random substreams derived from one master seed.

Every stochastic step asks for its own generator, e.g.
``substream(seed, "selection", round)`` or ``substream(seed, "client", cid, round)``.
Streams are independent of call order, which is what makes parallel client
training reproduce the serial result.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(seq)
