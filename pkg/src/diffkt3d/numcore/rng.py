"""Counter-based random streams.

Every stochastic call site asks for its own stream keyed by the run seed and
a tuple of labels, so results never depend on call order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def stream(seed, *labels):
    """Philox generator for ``(seed, *labels)``; identical keys give identical draws."""
    entropy = [_key(seed)] + [_key(p) for p in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
