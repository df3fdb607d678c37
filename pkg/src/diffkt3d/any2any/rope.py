"""Slot-aware 4D rotary position embedding.

Per-head channels are split across the axes ``(S, H, W, D)``: the modality
slot plus the three spatial token-grid axes. Each axis rotates its own
channel pairs, so attention logits depend only on per-axis coordinate
differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numcore import ops

AXES = ("S", "H", "W", "D")


class RopeError(ValueError):
    pass


@dataclass(frozen=True)
class RopeConfig:
    split: tuple = (4, 4, 4, 4)
    thetas: tuple = (7.0, 4.0, 4.0, 4.0)

    def __post_init__(self):
        if len(self.split) != 4 or len(self.thetas) != 4:
            raise RopeError("RoPE needs exactly four axes (S, H, W, D)")
        if any(t <= 0 for t in self.thetas):
            raise RopeError(f"RoPE bases must be positive, got {self.thetas}")

    @property
    def d(self):
        return int(sum(self.split))

    @classmethod
    def for_grid(cls, token_grid, n_slots=7, split=(4, 4, 4, 4)):
        """Bases equal to the slot count and token-grid extents ``(D, H, W)``."""
        gd, gh, gw = token_grid
        return cls(split=tuple(split), thetas=(float(n_slots), float(gh), float(gw), float(gd)))


def rope_freqs(axis, cfg):
    """Frequencies ``theta^(-2i/d_a)`` for ``i = 0 .. d_a/2 - 1``."""
    k = AXES.index(axis) if isinstance(axis, str) else int(axis)
    d_a = cfg.split[k]
    if d_a % 2:
        raise RopeError(f"axis {AXES[k]} has odd channel count {d_a}")
    i = np.arange(d_a // 2, dtype=np.float64)
    return cfg.thetas[k] ** (-2.0 * i / d_a)


def rope4d_embed(coords, cfg):
    """Rotation angles ``(N, d/2)`` for integer coordinates ``(S, H, W, D)``."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 4:
        raise RopeError(f"coords must have shape (N, 4), got {coords.shape}")
    if np.any(coords < 0):
        raise RopeError("coords must be non-negative")
    parts = [np.outer(coords[:, k], rope_freqs(k, cfg)) for k in range(4)]
    return np.concatenate(parts, axis=1)


def _rotation_tables(phases):
    cos = np.repeat(np.cos(phases), 2, axis=-1)
    sin = np.sin(phases)
    sin_signed = np.stack([-sin, sin], axis=-1).reshape(cos.shape)
    return cos, sin_signed


def rotate(x, phases):
    """Rotate channel pairs ``(2i, 2i+1)`` of ``x[..., N, d]`` by ``phases[N, d/2]``."""
    d = np.shape(x.data if hasattr(x, "data") else x)[-1]
    if d != 2 * phases.shape[-1]:
        raise RopeError(f"channel count {d} does not match {2 * phases.shape[-1]} rotary channels")
    cos, sin_signed = _rotation_tables(phases)
    shape = np.shape(x.data if hasattr(x, "data") else x)
    pairs = ops.reshape(x, shape[:-1] + (d // 2, 2))
    swapped = ops.reshape(ops.take(pairs, (Ellipsis, slice(None, None, -1))), shape)
    return ops.add(ops.mul(x, cos), ops.mul(swapped, sin_signed))


def apply_rope(q, k, phases):
    """Rotate queries and keys with the same per-token phases."""
    return rotate(q, phases), rotate(k, phases)
