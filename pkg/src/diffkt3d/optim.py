"""Adam with linear warm-up, optional cosine decay and global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class AdamConfig:
    lr: float = 1e-4
    warmup_steps: int = 500
    clip_norm: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_steps: int = 0          # > 0 enables cosine decay to zero at this step

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive (or None)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.decay_steps < 0:
            raise ValueError("decay_steps must be >= 0")


def warmup_lr(step, lr, warmup_steps):
    """Linear ramp over ``warmup_steps`` then constant; ``step`` counts from 0."""
    if warmup_steps <= 0:
        return lr
    return lr * min(1.0, (step + 1) / warmup_steps)


def scheduled_lr(step, cfg):
    """Warm-up, then constant or (with ``decay_steps``) cosine decay to zero."""
    lr = warmup_lr(step, cfg.lr, cfg.warmup_steps)
    if cfg.decay_steps <= 0 or step < cfg.warmup_steps:
        return lr
    span = max(cfg.decay_steps - cfg.warmup_steps, 1)
    frac = min((step - cfg.warmup_steps) / span, 1.0)
    return lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def global_norm(grads):
    # fixed key order keeps the norm bit-identical however the dict was built
    return float(np.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads))))


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients so their joint norm is at most ``max_norm``.

    Returns ``(clipped, norm_before)``.
    """
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class Adam:
    def __init__(self, cfg=None, state=None):
        self.cfg = cfg or AdamConfig()
        self.step = 0
        self.m = {}
        self.v = {}
        if state:
            self.load_state(state)

    def update(self, params, grads):
        """In-place Adam update of ``params``; returns a dict of diagnostics."""
        c = self.cfg
        grads, norm = clip_by_global_norm(grads, c.clip_norm)
        lr = scheduled_lr(self.step, c)
        self.step += 1
        b1c = 1.0 - c.beta1 ** self.step
        b2c = 1.0 - c.beta2 ** self.step
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            params[k] -= lr * (m / b1c) / (np.sqrt(v / b2c) + c.eps)
        return {"lr": lr, "grad_norm": norm, "clipped_norm": global_norm(grads)}

    def state_dict(self):
        out = {"adam.step": np.array([float(self.step)])}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, state):
        self.step = int(np.asarray(state["adam.step"]).ravel()[0])
        self.m, self.v = {}, {}
        for k, arr in state.items():
            if k.startswith("adam.m."):
                self.m[k[len("adam.m."):]] = np.array(arr, dtype=np.float64)
            elif k.startswith("adam.v."):
                self.v[k[len("adam.v."):]] = np.array(arr, dtype=np.float64)
