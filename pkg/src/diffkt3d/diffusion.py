"""Noise schedules, v-parameterization and deterministic ODE sampling.

Two schedule kinds share one warped time axis ``t~ = s t / (1 + (s - 1) t)``:

* ``vp``: ``alpha = cos(pi t~ / 2)``, ``sigma = sin(pi t~ / 2)``; the
  regression target is ``v = alpha * eps - sigma * x0`` and
  ``(x_t, v)`` inverts exactly back to ``(x0, eps)``.
* ``flow``: ``alpha = 1 - t~``, ``sigma = t~``; the target is the velocity
  ``eps - x0`` and sampling integrates ``dx/dt~`` with Euler steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Tensor, ops, stream


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "vp"
    flow_shift: float = 3.0
    n_train_steps: int = 1000

    def __post_init__(self):
        if self.kind not in ("vp", "flow"):
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if not self.flow_shift > 0:
            raise ScheduleError("flow_shift must be positive")
        if self.n_train_steps < 1:
            raise ScheduleError("n_train_steps must be >= 1")


def shift_time(t, shift):
    t = np.asarray(t, dtype=np.float64)
    # s t / (1 + (s - 1) t), arranged so both endpoints map exactly
    st = shift * t
    return st / (st + (1.0 - t))


def schedule(t, sched):
    """``(alpha, sigma)`` at time ``t`` in [0, 1] (scalar or array)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ScheduleError(f"t must lie in [0, 1], got {t}")
    tw = shift_time(t, sched.flow_shift)
    if sched.kind == "vp":
        return np.cos(0.5 * np.pi * tw), np.sin(0.5 * np.pi * tw)
    return 1.0 - tw, tw


def _coef(c, x):
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 0:
        return c
    return c.reshape(c.shape + (1,) * (np.ndim(x) - c.ndim))


def _check_same(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ScheduleError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def forward_diffuse(x0, eps, t, sched):
    """``x_t = alpha_t x0 + sigma_t eps``; ``t`` may be per-batch-row."""
    _check_same(x0, eps, "forward_diffuse")
    a, s = schedule(t, sched)
    return _coef(a, x0) * x0 + _coef(s, x0) * eps


def v_target(x0, eps, t, sched):
    _check_same(x0, eps, "v_target")
    if sched.kind == "flow":
        return np.asarray(eps) - np.asarray(x0)
    a, s = schedule(t, sched)
    return _coef(a, x0) * eps - _coef(s, x0) * x0


def recover_x0_eps(xt, v, t, sched):
    """Invert ``(forward_diffuse, v_target)`` under a variance-preserving schedule."""
    if sched.kind != "vp":
        raise ScheduleError("x0/eps recovery from v needs alpha^2 + sigma^2 = 1 (vp schedule)")
    _check_same(xt, v, "recover_x0_eps")
    a, s = schedule(t, sched)
    a, s = _coef(a, xt), _coef(s, xt)
    return a * xt - s * v, s * xt + a * v


def sample_train_time(rng, n, sched):
    """Training times on the ``n_train_steps`` lattice ``k / N``, ``k = 1..N``."""
    k = rng.integers(1, sched.n_train_steps + 1, size=n)
    return k / float(sched.n_train_steps)


def diffusion_loss(model, batch, sched, rng, prediction="v"):
    """Mean squared error between the model output and the regression target.

    ``batch`` holds ``x0`` of shape ``(B, ...)`` and opaque ``conditions``;
    ``model(x_t, t, conditions)`` returns a Tensor of the same shape.
    ``prediction="x0"`` regresses the clean signal instead of ``v``.
    """
    x0 = np.asarray(batch["x0"], dtype=np.float64)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t = batch.get("t")
    if t is None:
        t = sample_train_time(rng, x0.shape[0], sched)
    eps = batch.get("eps")
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    xt = forward_diffuse(x0, eps, t, sched)
    target = x0 if prediction == "x0" else v_target(x0, eps, t, sched)
    out = model(xt, np.asarray(t, dtype=np.float64), batch.get("conditions"))
    return ops.mean(ops.square(ops.sub(out, target)))


def initial_noise(seeds, shape):
    """Stack one seeded N(0, I) draw of ``shape`` per seed."""
    return np.stack([stream(s, "sample").standard_normal(shape) for s in seeds])


def _as_array(out):
    return out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)


def sample_ode(model, conditions, steps, sched, seed, shape, postprocess=None):
    """Deterministic sampler from ``t = 1`` to ``t = 0`` on a uniform grid.

    ``seed`` may be an int (returns one sample) or a sequence (batched
    samples, one per seed). vp schedules convert each ``v`` prediction to
    ``(x0, eps)`` and re-noise to the next time (DDIM-style); flow schedules
    take Euler steps along the predicted velocity.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    single = np.ndim(seed) == 0
    seeds = [seed] if single else list(seed)
    x = initial_noise(seeds, shape)
    grid = np.linspace(1.0, 0.0, steps + 1)
    n = len(seeds)
    x0_hat = x
    for i in range(steps):
        t, t_next = grid[i], grid[i + 1]
        v = _as_array(model(x, np.full(n, t), conditions))
        if sched.kind == "vp":
            x0_hat, eps_hat = recover_x0_eps(x, v, t, sched)
            x = forward_diffuse(x0_hat, eps_hat, t_next, sched)
        else:
            dt = shift_time(t, sched.flow_shift) - shift_time(t_next, sched.flow_shift)
            x = x - dt * v
            x0_hat = x
    out = x0_hat[0] if single else x0_hat
    return postprocess(out) if postprocess is not None else out


def predict_x0_single_step(model_xpred, conditions, seed, shape, postprocess=None):
    """One evaluation of an x0-regression model at ``t = 1`` on seeded noise."""
    single = np.ndim(seed) == 0
    seeds = [seed] if single else list(seed)
    x1 = initial_noise(seeds, shape)
    out = _as_array(model_xpred(x1, np.ones(len(seeds)), conditions))
    out = out[0] if single else out
    return postprocess(out) if postprocess is not None else out
