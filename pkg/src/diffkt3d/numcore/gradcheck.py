"""Central finite-difference gradient checker."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, evaluate_with_gradients


def _scalar(f, params):
    out = f({k: Tensor(v) for k, v in params.items()})
    value = float(np.asarray(out.data if isinstance(out, Tensor) else out))
    if not np.isfinite(value):
        raise FloatingPointError("non-finite loss at a perturbed point")
    return value


def numerical_gradient(f, params, name, step=1e-5, coords=None):
    """Central differences of ``f`` w.r.t. ``params[name]`` (flat coords)."""
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    arr = base[name]
    flat = arr.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    grad = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        up = _scalar(f, base)
        flat[i] = orig - step
        down = _scalar(f, base)
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad.reshape(arr.shape)


def grad_check(f, params, step=1e-5, max_coords=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    For each parameter tensor the error is
    ``||analytic - numeric|| / (||numeric|| + 1e-12)``; the maximum over
    tensors is returned. ``max_coords`` limits the checked entries per
    tensor to a seeded random subset (both sides use the same subset).
    """
    if not step > 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    value, grads = evaluate_with_gradients(f, params)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite loss at the base point")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in params.items():
        size = np.size(arr)
        coords = None
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, max_coords, replace=False))
        num = numerical_gradient(f, params, name, step, coords).reshape(-1)
        ana = np.asarray(grads[name]).reshape(-1)
        if coords is not None:
            num, ana = num[coords], ana[coords]
        err = np.linalg.norm(ana - num) / (np.linalg.norm(num) + 1e-12)
        worst = max(worst, float(err))
    return worst
