"""Batched conditioning and sampling helpers shared by training and evaluation."""

from __future__ import annotations

import numpy as np

from .any2any import Conditioning, TaskAssignment
from .diffusion import NoiseSchedule, predict_x0_single_step, sample_ode
from .phantom import MODALITIES, denormalize, normalized_stack

DOSE_TASK = TaskAssignment("dose", tuple(m for m in MODALITIES if m != "dose"))


def remaining_one_task(target):
    return TaskAssignment(target, tuple(m for m in MODALITIES if m != target))


def case_conditioning(case, task=DOSE_TASK, repeat=1, stack=None):
    """Conditioning for one case, repeated along the batch axis.

    The target channel is zeroed so it cannot leak into the tokens.
    """
    s = normalized_stack(case) if stack is None else np.array(stack, dtype=np.float64)
    s[MODALITIES.index(task.target)] = 0.0
    return Conditioning(np.repeat(s[None], repeat, axis=0), task)


def to_gy(x, case, modality="dose"):
    """Clip to the normalized range, de-normalize and zero outside the body."""
    vals = denormalize(np.clip(x, -1.0, 1.0), modality, case.prescription_gy)
    return vals * case.mask("body")


def sample_candidates(model, case, seeds, steps=10, sched=None, task=DOSE_TASK, stack=None):
    """Normalized x0 samples ``(len(seeds), D, H, W)`` from one batched ODE solve."""
    sched = sched or NoiseSchedule()
    seeds = list(seeds)
    cond = case_conditioning(case, task, len(seeds), stack)
    return sample_ode(model, cond, steps, sched, seeds, model.cfg.volume_shape)


def sample_dose(model, case, seed, steps=10, sched=None):
    """One dose sample in Gy."""
    x = sample_candidates(model, case, [seed], steps, sched)[0]
    return to_gy(x, case)


def xpred_dose(model, case, seed):
    """Single-step dose from a model trained to regress x0 directly."""
    cond = case_conditioning(case)
    x = predict_x0_single_step(model, cond, seed, model.cfg.volume_shape)
    return to_gy(x, case)
