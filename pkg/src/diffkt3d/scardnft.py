"""Scorecard-aligned post-training.

Candidates drawn from a frozen snapshot are scored with the scorecard,
turned into optimality probabilities in [0, 1], and used to weight two
implicit velocity targets built around the snapshot's own prediction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, diffusion_loss, forward_diffuse, sample_train_time, v_target
from .inference import DOSE_TASK, case_conditioning, sample_candidates, to_gy
from .numcore import evaluate_with_gradients, ops, stream
from .phantom import normalized_stack
from .scorecard import ScorecardError, raw_reward, rescale_prescription

Z_FLOOR = 1e-6


class NftError(ValueError):
    pass


@dataclass
class RewardStats:
    """Running reward mean and dispersion per condition group."""

    decay: float = 0.99
    mean: dict = field(default_factory=dict)
    z: dict = field(default_factory=dict)

    def dispersion(self, group):
        return max(self.z.get(group, 1.0), Z_FLOOR)

    def update(self, group, rewards):
        """Fold one candidate set into the running estimates; returns Z_C."""
        rewards = np.asarray(rewards, dtype=np.float64)
        m = float(rewards.mean())
        mad = float(np.mean(np.abs(rewards - m)))
        if group not in self.z:
            self.mean[group], self.z[group] = m, mad
        else:
            d = self.decay
            self.mean[group] = d * self.mean[group] + (1.0 - d) * m
            self.z[group] = d * self.z[group] + (1.0 - d) * mad
        self.z[group] = max(self.z[group], Z_FLOOR)
        return self.z[group]


@dataclass
class NftConfig:
    beta: float = 0.25
    lam: float = 1.0
    k: int = 8
    steps: int = 10
    w_hinge: float = 1.0
    w_mae: float = 0.1
    pairing: str = "all"          # or "top_bottom"
    n_pairs: int = 4
    site_normalize: bool = False

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise NftError(f"beta must lie in (0, 1], got {self.beta}")
        if not self.lam > 0:
            raise NftError(f"lambda must be positive, got {self.lam}")
        if self.k < 1 or self.steps < 1:
            raise NftError("k and steps must be >= 1")
        if self.pairing not in ("all", "top_bottom"):
            raise NftError(f"unknown pairing {self.pairing!r}")


def optimality_probability(r_raw, mean, z):
    """``1/2 + 1/2 clip((r_raw - mean) / z, -1, 1)``."""
    z = max(float(z), Z_FLOOR)
    return 0.5 + 0.5 * np.clip((np.asarray(r_raw, dtype=np.float64) - mean) / z, -1.0, 1.0)


def implicit_targets(v_old, v_theta, beta):
    """Positive and negative targets ``(1 -+ beta) v_old +- beta v_theta``."""
    if not 0.0 < beta <= 1.0:
        raise NftError(f"beta must lie in (0, 1], got {beta}")
    if np.shape(v_old) != np.shape(v_theta):
        raise NftError(f"shape mismatch {np.shape(v_old)} vs {np.shape(v_theta)}")
    v_pos = ops.add(ops.mul(v_old, 1.0 - beta), ops.mul(v_theta, beta))
    v_neg = ops.sub(ops.mul(v_old, 1.0 + beta), ops.mul(v_theta, beta))
    return v_pos, v_neg


def nft_loss(v_theta, v_old, v_true, r, beta):
    """Reward-weighted squared error of the two implicit targets.

    ``r`` is a scalar or one value per leading batch row. ``v_old`` and
    ``v_true`` are treated as constants.
    """
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0.0) or np.any(r > 1.0) or not np.all(np.isfinite(r)):
        raise NftError(f"optimality probabilities must lie in [0, 1], got {r}")
    v_old = ops.stop_gradient(v_old).data
    v_true = np.asarray(getattr(v_true, "data", v_true), dtype=np.float64)
    v_pos, v_neg = implicit_targets(v_old, v_theta, beta)
    if r.ndim:
        r = r.reshape(r.shape + (1,) * (np.ndim(v_true) - r.ndim))
    pos = ops.mul(ops.square(ops.sub(v_pos, v_true)), r)
    neg = ops.mul(ops.square(ops.sub(v_neg, v_true)), 1.0 - r)
    return ops.mean(ops.add(pos, neg))


def total_loss(nft, diff, lam):
    if not lam > 0:
        raise NftError(f"lambda must be positive, got {lam}")
    return ops.add(nft, ops.mul(diff, lam))


def _select(rewards, cfg):
    idx = np.arange(len(rewards))
    if cfg.pairing == "top_bottom" and len(rewards) > 2 * cfg.n_pairs:
        order = np.argsort(rewards, kind="stable")
        idx = np.sort(np.concatenate([order[:cfg.n_pairs], order[-cfg.n_pairs:]]))
    return idx


@dataclass
class RoundReport:
    round: int
    cases: int
    skipped: int
    reward_before: float
    reward_after: float
    mae: float
    hinge_violations: int
    loss: float

    def row(self):
        return [self.round, self.cases, self.skipped, self.reward_before, self.reward_after,
                self.mae, self.hinge_violations, self.loss]


REPORT_COLUMNS = ["round", "cases", "skipped", "mean_r_raw_before", "mean_r_raw_after",
                  "mean_mae_gy", "hinge_violations", "mean_loss"]


def append_round_report(path, report):
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(REPORT_COLUMNS)
        w.writerow(report.row())


def _score_candidates(xs, case, spec, cfg):
    ref = case.volumes["dose"].values
    spec = rescale_prescription(spec, case.prescription_gy)
    rewards, maes, violated = [], [], 0
    for x in xs:
        rep = raw_reward(to_gy(x, case), case, spec, reference=ref)
        rewards.append(rep.anchored(cfg.w_hinge, cfg.w_mae))
        maes.append(rep.mae_anchor)
        violated += int(rep.hinge > 0)
    return np.array(rewards), np.array(maes), violated


def post_train_round(model, snapshot, cases, spec_for, cfg, optimizer, seed, round_index=0,
                     stats=None, sched=None, site_stats=None, measure_after=True):
    """One pass over ``cases`` with one optimizer step per case.

    ``spec_for(case)`` returns the scorecard for a case. ``snapshot`` is a
    frozen copy of ``model`` providing both candidates and ``v_old``.
    Returns ``(RoundReport, stats)``; ``model.params`` is updated in place.
    """
    sched = sched or NoiseSchedule()
    stats = stats if stats is not None else RewardStats()
    before, after_pending, maes, losses = [], [], [], []
    skipped, violations = 0, 0
    for ci, case in enumerate(cases):
        rng = stream(seed, "nft", round_index, ci)
        seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=cfg.k)]
        stack = normalized_stack(case)
        xs = sample_candidates(snapshot, case, seeds, cfg.steps, sched, stack=stack)
        try:
            rewards, cand_mae, viol = _score_candidates(xs, case, spec_for(case), cfg)
        except ScorecardError:
            skipped += 1
            continue
        group = case.site
        if cfg.site_normalize and site_stats is not None:
            site_stats.update(group, rewards)
            rewards = (rewards - site_stats.mean[group]) / site_stats.dispersion(group)
        z = stats.update(group, rewards)
        mean = float(rewards.mean()) if len(rewards) > 1 else stats.mean[group]
        r = optimality_probability(rewards, mean, z)
        keep = _select(rewards, cfg)
        before.extend(rewards.tolist())
        maes.extend(cand_mae.tolist())
        violations += viol
        after_pending.append((case, stack))

        x0 = xs[keep]
        n = len(keep)
        t = sample_train_time(rng, n, sched)
        eps = rng.standard_normal(x0.shape)
        xt = forward_diffuse(x0, eps, t, sched)
        v_true = v_target(x0, eps, t, sched)
        cond = case_conditioning(case, DOSE_TASK, n, stack)
        v_old = snapshot(xt, t, cond)
        ref_x0 = stack[None, 0]
        diff_batch = {
            "x0": ref_x0,
            "conditions": case_conditioning(case, DOSE_TASK, 1, stack),
            "t": sample_train_time(rng, 1, sched),
            "eps": rng.standard_normal(ref_x0.shape),
        }
        rk = r[keep]

        def objective(P):
            net = model.bind(P)
            l_nft = nft_loss(net(xt, t, cond), v_old, v_true, rk, cfg.beta)
            l_diff = diffusion_loss(net, diff_batch, sched, rng)
            return total_loss(l_nft, l_diff, cfg.lam)

        value, grads = evaluate_with_gradients(objective, model.params)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite post-training loss on case {case.id}")
        optimizer.update(model.params, grads)
        losses.append(value)

    after = []
    for ci, (case, stack) in enumerate(after_pending if measure_after else []):
        rng = stream(seed, "nft-eval", round_index, ci)
        seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=cfg.k)]
        xs = sample_candidates(model, case, seeds, cfg.steps, sched, stack=stack)
        rewards, _, _ = _score_candidates(xs, case, spec_for(case), cfg)
        after.extend(rewards.tolist())
    report = RoundReport(
        round=round_index,
        cases=len(after_pending),
        skipped=skipped,
        reward_before=float(np.mean(before)) if before else float("nan"),
        reward_after=float(np.mean(after)) if after else float("nan"),
        mae=float(np.mean(maes)) if maes else float("nan"),
        hinge_violations=violations,
        loss=float(np.mean(losses)) if losses else float("nan"),
    )
    return report, stats

