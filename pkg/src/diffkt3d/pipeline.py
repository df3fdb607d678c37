"""Training stages, evaluation metrics and reporting.

Stage A trains on random target/condition assignments, stage B fine-tunes
on dose prediction from all other modalities, stage C runs scorecard-aligned
post-training rounds on top of a supervised checkpoint.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from .any2any import Any2AnyDiT, Conditioning, DitConfig, load_checkpoint, sample_task, save_checkpoint
from .diffusion import NoiseSchedule, diffusion_loss
from .inference import DOSE_TASK, remaining_one_task, sample_candidates, to_gy, xpred_dose
from .numcore import evaluate_with_gradients, stream
from .optim import Adam, AdamConfig
from .phantom import MASK_MODALITIES, MODALITIES, denormalize, normalized_stack
from .scardnft import NftConfig, RewardStats, append_round_report, post_train_round
from .scorecard import ScorecardError, default_spec, raw_reward, rescale_prescription

STAGES = ("A", "B", "C")
LOSS_COLUMNS = ["step", "loss", "lr", "grad_norm"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "A"
    epochs: int = 1
    steps: int | None = None          # overrides epochs when set
    batch_size: int = 8
    lr: float = 1e-4
    warmup_steps: int = 500
    clip_norm: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: str = "none"            # or "cosine" over the run length
    seed: int = 0
    prediction: str = "v"             # "x0" trains a direct regressor
    schedule_kind: str = "vp"
    flow_shift: float = 3.0
    checkpoint_every: int = 0
    nft: dict = field(default_factory=dict)
    nft_cases: int | None = None      # cases per post-training round

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError("lr_decay must be 'none' or 'cosine'")
        if self.prediction not in ("v", "x0"):
            raise ValueError("prediction must be 'v' or 'x0'")
        self.adam()  # validates optimizer fields

    def adam(self, total_steps=0):
        decay = total_steps if self.lr_decay == "cosine" else 0
        return AdamConfig(self.lr, self.warmup_steps, self.clip_norm, self.beta1, self.beta2, self.eps,
                          decay)

    def schedule(self):
        return NoiseSchedule(self.schedule_kind, self.flow_shift)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    model: Any2AnyDiT
    curve: list
    step: int
    seconds: float


def _write_curve(path, rows, columns=LOSS_COLUMNS):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _read_curve(path, upto):
    rows = []
    with Path(path).open() as fh:
        for rec in csv.DictReader(fh):
            step = int(rec["step"])
            if step < upto:
                rows.append([step, float(rec["loss"]), float(rec["lr"]), float(rec["grad_norm"])])
    return rows


def _batch(stacks, idx, task):
    cond = stacks[idx].copy()
    t = MODALITIES.index(task.target)
    x0 = cond[:, t].copy()
    cond[:, t] = 0.0
    return x0, Conditioning(cond, task)


def train(model, cases, cfg, out_dir=None, resume=True, log=None, spec_for=None):
    """Run one training stage; returns :class:`TrainResult`.

    With ``out_dir`` the final checkpoint, loss curve and (every
    ``checkpoint_every`` steps) a resumable checkpoint are written there.
    """
    if not cases:
        raise TrainingError("training dataset is empty")
    if cfg.stage == "C":
        return _train_nft(model, cases, cfg, out_dir, log, spec_for)
    t0 = time.time()
    sched = cfg.schedule()
    out = Path(out_dir) if out_dir is not None else None
    stacks = np.stack([normalized_stack(c) for c in cases])
    n = len(cases)
    bs = min(cfg.batch_size, n)
    per_epoch = n // bs
    total = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    opt = Adam(cfg.adam(total))
    curve, start = [], 0
    if out is not None and resume and (out / "resume").exists():
        model, start, state, _ = load_checkpoint(out / "resume")
        opt = Adam(cfg.adam(total), state)
        curve = _read_curve(out / "loss.csv", start)
    stage = "any2any" if cfg.stage == "A" else "dose_only"
    for step in range(start, total):
        epoch, pos = divmod(step, per_epoch)
        perm = stream(cfg.seed, "epoch", epoch).permutation(n)
        idx = perm[pos * bs:(pos + 1) * bs]
        rng = stream(cfg.seed, "train", step)
        task = sample_task(rng, stage)
        x0, cond = _batch(stacks, idx, task)
        batch = {"x0": x0, "conditions": cond}

        def objective(P):
            return diffusion_loss(model.bind(P), batch, sched, rng, cfg.prediction)

        value, grads = evaluate_with_gradients(objective, model.params)
        if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"non-finite loss {value} at step {step} (target {task.target}, "
                                f"{len(task.conditions)} conditions, cases {idx.tolist()})")
        info = opt.update(model.params, grads)
        curve.append([step, value, info["lr"], info["grad_norm"]])
        if log is not None:
            log(step, value, info)
        done = step + 1
        if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < total:
            save_checkpoint(out / "resume", model, done, opt.state_dict(), {"stage": cfg.stage})
            _write_curve(out / "loss.csv", curve)
    if out is not None:
        save_checkpoint(out / "checkpoint", model, total, opt.state_dict(),
                        {"stage": cfg.stage, "train_config": cfg.to_dict()})
        _write_curve(out / "loss.csv", curve)
    return TrainResult(model, curve, total, time.time() - t0)


def _train_nft(model, cases, cfg, out_dir, log, spec_for):
    t0 = time.time()
    nft = NftConfig(**cfg.nft)
    spec_for = spec_for or (lambda c: default_spec(c.site))
    opt = Adam(cfg.adam())
    stats = RewardStats()
    site_stats = RewardStats() if nft.site_normalize else None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        report_path = out / "nft_rounds.csv"
        if report_path.exists():
            report_path.unlink()
    subset = cases if cfg.nft_cases is None else cases[:cfg.nft_cases]
    rows = []
    for rnd in range(cfg.epochs):
        snapshot = model.copy()
        order = stream(cfg.seed, "nft-order", rnd).permutation(len(subset))
        report, stats = post_train_round(model, snapshot, [subset[i] for i in order], spec_for, nft,
                                         opt, cfg.seed, rnd, stats, cfg.schedule(), site_stats,
                                         measure_after=out is not None)
        rows.append(report)
        if log is not None:
            log(rnd, report.loss, {"lr": cfg.lr, "grad_norm": float("nan"), "report": report})
        if out is not None:
            append_round_report(out / "nft_rounds.csv", report)
    if out is not None:
        save_checkpoint(out / "checkpoint", model, opt.step, opt.state_dict(),
                        {"stage": "C", "train_config": cfg.to_dict()})
    return TrainResult(model, rows, opt.step, time.time() - t0)


# ---------------------------------------------------------------------------
# metrics

def mae_thresholded(pred, ref, body, threshold=5.0):
    """Mean |pred - ref| over body voxels whose reference is >= ``threshold`` Gy.

    Returns ``None`` when no voxel qualifies.
    """
    pred, ref = np.asarray(pred, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    sel = np.asarray(body, dtype=bool) & (ref >= threshold)
    if not sel.any():
        return None
    return float(np.mean(np.abs(pred[sel] - ref[sel])))


def masked_mae(pred, ref, body):
    sel = np.asarray(body, dtype=bool)
    return float(np.mean(np.abs(np.asarray(pred)[sel] - np.asarray(ref)[sel])))


def dice(pred_mask, ref_mask):
    a, b = np.asarray(pred_mask, dtype=bool), np.asarray(ref_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def psnr(pred, ref, body, peak):
    """PSNR in dB over body voxels; ``inf`` for a perfect prediction."""
    sel = np.asarray(body, dtype=bool)
    mse = float(np.mean((np.asarray(pred)[sel] - np.asarray(ref)[sel]) ** 2))
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


@dataclass
class TTestResult:
    t: float
    p: float
    n: int
    degenerate: bool = False


def paired_t_test(a, b):
    """Two-sided paired t-test on ``b - a``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = b - a
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        return TTestResult(float("nan"), float("nan"), n, True)
    t = float(np.mean(d) / (sd / np.sqrt(n)))
    p = float(2.0 * sps.t.sf(abs(t), n - 1))
    return TTestResult(t, p, n)


def constant_baseline(train_cases):
    """Mean normalized dose inside the body over the training cases."""
    vals = [normalized_stack(c)[MODALITIES.index("dose")][c.mask("body")] for c in train_cases]
    return float(np.mean(np.concatenate(vals)))


def baseline_dose(case, level):
    return to_gy(np.full(case.shape, level), case)


# ---------------------------------------------------------------------------
# inference-time selection

def selection_reward(dose, case, spec, w_hinge=0.0):
    """Scorecard ``r_raw`` (optionally minus a weighted hinge); needs no reference dose."""
    rep = raw_reward(dose, case, rescale_prescription(spec, case.prescription_gy))
    return rep.anchored(w_hinge, 0.0)


def best_of_n(model, case, n, spec, seeds=None, steps=10, sched=None, select="scorecard"):
    """Sample ``n`` candidates and keep the best one.

    ``select="scorecard"`` ranks by the reference-free scorecard reward;
    ``select="mae"`` ranks by reference MAE and is meant for analysis only.
    Returns ``(dose_gy, index, criteria)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    seeds = list(range(n)) if seeds is None else list(seeds)[:n]
    if len(seeds) < n:
        raise ValueError("need one seed per candidate")
    xs = sample_candidates(model, case, seeds, steps, sched)
    doses = [to_gy(x, case) for x in xs]
    if n == 1:
        return doses[0], 0, [float("nan")]
    ref, body = case.volumes["dose"].values, case.mask("body")
    if select == "scorecard":
        crit = [selection_reward(d, case, spec) for d in doses]
    elif select == "mae":
        crit = [-(mae_thresholded(d, ref, body) or 0.0) for d in doses]
    else:
        raise ValueError(f"unknown selection criterion {select!r}")
    best = int(np.argmax(crit))
    return doses[best], best, crit


# ---------------------------------------------------------------------------
# evaluation

EVAL_COLUMNS = ["case_id", "site", "prescription_gy", "mae_gy", "mae_body_gy", "psnr_db",
                "score", "reward", "hinge", "selected_index"]


@dataclass
class EvalReport:
    rows: list
    summary: dict
    extra_columns: list = field(default_factory=list)

    @property
    def columns(self):
        return EVAL_COLUMNS + self.extra_columns

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                            for k in self.columns})

    def write_json(self, path):
        Path(path).write_text(json.dumps(_jsonable(self.summary), indent=2, sort_keys=True))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def _mean(values):
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(vals)) if vals else None


def evaluate(model, cases, steps=10, best_of=1, spec_for=None, sched=None, seed=0,
             compare_steps=None, xpred_model=None, select="scorecard"):
    """Per-case dose metrics plus summary means.

    ``compare_steps`` adds an ``mae_gy_<k>step`` column per listed step
    count; ``xpred_model`` adds a single-step x0-regression column.
    """
    spec_for = spec_for or (lambda c: default_spec(c.site))
    rows, extra = [], []
    skipped = 0
    for k in compare_steps or ():
        extra.append(f"mae_gy_{k}step")
    if xpred_model is not None:
        extra.append("mae_gy_xpred")
    for ci, case in enumerate(cases):
        seeds = [seed * 100003 + ci * 101 + j for j in range(best_of)]
        spec = spec_for(case)
        ref, body = case.volumes["dose"].values, case.mask("body")
        dose, sel, _ = best_of_n(model, case, best_of, spec, seeds, steps, sched, select)
        row = {
            "case_id": case.id,
            "site": case.site,
            "prescription_gy": case.prescription_gy,
            "mae_gy": mae_thresholded(dose, ref, body),
            "mae_body_gy": masked_mae(dose, ref, body),
            "psnr_db": psnr(dose, ref, body, case.dose_norm_max_gy),
            "selected_index": sel,
        }
        try:
            rep = raw_reward(dose, case, rescale_prescription(spec, case.prescription_gy))
            row.update(score=rep.r_raw, reward=rep.anchored(1.0, 0.0), hinge=rep.hinge)
        except ScorecardError:
            skipped += 1
            row.update(score=None, reward=None, hinge=None)
        for k in compare_steps or ():
            d = to_gy(sample_candidates(model, case, seeds[:1], k, sched)[0], case)
            row[f"mae_gy_{k}step"] = mae_thresholded(d, ref, body)
        if xpred_model is not None:
            row["mae_gy_xpred"] = mae_thresholded(xpred_dose(xpred_model, case, seeds[0]), ref, body)
        rows.append(row)
    summary = {
        "n_cases": len(rows),
        "scorecard_skipped": skipped,
        "steps": steps,
        "best_of": best_of,
        "mean_mae_gy": _mean([r["mae_gy"] for r in rows]),
        "mean_mae_body_gy": _mean([r["mae_body_gy"] for r in rows]),
        "mean_psnr_db": _mean([r["psnr_db"] for r in rows]),
        "mean_score": _mean([r["score"] for r in rows]),
        "mean_reward": _mean([r["reward"] for r in rows]),
    }
    for col in extra:
        summary[f"mean_{col}"] = _mean([r[col] for r in rows])
    return EvalReport(rows, summary, extra)


def compare_reports(a, b, column="mae_gy"):
    """Paired t-test of a per-case column between two reports on the same cases."""
    ids_a = [r["case_id"] for r in a.rows]
    if ids_a != [r["case_id"] for r in b.rows]:
        raise ValueError("reports cover different cases")
    res = paired_t_test(a.column(column), b.column(column))
    return {"column": column, "t": res.t, "p": res.p, "n": res.n, "degenerate": res.degenerate}


def remaining_one_eval(model, cases, steps=10, seed=0, sched=None):
    """Predict every modality from all the others.

    Mask modalities are scored with Dice after thresholding at 0 in the
    normalized space; dose is scored with the thresholded MAE in Gy; the
    remaining channels with the body-masked MAE of normalized values.
    """
    table = {}
    for m in MODALITIES:
        task = remaining_one_task(m)
        dices, maes = [], []
        for ci, case in enumerate(cases):
            stack = normalized_stack(case)
            x = sample_candidates(model, case, [seed * 100003 + ci], steps, sched, task, stack)[0]
            body = case.mask("body")
            if m in MASK_MODALITIES:
                dices.append(dice(x > 0.0, stack[MODALITIES.index(m)] > 0.0))
            elif m == "dose":
                maes.append(mae_thresholded(to_gy(x, case), case.volumes["dose"].values, body))
            else:
                maes.append(masked_mae(np.clip(x, -1, 1), stack[MODALITIES.index(m)], body))
        table[m] = {
            "dice": _mean(dices) if dices else None,
            "mae": _mean(maes) if maes else None,
            "unit": "Gy" if m == "dose" else ("normalized" if maes else None),
            "n": len(cases),
        }
    return table


def load_model(path):
    model, _, _, extra = load_checkpoint(path)
    return model, extra


def new_model(cfg=None, seed=0):
    return Any2AnyDiT(cfg or DitConfig(), seed=seed)


def denormalized_target(case, modality, x):
    return denormalize(np.clip(x, -1, 1), modality, case.prescription_gy)
