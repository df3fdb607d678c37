import csv
import json
import math
import shutil

import numpy as np
import pytest
from scipy import stats as sps

from diffkt3d.any2any import Any2AnyDiT, DitConfig, init_params, load_checkpoint
from diffkt3d.optim import Adam, AdamConfig, clip_by_global_norm, global_norm, scheduled_lr, warmup_lr
from diffkt3d.phantom import PhantomConfig, generate_dataset
from diffkt3d.pipeline import (
    EVAL_COLUMNS,
    TrainConfig,
    TrainingError,
    best_of_n,
    compare_reports,
    constant_baseline,
    dice,
    evaluate,
    mae_thresholded,
    masked_mae,
    paired_t_test,
    psnr,
    remaining_one_eval,
    selection_reward,
    train,
)
from diffkt3d.inference import sample_dose
from diffkt3d.scorecard import default_spec

TINY = DitConfig(volume_shape=(8, 12, 12), d_model=16, n_heads=1, n_blocks=1)


@pytest.fixture(scope="module")
def tiny_cases():
    return generate_dataset(6, seed=70, config=PhantomConfig(shape=(8, 12, 12), n_oars=2))


def tiny_model(seed=0, scale=0.05):
    rng = np.random.default_rng(seed)
    params = {k: v + scale * rng.standard_normal(v.shape) for k, v in init_params(TINY, seed).items()}
    return Any2AnyDiT(TINY, params)


# ---------------------------------------------------------------------------
# optimizer

def test_warmup_schedule():
    assert warmup_lr(0, 1e-4, 500) == pytest.approx(2e-7)
    assert warmup_lr(499, 1e-4, 500) == 1e-4
    assert warmup_lr(10_000, 1e-4, 500) == 1e-4
    assert warmup_lr(0, 1e-4, 0) == 1e-4


def test_cosine_decay_schedule():
    cfg = AdamConfig(lr=1e-3, warmup_steps=10, decay_steps=110)
    assert scheduled_lr(4, cfg) == warmup_lr(4, 1e-3, 10)
    assert scheduled_lr(10, cfg) == pytest.approx(1e-3)
    assert scheduled_lr(60, cfg) == pytest.approx(5e-4)
    assert scheduled_lr(110, cfg) == pytest.approx(0.0, abs=1e-18)
    lrs = [scheduled_lr(s, cfg) for s in range(10, 111)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    flat = AdamConfig(lr=1e-3, warmup_steps=10)
    assert scheduled_lr(500, flat) == 1e-3
    with pytest.raises(ValueError):
        TrainConfig(lr_decay="step")


def test_clip_contract(rng):
    for _ in range(20):
        grads = {"a": rng.normal(0, 5, (3, 3)), "b": rng.normal(0, 5, 4)}
        clipped, before = clip_by_global_norm(grads, 0.1)
        assert global_norm(clipped) <= 0.1 + 1e-9
        assert before == pytest.approx(global_norm(grads))
    small = {"a": np.full(2, 1e-3)}
    assert clip_by_global_norm(small, 0.1)[0] is small


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0, -1.0])}
    opt = Adam(AdamConfig(lr=0.01, warmup_steps=0, clip_norm=None))
    opt.update(params, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(params["w"], [0.99, -0.99], rtol=1e-6)
    state = opt.state_dict()
    again = Adam(opt.cfg, state)
    assert again.step == 1 and again.m["w"].tobytes() == opt.m["w"].tobytes()


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.warmup_steps, cfg.clip_norm, cfg.beta1, cfg.beta2, cfg.eps) == \
        (1e-4, 500, 0.1, 0.9, 0.999, 1e-8)
    with pytest.raises(ValueError):
        TrainConfig(stage="D")
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


# ---------------------------------------------------------------------------
# training

def _train(cases, stage="A", steps=6, out=None, **kw):
    cfg = TrainConfig(stage=stage, steps=steps, batch_size=2, lr=3e-3, warmup_steps=2, seed=5, **kw)
    return train(tiny_model(), cases, cfg, out_dir=out)


def test_training_is_deterministic(tiny_cases):
    a = _train(tiny_cases)
    b = _train(tiny_cases)
    assert a.curve == b.curve
    for k in a.model.params:
        assert a.model.params[k].tobytes() == b.model.params[k].tobytes()


def test_clipped_gradient_norm_bound(tiny_cases):
    norms = []
    cfg = TrainConfig(stage="B", steps=5, batch_size=2, lr=1e-3, warmup_steps=0, clip_norm=0.1)
    train(tiny_model(), tiny_cases, cfg, log=lambda s, v, info: norms.append(info["clipped_norm"]))
    assert len(norms) == 5 and max(norms) <= 0.1 + 1e-9


def test_fixed_batch_loss_decreases(tiny_cases):
    cfg = TrainConfig(stage="A", steps=50, batch_size=6, lr=3e-3, warmup_steps=5, clip_norm=1.0)
    res = train(tiny_model(), tiny_cases, cfg)
    losses = np.array([r[1] for r in res.curve])
    assert losses[-10:].mean() < losses[:10].mean()


def test_outputs_and_resume_match_uninterrupted(tiny_cases, tmp_path):
    full = _train(tiny_cases, steps=8, out=tmp_path / "full", checkpoint_every=4)
    rows = list(csv.reader((tmp_path / "full" / "loss.csv").open()))
    assert rows[0] == ["step", "loss", "lr", "grad_norm"] and len(rows) == 9
    model, step, state, extra = load_checkpoint(tmp_path / "full" / "checkpoint")
    assert step == 8 and extra["stage"] == "A" and "adam.step" in state

    # interrupted run: stop after 4 steps, then resume to 8
    _train(tiny_cases, steps=8, out=tmp_path / "part", checkpoint_every=4)
    part = tmp_path / "part"
    shutil.rmtree(part / "checkpoint")
    resumed = train(tiny_model(seed=99), tiny_cases,
                    TrainConfig(stage="A", steps=8, batch_size=2, lr=3e-3, warmup_steps=2, seed=5,
                                checkpoint_every=4), out_dir=part)
    assert abs(resumed.curve[-1][1] - full.curve[-1][1]) <= 1e-6
    assert resumed.curve == full.curve


def test_empty_dataset_rejected():
    with pytest.raises(TrainingError):
        train(tiny_model(), [], TrainConfig())


def test_non_finite_loss_aborts(tiny_cases):
    model = tiny_model()
    model.params["head.b"][:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, tiny_cases, TrainConfig(steps=1, batch_size=2))


def test_stage_c_round(tiny_cases, tmp_path):
    cfg = TrainConfig(stage="C", epochs=1, lr=1e-4, warmup_steps=0, nft={"k": 2, "steps": 2},
                      nft_cases=2)
    res = train(tiny_model(), tiny_cases, cfg, out_dir=tmp_path)
    assert len(res.curve) == 1 and res.curve[0].cases == 2
    assert (tmp_path / "nft_rounds.csv").exists() and (tmp_path / "checkpoint").exists()


# ---------------------------------------------------------------------------
# metrics

def test_mae_thresholded():
    body = np.array([True, True, False])
    ref = np.array([4.0, 6.0, 30.0])
    assert mae_thresholded(ref, ref, body) == 0.0
    assert mae_thresholded(np.array([5.0, 8.0, 0.0]), ref, body) == 2.0
    assert mae_thresholded(np.array([5.0, 8.0, 0.0]), ref, body, threshold=0.0) == \
        masked_mae(np.array([5.0, 8.0, 0.0]), ref, body)
    assert mae_thresholded(ref, ref, np.zeros(3, bool)) is None


def test_mae_symmetry_and_order_invariance(rng):
    ref = rng.uniform(0, 70, 100)
    err = rng.normal(0, 3, 100)
    body = rng.uniform(size=100) < 0.8
    perm = rng.permutation(100)
    a = mae_thresholded(ref + err, ref, body)
    assert a == pytest.approx(mae_thresholded(ref - err, ref, body), rel=1e-12)
    assert a == pytest.approx(mae_thresholded((ref + err)[perm], ref[perm], body[perm]), rel=1e-12)


def test_dice():
    a = np.zeros(10, bool)
    assert dice(a, a) == 1.0
    a[:4] = True
    b = np.zeros(10, bool)
    b[2:6] = True
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(a, b) == 0.5


def test_psnr(rng):
    ref = rng.uniform(0, 70, 50)
    body = np.ones(50, bool)
    assert psnr(ref, ref, body, 87.5) == math.inf
    noisy = [psnr(ref + rng.uniform(-s, s, 50), ref, body, 87.5) for s in (0.5, 2.0, 8.0)]
    assert noisy[0] > noisy[1] > noisy[2]


def test_paired_t_test_examples():
    res = paired_t_test([1, 2, 3], [2, 3, 5])
    assert res.t == pytest.approx(4.0, rel=1e-12)
    # two-sided tail of a t(2) variable at 4: 1 - 4 / sqrt(4^2 + 2)
    assert res.p == pytest.approx(1 - 4 / math.sqrt(18), rel=1e-10)
    assert f"{res.p:.4g}" == "0.05719"
    a = np.arange(10.0)
    assert paired_t_test(a, a + 1).degenerate
    assert paired_t_test(a, a).degenerate
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])
    scipy_res = sps.ttest_rel([2, 3, 5, 1], [1, 2, 3, 3])
    ours = paired_t_test([1, 2, 3, 3], [2, 3, 5, 1])
    assert ours.t == pytest.approx(scipy_res.statistic) and ours.p == pytest.approx(scipy_res.pvalue)


# ---------------------------------------------------------------------------
# inference and evaluation

def test_best_of_one_is_plain_sampling(tiny_cases):
    model, case = tiny_model(), tiny_cases[0]
    spec = default_spec(case.site)
    dose, idx, _ = best_of_n(model, case, 1, spec, seeds=[17])
    assert idx == 0
    assert dose.tobytes() == sample_dose(model, case, 17).tobytes()


def test_best_of_n_selects_max_and_is_monotone(tiny_cases):
    model, case = tiny_model(scale=0.3), tiny_cases[1]
    spec = default_spec(case.site)
    best = []
    for n in (1, 2, 4, 6):
        dose, idx, crit = best_of_n(model, case, n, spec, seeds=list(range(6)), steps=3)
        chosen = selection_reward(dose, case, spec)
        if n > 1:
            assert chosen == max(crit)
        best.append(chosen)
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))


def test_evaluate_report_schema(tiny_cases, tmp_path):
    model = tiny_model()
    rep = evaluate(model, tiny_cases[:2], steps=2, compare_steps=(1,), xpred_model=model)
    rep.write_csv(tmp_path / "eval.csv")
    rep.write_json(tmp_path / "summary.json")
    header = (tmp_path / "eval.csv").read_text().splitlines()[0].split(",")
    assert header == EVAL_COLUMNS + ["mae_gy_1step", "mae_gy_xpred"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    for key in ("mean_mae_gy", "mean_score", "mean_mae_gy_1step", "mean_mae_gy_xpred"):
        assert key in summary
    rep2 = evaluate(model, tiny_cases[:2], steps=2)
    assert rep2.rows[0]["mae_gy"] == rep.rows[0]["mae_gy"]
    cmp = compare_reports(rep, rep2)
    assert cmp["degenerate"]


def test_constant_baseline_in_range(tiny_cases):
    c = constant_baseline(tiny_cases)
    assert -1.0 < c < 1.0


def test_remaining_one_table(tiny_cases):
    table = remaining_one_eval(tiny_model(), tiny_cases[:2], steps=2)
    assert set(table) == {"ct", "ptv", "oar", "body", "beam", "angle", "dose"}
    assert table["body"]["dice"] is not None and 0.0 <= table["body"]["dice"] <= 1.0
    assert table["dose"]["unit"] == "Gy" and table["dose"]["mae"] is not None
