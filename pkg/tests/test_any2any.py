import itertools

import numpy as np
import pytest

from diffkt3d.any2any import (
    Any2AnyDiT,
    Conditioning,
    DitConfig,
    ModelError,
    RopeConfig,
    RopeError,
    TaskAssignment,
    TokenGrid,
    apply_rope,
    build_token_grid,
    dit_forward,
    embed_time,
    fuse_conditioning,
    init_params,
    load_checkpoint,
    patch_embed,
    patchify,
    predict,
    rope4d_embed,
    rope_freqs,
    sample_task,
    save_checkpoint,
    unpatchify,
)
from diffkt3d.diffusion import NoiseSchedule, diffusion_loss
from diffkt3d.numcore import grad_check, ops, stream
from diffkt3d.phantom import MODALITIES

DOSE_TASK = TaskAssignment("dose", tuple(m for m in MODALITIES if m != "dose"))


def randomized(cfg, seed=0, scale=0.2):
    """Parameters with every tensor non-zero so all paths carry signal."""
    rng = np.random.default_rng(seed)
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in init_params(cfg, seed).items()}


# ---------------------------------------------------------------------------
# rotary embedding

def test_rope_freqs_values():
    cfg = RopeConfig(split=(4, 4, 4, 4), thetas=(10000.0, 4.0, 4.0, 4.0))
    f = rope_freqs("S", cfg)
    assert f[0] == 1.0
    assert f[1] == pytest.approx(0.01, rel=1e-15)
    assert len(f) == 2


def test_rope_lowest_frequency_spans_axis():
    cfg = RopeConfig(split=(4, 2, 4, 4), thetas=(7.0, 8.0, 8.0, 8.0))
    # with two pairs the slowest wavelength is 2 pi sqrt(theta): the same order as the extent
    wavelength = 2 * np.pi / rope_freqs("W", cfg)[-1]
    assert 8.0 <= wavelength <= 2 * np.pi * 8.0


def test_rope_odd_axis_rejected():
    with pytest.raises(RopeError):
        rope_freqs("H", RopeConfig(split=(4, 3, 4, 4)))
    with pytest.raises(RopeError):
        RopeConfig(thetas=(0.0, 1.0, 1.0, 1.0))


def test_rope_embed_shapes_and_axis_separation():
    cfg = RopeConfig()
    assert np.all(rope4d_embed(np.zeros((3, 4)), cfg) == 0.0)
    ph = rope4d_embed(np.array([[0, 1, 2, 3], [5, 1, 2, 3]]), cfg)
    assert ph.shape == (2, cfg.d // 2)
    np.testing.assert_array_equal(ph[0, 2:], ph[1, 2:])
    with pytest.raises(RopeError):
        rope4d_embed(np.array([[-1, 0, 0, 0]]), cfg)


def test_rope_identity_and_isometry(rng):
    q, k = rng.standard_normal((2, 5, 16))
    q0, k0 = apply_rope(q, k, np.zeros((5, 8)))
    np.testing.assert_array_equal(q0.data, q)
    qr, _ = apply_rope(q, k, rng.uniform(0, 50, (5, 8)))
    np.testing.assert_allclose(np.linalg.norm(qr.data, axis=-1), np.linalg.norm(q, axis=-1), rtol=1e-12)
    with pytest.raises(RopeError):
        apply_rope(q[..., :12], k[..., :12], np.zeros((5, 8)))


def test_rope_logits_depend_only_on_coordinate_differences():
    cfg = RopeConfig(split=(4, 4, 4, 4), thetas=(7.0, 3.0, 3.0, 2.0))
    coords = np.array(list(itertools.product(range(3), range(3), range(3), range(2))))
    ph = rope4d_embed(coords, cfg)
    rng = np.random.default_rng(0)
    for _ in range(16):
        q, k = rng.standard_normal((2, cfg.d))
        qr, kr = apply_rope(np.tile(q, (len(coords), 1)), np.tile(k, (len(coords), 1)), ph)
        logits = qr.data @ kr.data.T
        seen = {}
        for i, j in itertools.product(range(len(coords)), repeat=2):
            key = tuple(coords[i] - coords[j])
            if key in seen:
                assert abs(seen[key] - logits[i, j]) < 1e-9
            else:
                seen[key] = logits[i, j]


# ---------------------------------------------------------------------------
# tokens and conditioning

def test_patch_embed_token_count_and_separation():
    cfg = DitConfig()
    params = init_params(cfg, 0)
    vol = np.random.default_rng(0).standard_normal((1, 16, 16, 16))
    tok_ct = patch_embed(params, "ct", vol, cfg)
    tok_ptv = patch_embed(params, "ptv", vol, cfg)
    assert tok_ct.shape == (1, 64, cfg.d_model)
    assert not np.allclose(tok_ct.data, tok_ptv.data)


def test_patchify_round_trip_and_divisibility(rng):
    vol = rng.standard_normal((2, 8, 12, 16))
    back = unpatchify(patchify(vol, 4), (8, 12, 16), 4)
    np.testing.assert_array_equal(back.data, vol)
    with pytest.raises(ModelError):
        patchify(np.zeros((1, 6, 8, 8)), 4)
    with pytest.raises(ModelError):
        DitConfig(volume_shape=(12, 12, 10))


def test_fuse_conditioning_identities(rng):
    cfg = DitConfig(volume_shape=(8, 8, 8), n_blocks=1)
    params = randomized(cfg)
    e1 = embed_time(params, np.array([0.3]), cfg)
    e2 = embed_time(params, np.array([0.7]), cfg)
    ec = rng.standard_normal((1, cfg.d_model))
    np.testing.assert_array_equal(fuse_conditioning(e1, np.zeros_like(ec)).data, e1.data)
    np.testing.assert_array_equal(fuse_conditioning(e1).data, e1.data)
    f1, f2 = fuse_conditioning(e1, ec), fuse_conditioning(e2, ec)
    assert f1.shape == e1.shape
    np.testing.assert_allclose(f2.data - f1.data, e2.data - e1.data, atol=1e-14)


def _setup(cfg, task=DOSE_TASK, batch=1, seed=0):
    rng = np.random.default_rng(seed)
    stack = rng.uniform(-1, 1, (batch, 7) + cfg.volume_shape)
    xt = rng.standard_normal((batch,) + cfg.volume_shape)
    return Conditioning(stack, task), xt


def test_forward_shape_and_token_order():
    cfg = DitConfig(volume_shape=(8, 8, 8), n_blocks=2)
    params = randomized(cfg)
    cond, xt = _setup(cfg, batch=2)
    grid = build_token_grid(params, cfg, xt, cond)
    assert grid.tokens.shape == (2, 7 * 8, cfg.d_model)
    assert np.all(np.diff(grid.coords[:, 0]) >= 0)
    out = predict(params, cfg, xt, np.array([0.5, 0.5]), cond)
    assert out.shape == xt.shape


def test_empty_target_slot_rejected():
    cfg = DitConfig(volume_shape=(8, 8, 8), n_blocks=1)
    params = randomized(cfg)
    cond, xt = _setup(cfg)
    grid = build_token_grid(params, cfg, xt, cond)
    bad = TokenGrid(grid.tokens, grid.coords, grid.roles, target_slot=9)
    with pytest.raises(ModelError):
        dit_forward(params, bad, embed_time(params, np.array([0.5]), cfg), cfg)


def test_condition_slot_permutation_invariance():
    cfg = DitConfig(volume_shape=(8, 8, 8), n_blocks=2)
    params = randomized(cfg)
    cond, xt = _setup(cfg)
    grid = build_token_grid(params, cfg, xt, cond)
    e = embed_time(params, np.array([0.4]), cfg)
    ref = dit_forward(params, grid, e, cfg).data
    perm = np.random.default_rng(3).permutation(len(grid.coords))
    shuffled = TokenGrid(ops.take(grid.tokens, (slice(None), perm)), grid.coords[perm],
                         grid.roles[perm], grid.target_slot)
    out = dit_forward(params, shuffled, e, cfg).data
    assert np.max(np.abs(out - ref)) < 1e-6


def test_role_flag_sensitivity():
    cfg = DitConfig(volume_shape=(8, 8, 8), n_blocks=1)
    cond, xt = _setup(cfg)
    e_args = np.array([0.5])
    for params, should_change in ((randomized(cfg), True),
                                  ({**randomized(cfg), "role.tar": np.zeros(cfg.d_model),
                                    "role.cond": np.zeros(cfg.d_model)}, False)):
        grid = build_token_grid(params, cfg, xt, cond)
        e = embed_time(params, e_args, cfg)
        ref = dit_forward(params, grid, e, cfg).data
        roles = grid.roles.copy()
        roles[0] = 1 - roles[0]
        out = dit_forward(params, TokenGrid(grid.tokens, grid.coords, roles, grid.target_slot), e, cfg).data
        assert (np.max(np.abs(out - ref)) > 1e-9) == should_change


def test_condition_information_reaches_target():
    cfg = DitConfig(volume_shape=(8, 8, 8), n_blocks=1)
    params = randomized(cfg)
    cond, xt = _setup(cfg)
    ref = predict(params, cfg, xt, np.array([0.5]), cond).data
    for m in DOSE_TASK.conditions:
        stack = cond.stack.copy()
        stack[:, MODALITIES.index(m)] = 0.0
        out = predict(params, cfg, xt, np.array([0.5]), Conditioning(stack, DOSE_TASK)).data
        assert np.max(np.abs(out - ref)) > 1e-9, m


def test_zero_initialised_model_predicts_zero():
    cfg = DitConfig(volume_shape=(8, 8, 8), n_blocks=1)
    cond, xt = _setup(cfg)
    assert np.all(Any2AnyDiT(cfg)(xt, np.array([0.5]), cond) == 0.0)


def test_no_cross_attention_and_seven_heads():
    params = init_params(DitConfig(), 0)
    assert sum(1 for k in params if k.startswith("pe.") and k.endswith(".w")) == 7
    assert not any("cross" in k for k in params)


def test_end_to_end_loss_gradient_check():
    cfg = DitConfig(volume_shape=(4, 4, 4), patch_size=4, d_model=16, n_heads=1, n_blocks=2)
    task = TaskAssignment("dose", ("ct", "ptv", "beam"))
    cond, _ = _setup(cfg, task, batch=2)
    rng = np.random.default_rng(9)
    batch = {"x0": rng.uniform(-1, 1, (2, 4, 4, 4)), "conditions": cond,
             "t": np.array([0.3, 0.8]), "eps": rng.standard_normal((2, 4, 4, 4))}
    model = Any2AnyDiT(cfg)
    f = lambda p: diffusion_loss(model.bind(p), batch, NoiseSchedule(), None)
    assert grad_check(f, randomized(cfg, scale=0.3), max_coords=6) < 1e-4


# ---------------------------------------------------------------------------
# curriculum

def test_dose_only_stage():
    rng = stream(0, "t")
    for _ in range(20):
        task = sample_task(rng, "dose_only")
        assert task.target == "dose" and len(task.conditions) == 6


def test_any2any_target_frequencies():
    rng = stream(1, "curriculum")
    counts = dict.fromkeys(MODALITIES, 0)
    sizes = np.zeros(7)
    n = 100_000
    for _ in range(n):
        task = sample_task(rng, "any2any")
        assert task.target not in task.conditions and len(task.conditions) >= 1
        counts[task.target] += 1
        sizes[len(task.conditions)] += 1
    for m in MODALITIES:
        assert abs(counts[m] / n - 1 / 7) < 0.01
    assert np.all(np.abs(sizes[1:] / n - 1 / 6) < 0.01)


def test_task_validation():
    with pytest.raises(ModelError):
        TaskAssignment("dose", ("dose",))
    with pytest.raises(ModelError):
        TaskAssignment("mri", ())
    with pytest.raises(ModelError):
        sample_task(stream(0), "stage_z")


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    cfg = DitConfig(volume_shape=(8, 8, 8), n_blocks=1)
    model = Any2AnyDiT(cfg, randomized(cfg))
    state = {"adam.step": np.array([3.0]), "adam.m.head.w": np.full((16, 64), 0.1)}
    save_checkpoint(tmp_path / "ck", model, step=3, state=state, extra={"stage": "A"})
    back, step, st, extra = load_checkpoint(tmp_path / "ck")
    assert step == 3 and extra == {"stage": "A"} and back.cfg == cfg
    for k, v in model.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    assert st["adam.m.head.w"].tobytes() == state["adam.m.head.w"].tobytes()
