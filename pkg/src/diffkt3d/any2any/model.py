"""Any2Any diffusion transformer.

Every modality owns a patch embedding; tokens from the noised target and the
clean conditions are concatenated in slot-major order and processed by DiT
blocks with full self-attention, 4D rotary phases and FiLM modulation driven
by one shared network of the fused timestep/role signal.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from ..numcore import Tensor, ops, stream
from ..phantom import MODALITIES
from .rope import RopeConfig, apply_rope, rope4d_embed

# slot 0 is the dose; conditions follow
SLOT_ORDER = ("dose", "ct", "ptv", "oar", "body", "beam", "angle")
SLOT_OF = {m: i for i, m in enumerate(SLOT_ORDER)}
MODALITY_INDEX = {m: i for i, m in enumerate(MODALITIES)}

ROLE_CONDITION = 0
ROLE_TARGET = 1


class ModelError(ValueError):
    pass


@dataclass
class DitConfig:
    volume_shape: tuple = (16, 16, 16)
    patch_size: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 4
    ffn_mult: int = 4
    rope_split: tuple = (4, 4, 4, 4)
    n_slots: int = 7
    n_train_steps: int = 1000
    init_std: float = 0.02
    causal: bool = False

    def __post_init__(self):
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        self.rope_split = tuple(int(s) for s in self.rope_split)
        if any(s % self.patch_size for s in self.volume_shape):
            raise ModelError(f"volume shape {self.volume_shape} not divisible by patch {self.patch_size}")
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if sum(self.rope_split) != self.head_dim:
            raise ModelError(f"RoPE split {self.rope_split} must sum to head dim {self.head_dim}")
        if any(s % 2 for s in self.rope_split):
            raise ModelError("every RoPE sub-dimension must be even")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    @property
    def token_grid(self):
        return tuple(s // self.patch_size for s in self.volume_shape)

    @property
    def patch_dim(self):
        return self.patch_size ** 3

    @property
    def rope(self):
        return RopeConfig.for_grid(self.token_grid, self.n_slots, self.rope_split)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TaskAssignment:
    target: str
    conditions: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.target not in MODALITIES:
            raise ModelError(f"unknown target modality {self.target!r}")
        if self.target in self.conditions:
            raise ModelError("target modality cannot also be a condition")
        bad = [m for m in self.conditions if m not in MODALITIES]
        if bad:
            raise ModelError(f"unknown condition modalities {bad}")


@dataclass
class Conditioning:
    """Clean normalized volumes ``(B, 7, D, H, W)`` plus the task."""

    stack: np.ndarray
    task: TaskAssignment


@dataclass
class TokenGrid:
    tokens: Tensor          # (B, N, d_model)
    coords: np.ndarray      # (N, 4) integer (S, H, W, D)
    roles: np.ndarray       # (N,) ROLE_TARGET / ROLE_CONDITION
    target_slot: int


def sample_task(rng, stage):
    """Draw a target/condition assignment for one training step."""
    if stage == "dose_only":
        return TaskAssignment("dose", tuple(m for m in MODALITIES if m != "dose"))
    if stage != "any2any":
        raise ModelError(f"unknown curriculum stage {stage!r}")
    target = MODALITIES[int(rng.integers(len(MODALITIES)))]
    others = [m for m in MODALITIES if m != target]
    k = int(rng.integers(1, len(others) + 1))
    picked = rng.choice(len(others), size=k, replace=False)
    return TaskAssignment(target, tuple(others[i] for i in sorted(picked)))


# ---------------------------------------------------------------------------
# parameters

def _trunc_normal(rng, shape, std):
    return stats.truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


def init_params(cfg, seed=0):
    """Fresh parameters; modulation outputs and the output head start at zero."""
    rng = stream(seed, "init")
    D, P, F = cfg.d_model, cfg.patch_dim, cfg.ffn_mult * cfg.d_model
    p = {}

    def w(name, shape):
        p[name] = _trunc_normal(rng, shape, cfg.init_std)

    def z(name, shape):
        p[name] = np.zeros(shape)

    for m in MODALITIES:
        w(f"pe.{m}.w", (P, D))
        z(f"pe.{m}.b", (D,))
    w("role.tar", (D,))
    w("role.cond", (D,))
    w("cond.w", (D, D))
    w("temb.w1", (D, D))
    z("temb.b1", (D,))
    w("temb.w2", (D, D))
    z("temb.b2", (D,))
    z("mod.w", (D, 6 * D))
    z("mod.b", (6 * D,))
    for i in range(cfg.n_blocks):
        z(f"blocks.{i}.mod", (6, D))
        w(f"blocks.{i}.qkv.w", (D, 3 * D))
        z(f"blocks.{i}.qkv.b", (3 * D,))
        w(f"blocks.{i}.proj.w", (D, D))
        z(f"blocks.{i}.proj.b", (D,))
        w(f"blocks.{i}.fc1.w", (D, F))
        z(f"blocks.{i}.fc1.b", (F,))
        w(f"blocks.{i}.fc2.w", (F, D))
        z(f"blocks.{i}.fc2.b", (D,))
    z("head.mod.w", (D, 2 * D))
    z("head.mod.b", (2 * D,))
    z("head.w", (D, P))
    z("head.b", (P,))
    return p


# ---------------------------------------------------------------------------
# patches

def patchify(vol, p):
    """``(B, D, H, W)`` -> ``(B, n_tokens, p**3)`` in token-grid row-major order."""
    vol = np.asarray(vol, dtype=np.float64)
    b, d, h, w = vol.shape
    if d % p or h % p or w % p:
        raise ModelError(f"volume {vol.shape[1:]} not divisible by patch size {p}")
    x = vol.reshape(b, d // p, p, h // p, p, w // p, p)
    return x.transpose(0, 1, 3, 5, 2, 4, 6).reshape(b, (d // p) * (h // p) * (w // p), p ** 3)


def unpatchify(tokens, shape, p):
    """Inverse of :func:`patchify`; differentiable."""
    d, h, w = shape
    b = tokens.shape[0]
    x = ops.reshape(tokens, (b, d // p, h // p, w // p, p, p, p))
    x = ops.transpose(x, (0, 1, 4, 2, 5, 3, 6))
    return ops.reshape(x, (b, d, h, w))


def token_coords(cfg, slot):
    gd, gh, gw = cfg.token_grid
    iz, iy, ix = np.meshgrid(np.arange(gd), np.arange(gh), np.arange(gw), indexing="ij")
    n = gd * gh * gw
    return np.stack([np.full(n, slot), iy.ravel(), ix.ravel(), iz.ravel()], axis=1)


def patch_embed(params, modality, vol, cfg):
    """Tokens ``(B, n_tokens, d_model)`` from modality-specific weights."""
    patches = patchify(vol, cfg.patch_size)
    return ops.add(ops.matmul(patches, params[f"pe.{modality}.w"]), params[f"pe.{modality}.b"])


# ---------------------------------------------------------------------------
# conditioning signal

def timestep_embedding(t, dim, scale=1000.0, max_period=10000.0):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * scale
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def embed_time(params, t, cfg):
    emb = timestep_embedding(t, cfg.d_model, scale=float(cfg.n_train_steps))
    h = ops.silu(ops.add(ops.matmul(emb, params["temb.w1"]), params["temb.b1"]))
    return ops.add(ops.matmul(h, params["temb.w2"]), params["temb.b2"])


def conditioning_code(params):
    """Global code built from the condition role embedding."""
    return ops.matmul(ops.reshape(params["role.cond"], (1, -1)), params["cond.w"])


def fuse_conditioning(e_t, e_c=None):
    """``e_t + e_C``; ``e_c=None`` means no condition tokens are present."""
    if e_c is None:
        return e_t if isinstance(e_t, Tensor) else Tensor(e_t)
    return ops.add(e_t, e_c)


# ---------------------------------------------------------------------------
# forward

def build_token_grid(params, cfg, x_t, cond):
    """Assemble slot-major tokens: noised target plus clean conditions."""
    task = cond.task
    present = sorted([task.target, *task.conditions], key=SLOT_OF.get)
    parts, coords, roles = [], [], []
    n_tok = int(np.prod(cfg.token_grid))
    for m in present:
        if m == task.target:
            vol, role = x_t, ROLE_TARGET
        else:
            vol, role = cond.stack[:, MODALITY_INDEX[m]], ROLE_CONDITION
        parts.append(patch_embed(params, m, vol, cfg))
        coords.append(token_coords(cfg, SLOT_OF[m]))
        roles.append(np.full(n_tok, role))
    tokens = ops.concat(parts, axis=1)
    return TokenGrid(tokens, np.concatenate(coords), np.concatenate(roles), SLOT_OF[task.target])


def add_role_embedding(params, tokens, roles):
    """Tag every token with ``e_tar`` or ``e_cond`` according to its role flag."""
    table = ops.concat([ops.reshape(params["role.cond"], (1, -1)),
                        ops.reshape(params["role.tar"], (1, -1))], axis=0)
    return ops.add(tokens, ops.matmul(np.eye(2)[np.asarray(roles, dtype=int)], table))


def _attention(params, i, h, phases, cfg, mask):
    b, n, d = h.shape
    nh, hd = cfg.n_heads, cfg.head_dim
    qkv = ops.add(ops.matmul(h, params[f"blocks.{i}.qkv.w"]), params[f"blocks.{i}.qkv.b"])
    qkv = ops.transpose(ops.reshape(qkv, (b, n, 3, nh, hd)), (2, 0, 3, 1, 4))
    q, k, v = (ops.take(qkv, j) for j in range(3))
    q, k = apply_rope(q, k, phases)
    scores = ops.matmul(ops.mul(q, 1.0 / np.sqrt(hd)), ops.transpose(k, (0, 1, 3, 2)))
    if mask is not None:
        scores = ops.add(scores, mask)
    att = ops.matmul(ops.softmax(scores, axis=-1), v)
    att = ops.reshape(ops.transpose(att, (0, 2, 1, 3)), (b, n, d))
    return ops.add(ops.matmul(att, params[f"blocks.{i}.proj.w"]), params[f"blocks.{i}.proj.b"])


def _ffn(params, i, h):
    h = ops.gelu(ops.add(ops.matmul(h, params[f"blocks.{i}.fc1.w"]), params[f"blocks.{i}.fc1.b"]))
    return ops.add(ops.matmul(h, params[f"blocks.{i}.fc2.w"]), params[f"blocks.{i}.fc2.b"])


def _film(x, shift, scale):
    return ops.add(ops.mul(ops.layer_norm(x), ops.add(scale, 1.0)), shift)


def dit_forward(params, grid, e_tilde, cfg):
    """Predicted target volume ``(B, D, H, W)`` from a token grid and fused signal."""
    sel = np.flatnonzero(grid.coords[:, 0] == grid.target_slot)
    if sel.size == 0:
        raise ModelError("token grid has no tokens in the target slot")
    x = add_role_embedding(params, grid.tokens, grid.roles)
    b, n, D = x.shape
    phases = rope4d_embed(grid.coords, cfg.rope)
    mask = None
    if cfg.causal:
        mask = np.triu(np.full((n, n), -1e9), k=1)
    shared = ops.add(ops.matmul(ops.silu(e_tilde), params["mod.w"]), params["mod.b"])
    for i in range(cfg.n_blocks):
        m = ops.reshape(ops.add(shared, ops.reshape(params[f"blocks.{i}.mod"], (-1,))), (b, 6, D))
        sh1, sc1, g1, sh2, sc2, g2 = (ops.take(m, (slice(None), slice(j, j + 1))) for j in range(6))
        x = ops.add(x, ops.mul(g1, _attention(params, i, _film(x, sh1, sc1), phases, cfg, mask)))
        x = ops.add(x, ops.mul(g2, _ffn(params, i, _film(x, sh2, sc2))))
    hm = ops.reshape(ops.add(ops.matmul(ops.silu(e_tilde), params["head.mod.w"]), params["head.mod.b"]),
                     (b, 2, D))
    shift = ops.take(hm, (slice(None), slice(0, 1)))
    scale = ops.take(hm, (slice(None), slice(1, 2)))
    out = ops.add(ops.matmul(_film(x, shift, scale), params["head.w"]), params["head.b"])
    out = ops.take(out, (slice(None), sel))
    # tokens of the target slot may arrive in any order; restore grid order
    order = np.lexsort((grid.coords[sel, 2], grid.coords[sel, 1], grid.coords[sel, 3]))
    if not np.array_equal(order, np.arange(sel.size)):
        out = ops.take(out, (slice(None), order))
    return unpatchify(out, cfg.volume_shape, cfg.patch_size)


def predict(params, cfg, x_t, t, cond):
    """Full model: ``v`` (or x0) prediction for the target of ``cond.task``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    grid = build_token_grid(params, cfg, x_t, cond)
    e_t = embed_time(params, t, cfg)
    e_c = conditioning_code(params) if cond.task.conditions else None
    return dit_forward(params, grid, fuse_conditioning(e_t, e_c), cfg)


class Any2AnyDiT:
    """Configuration plus parameters; callable as ``model(x_t, t, conditioning)``."""

    def __init__(self, cfg=None, params=None, seed=0):
        self.cfg = cfg or DitConfig()
        self.params = params if params is not None else init_params(self.cfg, seed)

    def __call__(self, x_t, t, cond):
        return predict(self.params, self.cfg, x_t, t, cond).data

    def bind(self, params):
        """Callable using ``params`` (e.g. tracked tensors) instead of the stored ones."""
        return lambda x_t, t, cond: predict(params, self.cfg, x_t, t, cond)

    def copy(self):
        return Any2AnyDiT(self.cfg, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_params(self):
        return int(sum(v.size for v in self.params.values()))
