"""Masked multi-modal attention and a minimal DiT block stack (float64 numpy).

Forward and backward passes are written out by hand so that gradients can
be checked against finite differences without an autodiff framework in
the loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masks import CLA, ICA, BlockSchedule, build_cla_mask, build_ica_mask
from .positions import PositionTable, RotationSpec, rope_angles, rotate
from .rng import stream
from .scene import SEG_NOISE, Scene, TokenSequence, build_token_sequence

LN_EPS = 1e-6
_GELU_C = np.sqrt(2.0 / np.pi)


class MaskError(ValueError):
    """A query row has no visible key."""


def _check_mask(mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise ValueError(f"mask shape {mask.shape} != ({n}, {n})")
    empty = ~mask.any(axis=1)
    if empty.any():
        raise MaskError(f"query rows with no allowed key: {np.flatnonzero(empty)[:10].tolist()}")
    return mask


def _as_heads(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None, :] if x.ndim == 2 else x


@dataclass
class _AttnCache:
    qr: np.ndarray
    kr: np.ndarray
    v: np.ndarray
    p: np.ndarray
    cos: np.ndarray
    sin: np.ndarray
    scale: float


def _attention_fwd(q, k, v, mask, table: PositionTable, spec: RotationSpec):
    n = q.shape[0]
    if not (k.shape == q.shape and v.shape[:2] == q.shape[:2]):
        raise ValueError(f"inconsistent Q/K/V shapes {q.shape} {k.shape} {v.shape}")
    if len(table) != n:
        raise ValueError(f"position table has {len(table)} rows for {n} tokens")
    if q.shape[-1] != spec.head_dim:
        raise ValueError(f"head dim {q.shape[-1]} != rotation head_dim {spec.head_dim}")
    mask = _check_mask(mask, n)

    ang = rope_angles(table, spec)[:, None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    qr = rotate(q, cos, sin)
    kr = rotate(k, cos, sin)
    scale = 1.0 / np.sqrt(spec.head_dim)
    scores = np.einsum("qhd,khd->hqk", qr, kr) * scale
    # excluded keys get -inf before the max, so they never shift the row max
    scores = np.where(mask[None], scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    p = e / e.sum(axis=-1, keepdims=True)
    out = np.einsum("hqk,khd->qhd", p, v)
    return out, _AttnCache(qr, kr, v, p, cos, sin, scale)


def _attention_bwd(g, c: _AttnCache):
    dp = np.einsum("qhd,khd->hqk", g, c.v)
    dv = np.einsum("hqk,qhd->khd", c.p, g)
    ds = c.p * (dp - (dp * c.p).sum(axis=-1, keepdims=True))
    dqr = np.einsum("hqk,khd->qhd", ds, c.kr) * c.scale
    dkr = np.einsum("hqk,qhd->khd", ds, c.qr) * c.scale
    dq = rotate(dqr, c.cos, c.sin, inverse=True)
    dk = rotate(dkr, c.cos, c.sin, inverse=True)
    return dq, dk, dv


def masked_attention(q, k, v, mask, table: PositionTable, spec: RotationSpec) -> np.ndarray:
    """Rotary, masked scaled dot-product attention.

    ``q``, ``k``, ``v`` are ``(seq_len, heads, head_dim)`` (or 2-D for a
    single head).  Keys outside ``mask[q]`` are dropped from the softmax
    normalization, so their weight is exactly zero.
    """
    squeeze = np.ndim(q) == 2
    out, _ = _attention_fwd(_as_heads(q), _as_heads(k), _as_heads(v), mask, table, spec)
    return out[:, 0, :] if squeeze else out


def attention_weights(q, k, mask, table: PositionTable, spec: RotationSpec) -> np.ndarray:
    """Softmax weights, shape (heads, seq_len, seq_len)."""
    q, k = _as_heads(q), _as_heads(k)
    _, cache = _attention_fwd(q, k, np.zeros_like(q), mask, table, spec)
    return cache.p


def masked_attention_grad(q, k, v, mask, table, spec, grad_out):
    """Return ``(dq, dk, dv)`` for the scalar ``sum(out * grad_out)``."""
    squeeze = np.ndim(q) == 2
    _, cache = _attention_fwd(_as_heads(q), _as_heads(k), _as_heads(v), mask, table, spec)
    grads = _attention_bwd(_as_heads(grad_out), cache)
    return tuple(g[:, 0, :] for g in grads) if squeeze else grads


# -- block stack ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ToyBlockWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    heads: int

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def with_zero_outputs(self) -> "ToyBlockWeights":
        """Copy with attention-out and MLP-out projections zeroed (identity block)."""
        z = np.zeros_like
        return ToyBlockWeights(
            self.wq, self.wk, self.wv, z(self.wo), self.w1, self.b1, z(self.w2), z(self.b2), self.heads
        )


def init_block(rng: np.random.Generator, dim: int, heads: int, mlp_ratio: int = 2) -> ToyBlockWeights:
    if dim % heads:
        raise ValueError(f"dim {dim} not divisible by heads {heads}")
    hidden = mlp_ratio * dim

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return ToyBlockWeights(
        wq=uniform(dim, (dim, dim)),
        wk=uniform(dim, (dim, dim)),
        wv=uniform(dim, (dim, dim)),
        wo=uniform(dim, (dim, dim)),
        w1=uniform(dim, (dim, hidden)),
        b1=uniform(dim, (hidden,)),
        w2=uniform(hidden, (hidden, dim)),
        b2=uniform(hidden, (dim,)),
        heads=heads,
    )


def init_weights(num_blocks: int, dim: int, heads: int, seed: int, mlp_ratio: int = 2) -> list[ToyBlockWeights]:
    rng = stream(seed, "weights")
    return [init_block(rng, dim, heads, mlp_ratio) for _ in range(num_blocks)]


def _layer_norm(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat, (xhat, inv)


def _layer_norm_bwd(g, cache):
    xhat, inv = cache
    return inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_bwd(g, u, t):
    du = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return g * du


def _block_fwd(x, w: ToyBlockWeights, mask, table, spec):
    n, dim = x.shape
    if dim != w.dim:
        raise ValueError(f"token dim {dim} != block dim {w.dim}")
    hd = w.head_dim
    h1, ln1 = _layer_norm(x)
    q = (h1 @ w.wq).reshape(n, w.heads, hd)
    k = (h1 @ w.wk).reshape(n, w.heads, hd)
    v = (h1 @ w.wv).reshape(n, w.heads, hd)
    att, acache = _attention_fwd(q, k, v, mask, table, spec)
    att = att.reshape(n, dim)
    x1 = x + att @ w.wo
    h2, ln2 = _layer_norm(x1)
    u = h2 @ w.w1 + w.b1
    act, t = _gelu(u)
    y = x1 + act @ w.w2 + w.b2
    return y, (h1, ln1, acache, att, h2, ln2, u, t, act)


def _block_bwd(gy, w: ToyBlockWeights, cache):
    h1, ln1, acache, att, h2, ln2, u, t, act = cache
    n, dim = gy.shape
    g_act = gy @ w.w2.T
    g_h2 = _gelu_bwd(g_act, u, t) @ w.w1.T
    g_x1 = gy + _layer_norm_bwd(g_h2, ln2)
    g_att = (g_x1 @ w.wo.T).reshape(n, w.heads, w.head_dim)
    dq, dk, dv = _attention_bwd(g_att, acache)
    g_h1 = dq.reshape(n, dim) @ w.wq.T + dk.reshape(n, dim) @ w.wk.T + dv.reshape(n, dim) @ w.wv.T
    return g_x1 + _layer_norm_bwd(g_h1, ln1)


def block_forward(tokens, weights: ToyBlockWeights, mask, table: PositionTable, spec: RotationSpec | None = None):
    """Pre-norm block: ``x + Attn(LN(x))`` followed by ``+ MLP(LN(.))``."""
    spec = spec or RotationSpec.for_head_dim(weights.head_dim)
    y, _ = _block_fwd(np.asarray(tokens, dtype=np.float64), weights, mask, table, spec)
    return y


def block_input_grad(tokens, weights, mask, table, spec=None, grad_out=None):
    spec = spec or RotationSpec.for_head_dim(weights.head_dim)
    x = np.asarray(tokens, dtype=np.float64)
    _, cache = _block_fwd(x, weights, mask, table, spec)
    return _block_bwd(np.asarray(grad_out, dtype=np.float64), weights, cache)


def run_blocks(tokens, weights, masks: list[np.ndarray], table, spec=None) -> np.ndarray:
    if len(masks) != len(weights):
        raise ValueError(f"{len(masks)} masks for {len(weights)} blocks")
    x = np.asarray(tokens, dtype=np.float64)
    for w, m in zip(weights, masks):
        x = block_forward(x, w, m, table, spec)
    return x


def initial_tokens(sequence: TokenSequence, dim: int, seed: int) -> np.ndarray:
    return stream(seed, "tokens").standard_normal((len(sequence), dim))


def model_forward(
    scene: Scene,
    weights: list[ToyBlockWeights],
    schedule: BlockSchedule,
    table: PositionTable,
    tokens: np.ndarray,
    spec: RotationSpec | None = None,
    sequence: TokenSequence | None = None,
) -> np.ndarray:
    """Run the scheduled CLA/ICA stack; return the noise-image segment only."""
    if schedule.num_blocks != len(weights):
        raise ValueError(f"schedule has {schedule.num_blocks} blocks, weights have {len(weights)}")
    sequence = sequence or build_token_sequence(scene)
    available = {CLA: build_cla_mask(scene, sequence)}
    if ICA in schedule.choice:
        available[ICA] = build_ica_mask(scene, sequence)
    masks = [available[c] for c in schedule.choice]
    out = run_blocks(tokens, weights, masks, table, spec)
    return out[sequence.segment_slice(SEG_NOISE)]
