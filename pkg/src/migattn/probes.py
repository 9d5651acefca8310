"""Isolation probes for the ICA mask and finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from .attention import (
    ToyBlockWeights,
    block_forward,
    block_input_grad,
    init_block,
    masked_attention,
    masked_attention_grad,
)
from .masks import build_cla_mask, build_ica_mask, noise_membership
from .positions import PositionTable, RotationSpec, assign_indices
from .rng import stream
from .scene import SEG_LAYOUT, SEG_NOISE, Scene, build_token_sequence, make_scene


def _max_delta(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)))


def isolation_probe(
    scene: Scene,
    weights: ToyBlockWeights,
    table: PositionTable | None = None,
    seed: int = 0,
    spec: RotationSpec | None = None,
) -> dict:
    """Perturb token groups under one ICA block and measure the output change.

    For every instance n that owns a noise token lying in B_n and no other
    box, reads the output at that token and records:

    * ``foreign``: max change when every other reference, the layout, and
      noise tokens outside B_n are perturbed (must be exactly 0);
    * ``own``: max change when R_n is perturbed (expected nonzero).

    If the canvas has a background token, ``report["background"]["layout"]``
    is the change there when the layout is perturbed (expected nonzero).
    """
    seq = build_token_sequence(scene)
    table = table if table is not None else assign_indices(scene, seq)
    mask = build_ica_mask(scene, seq)
    rng = stream(seed, "probe")
    x = rng.standard_normal((len(seq), weights.dim))
    base = block_forward(x, weights, mask, table, spec)

    noise = seq.segment_slice(SEG_NOISE)
    memb = noise_membership(scene, seq)
    report = {"seed": seed, "instances": []}

    def perturbed(rows):
        xp = x.copy()
        xp[rows] += rng.standard_normal((len(rows), weights.dim))
        return block_forward(xp, weights, mask, table, spec)

    for n in range(1, scene.n_instances + 1):
        only_n = np.flatnonzero(memb[:, n - 1] & (memb.sum(axis=1) == 1))
        if only_n.size == 0:
            report["instances"].append({"id": n, "query": None})
            continue
        q = noise.start + int(only_n[only_n.size // 2])
        other_refs = [
            k for k in range(len(seq)) if seq.segment[k] > SEG_LAYOUT and seq.segment[k] != SEG_LAYOUT + n
        ]
        outside = (noise.start + np.flatnonzero(~memb[:, n - 1])).tolist()
        layout = list(range(*seq.segment_slice(SEG_LAYOUT).indices(len(seq))))
        foreign_rows = other_refs + outside + layout
        own_rows = list(range(*seq.segment_slice(SEG_LAYOUT + n).indices(len(seq))))

        entry = {"id": n, "query": q}
        entry["foreign"] = _max_delta(perturbed(foreign_rows)[q], base[q]) if foreign_rows else 0.0
        entry["own"] = _max_delta(perturbed(own_rows)[q], base[q])
        report["instances"].append(entry)

    background = np.flatnonzero(~memb.any(axis=1)) if scene.n_instances else np.arange(memb.shape[0])
    if background.size:
        q = noise.start + int(background[background.size // 2])
        layout = list(range(*seq.segment_slice(SEG_LAYOUT).indices(len(seq))))
        report["background"] = {"query": q, "layout": _max_delta(perturbed(layout)[q], base[q])}
    return report


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error relative to the larger max-norm of the two gradients."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-300)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def central_difference(f, x: np.ndarray, eps: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + eps
        up = f(x)
        flat[idx] = orig - eps
        down = f(x)
        flat[idx] = orig
        gflat[idx] = (up - down) / (2 * eps)
    return grad


def _probe_scene(n_tokens: int) -> Scene:
    # one text token, a 2x2 (or 1x1) canvas and one reference soaking up the rest
    if n_tokens >= 10:
        return make_scene((2, 2), 1, [(0, 0, 1, 2)], [(n_tokens - 9, 1)])
    if n_tokens >= 4:
        return make_scene((1, 1), 1, [(0, 0, 1, 1)], [(n_tokens - 3, 1)])
    return make_scene((1, 1), 1, [])


def grad_check(function_id: str, seed: int = 0, eps: float = 1e-4, n_tokens: int = 12, heads: int = 2, head_dim: int = 8) -> dict:
    """Compare analytic input gradients with central differences.

    ``function_id`` is ``"attention"`` (gradients w.r.t. Q, K, V) or
    ``"block"`` (gradient w.r.t. the block input).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    if not 3 <= n_tokens <= 16:
        raise ValueError(f"n_tokens must lie in [3, 16], got {n_tokens}")
    scene = _probe_scene(n_tokens)
    seq = build_token_sequence(scene)
    table = assign_indices(scene, seq)
    mask = build_ica_mask(scene, seq) if scene.n_instances else build_cla_mask(scene, seq)
    spec = RotationSpec.for_head_dim(head_dim)
    rng = stream(seed, "gradcheck", len(function_id))
    errors: dict[str, float] = {}

    if function_id == "attention":
        q, k, v = (rng.standard_normal((len(seq), heads, head_dim)) for _ in range(3))
        g = rng.standard_normal(q.shape)
        analytic = dict(zip("qkv", masked_attention_grad(q, k, v, mask, table, spec, g)))
        inputs = {"q": q, "k": k, "v": v}
        for name, val in inputs.items():
            def loss(z, name=name):
                args = dict(inputs, **{name: z})
                return float(np.sum(masked_attention(args["q"], args["k"], args["v"], mask, table, spec) * g))

            errors[name] = relative_error(analytic[name], central_difference(loss, val, eps))
    elif function_id == "block":
        w = init_block(rng, heads * head_dim, heads)
        x = rng.standard_normal((len(seq), heads * head_dim))
        g = rng.standard_normal(x.shape)
        analytic = block_input_grad(x, w, mask, table, spec, g)
        numeric = central_difference(lambda z: float(np.sum(block_forward(z, w, mask, table, spec) * g)), x, eps)
        errors["x"] = relative_error(analytic, numeric)
    else:
        raise ValueError(f"unknown function id {function_id!r}; use 'attention' or 'block'")

    finite = all(np.isfinite(e) for e in errors.values())
    max_err = max(errors.values())
    return {
        "function": function_id,
        "seed": seed,
        "eps": eps,
        "n_tokens": len(seq),
        "errors": errors,
        "max_rel_err": max_err,
        "finite": finite,
        "passed": bool(finite and max_err < 1e-4),
    }
