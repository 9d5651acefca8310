"""Ternary ``(m, i, j)`` position indices and multi-axis rotary embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import SEG_LAYOUT, SEG_NOISE, SEG_TEXT, Scene, TokenSequence, segment_name


@dataclass(frozen=True, eq=False)
class PositionTable:
    """One ``(m, i, j)`` row per token plus the per-image offsets used.

    ``offsets[c]`` is ``(W_c, H_c)`` for conditioning image ``c`` (the
    layout is image 0, ref n is image n).
    """

    index: np.ndarray  # int64, shape (seq_len, 3)
    offsets: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return int(self.index.shape[0])

    def __getitem__(self, k: int) -> tuple[int, int, int]:
        m, i, j = self.index[k]
        return int(m), int(i), int(j)

    def permuted(self, perm: np.ndarray) -> "PositionTable":
        return PositionTable(self.index[perm], self.offsets)


def conditioning_offsets(sequence: TokenSequence) -> list[tuple[int, int]]:
    """Cumulative (W, H) offsets over layout, ref_1, ..., ref_N."""
    offsets = []
    W = H = 0
    for code in range(SEG_LAYOUT, len(sequence.lengths)):
        offsets.append((W, H))
        w, h = sequence.grid_dims[code]
        W += w
        H += h
    return offsets


def assign_indices(scene: Scene, sequence: TokenSequence) -> PositionTable:
    if len(sequence.lengths) != 3 + scene.n_instances:
        raise ValueError("sequence was not built from this scene")
    index = np.zeros((len(sequence), 3), dtype=np.int64)
    noise = sequence.segment_slice(SEG_NOISE)
    index[noise, 1] = sequence.ci[noise]
    index[noise, 2] = sequence.cj[noise]

    offsets = conditioning_offsets(sequence)
    for c, (W, H) in enumerate(offsets):
        sl = sequence.segment_slice(SEG_LAYOUT + c)
        index[sl, 0] = 1
        index[sl, 1] = W + sequence.ci[sl]
        index[sl, 2] = H + sequence.cj[sl]
    # text rows stay (0, 0, 0)
    assert not index[sequence.segment_slice(SEG_TEXT)].any()
    index.setflags(write=False)
    return PositionTable(index, tuple(offsets))


def table_rows(sequence: TokenSequence, table: PositionTable):
    """Yield ``(token_index, role, m, i, j)`` for TSV dumps."""
    for k in range(len(table)):
        m, i, j = table[k]
        yield k, segment_name(int(sequence.segment[k])), m, i, j


@dataclass(frozen=True)
class RotationSpec:
    head_dim: int = 64
    split: tuple[int, int, int] = (8, 28, 28)
    theta: float = 10000.0

    def __post_init__(self):
        if self.head_dim % 2:
            raise ValueError(f"head_dim must be even, got {self.head_dim}")
        if any(d < 0 or d % 2 for d in self.split):
            raise ValueError(f"each axis part must be even and >= 0, got {self.split}")
        if sum(self.split) != self.head_dim:
            raise ValueError(f"split {self.split} does not sum to head_dim {self.head_dim}")

    @classmethod
    def for_head_dim(cls, head_dim: int, theta: float = 10000.0) -> "RotationSpec":
        """Default split: 1/8 of the pairs on the modality axis, rest shared by i and j."""
        pairs = head_dim // 2
        pm = max(pairs // 8, 1) if pairs >= 3 else 0
        rest = pairs - pm
        pi = rest - rest // 2
        return cls(head_dim, (2 * pm, 2 * pi, 2 * (rest - pi)), theta)


def rope_angles(table: PositionTable, spec: RotationSpec) -> np.ndarray:
    """Angle per (token, pair), shape (seq_len, head_dim // 2)."""
    parts = []
    for axis, d in enumerate(spec.split):
        if d == 0:
            continue
        t = np.arange(d // 2, dtype=np.float64)
        freqs = spec.theta ** (-2.0 * t / d)
        parts.append(table.index[:, axis, None].astype(np.float64) * freqs[None, :])
    if not parts:
        return np.zeros((len(table), 0))
    return np.concatenate(parts, axis=1)


def rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Rotate adjacent pairs ``(x[2t], x[2t+1])`` of the last axis.

    ``cos``/``sin`` broadcast against ``x[..., ::2]``.  ``inverse`` applies the
    transpose rotation, which is also the backward map for gradients.
    """
    if inverse:
        sin = -sin
    a = x[..., 0::2]
    b = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos
    return out


def rope_rotate(embeddings: np.ndarray, table: PositionTable, spec: RotationSpec) -> np.ndarray:
    """Rotate per-token vectors of shape (seq_len, head_dim) or (seq_len, heads, head_dim)."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.shape[-1] != spec.head_dim:
        raise ValueError(f"embedding dim {x.shape[-1]} != head_dim {spec.head_dim}")
    if x.shape[0] != len(table):
        raise ValueError(f"{x.shape[0]} embeddings for {len(table)} position rows")
    ang = rope_angles(table, spec)
    if x.ndim == 3:
        ang = ang[:, None, :]
    return rotate(x, np.cos(ang), np.sin(ang))
