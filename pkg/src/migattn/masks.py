"""Layout-anchoring (CLA) and identity-consistency (ICA) attention masks.

A mask is a boolean ``(seq_len, seq_len)`` matrix; ``mask[q, k]`` is True when
key ``k`` is visible to query ``q``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import (
    SEG_LAYOUT,
    SEG_NOISE,
    SEG_TEXT,
    Scene,
    TokenSequence,
    membership_grid,
    segment_name,
)

CLA = "CLA"
ICA = "ICA"
GROUPS = ("FR", "MID", "BK")


def _check_pair(scene: Scene, sequence: TokenSequence) -> None:
    if len(sequence.lengths) != 3 + scene.n_instances:
        raise ValueError("sequence was not built from this scene")


def build_cla_mask(scene: Scene, sequence: TokenSequence) -> np.ndarray:
    _check_pair(scene, sequence)
    seg = sequence.segment
    context = seg <= SEG_LAYOUT
    is_ref = ~context
    is_text = seg == SEG_TEXT
    mask = context[:, None] & context[None, :]
    mask |= is_ref[:, None] & (is_text[None, :] | (seg[:, None] == seg[None, :]))
    return mask


def noise_membership(scene: Scene, sequence: TokenSequence) -> np.ndarray:
    """Bool (num_noise_tokens, N): noise token t lies inside box n+1."""
    grid = membership_grid(scene)
    sl = sequence.segment_slice(SEG_NOISE)
    return grid[:, sequence.cj[sl], sequence.ci[sl]].T


def build_ica_mask(scene: Scene, sequence: TokenSequence) -> np.ndarray:
    """ICA rows for in-box noise queries, CLA rows everywhere else.

    A noise query inside several boxes sees the union of what each box
    allows: text, noise tokens in any of its boxes, and each matching
    reference.
    """
    mask = build_cla_mask(scene, sequence)
    n = scene.n_instances
    if n == 0:
        return mask
    seg = sequence.segment
    noise = sequence.segment_slice(SEG_NOISE)
    memb = noise_membership(scene, sequence)
    in_box = memb.any(axis=1)
    rows = np.arange(noise.start, noise.stop)[in_box]
    q_memb = memb[in_box]

    new_rows = np.zeros((rows.size, len(sequence)), dtype=bool)
    new_rows[:, seg == SEG_TEXT] = True
    new_rows[:, noise] = (q_memb.astype(np.int64) @ memb.T.astype(np.int64)) > 0
    for r in range(1, n + 1):
        new_rows[:, seg == SEG_LAYOUT + r] = q_memb[:, r - 1 : r]
    mask[rows] = new_rows
    return mask


@dataclass(frozen=True)
class BlockSchedule:
    num_blocks: int
    groups: dict[str, range]
    choice: tuple[str, ...]  # CLA or ICA per block

    def ica_blocks(self) -> list[int]:
        return [b for b, c in enumerate(self.choice) if c == ICA]

    def group_of(self, block: int) -> str:
        for name, rng in self.groups.items():
            if block in rng:
                return name
        raise IndexError(block)


def build_schedule(num_blocks: int = 57, ica_groups=("MID",)) -> BlockSchedule:
    if num_blocks < 3:
        raise ValueError(f"need at least 3 blocks, got {num_blocks}")
    ica_groups = set(ica_groups)
    unknown = ica_groups - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown block groups {sorted(unknown)}; expected a subset of {GROUPS}")
    base, extra = divmod(num_blocks, 3)
    groups = {}
    start = 0
    for g, name in enumerate(GROUPS):
        size = base + (1 if g < extra else 0)
        groups[name] = range(start, start + size)
        start += size
    choice = tuple(
        ICA if any(b in groups[g] for g in ica_groups) else CLA for b in range(num_blocks)
    )
    return BlockSchedule(num_blocks, groups, choice)


@dataclass(frozen=True)
class SegmentDensity:
    query: str
    key: str
    allowed: int
    total: int

    @property
    def density(self) -> float:
        return self.allowed / self.total


def mask_stats(mask: np.ndarray, sequence: TokenSequence) -> list[SegmentDensity]:
    n = len(sequence)
    if mask.shape != (n, n):
        raise ValueError(f"mask shape {mask.shape} does not match sequence length {n}")
    out = []
    codes = range(len(sequence.lengths))
    for qc in codes:
        qs = sequence.segment_slice(qc)
        for kc in codes:
            ks = sequence.segment_slice(kc)
            block = mask[qs, ks]
            out.append(
                SegmentDensity(segment_name(qc), segment_name(kc), int(block.sum()), block.size)
            )
    return out
