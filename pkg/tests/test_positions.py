import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import rotate_oracle, scenes
from migattn.positions import PositionTable, RotationSpec, assign_indices, rope_rotate
from migattn.scene import build_token_sequence, make_scene


def _table(scene):
    seq = build_token_sequence(scene)
    return seq, assign_indices(scene, seq)


def _first(seq, code):
    return seq.starts[code]


def test_layout_origin_is_zero_offset():
    seq, table = _table(make_scene((3, 3), 1, []))
    assert table[_first(seq, 2)] == (1, 0, 0)


def test_first_ref_after_8x8_layout():
    seq, table = _table(make_scene((8, 8), 1, [(0, 0, 2, 2)], refs=[(4, 4)]))
    assert table[_first(seq, 3)] == (1, 8, 8)


def test_second_ref_offsets_sum_explicitly():
    seq, table = _table(make_scene((4, 4), 1, [(0, 0, 1, 1), (1, 1, 1, 1)], refs=[(2, 2), (3, 3)]))
    # ref_2 local (1, 1) sits at row 1, column 1 of a 3-wide grid
    k = _first(seq, 4) + 1 * 3 + 1
    W = 4 + 2
    H = 4 + 2
    assert table[k] == (1, W + 1, H + 1) == (1, 7, 7)


def test_text_and_noise_indices():
    seq, table = _table(make_scene((3, 2), 2, [(0, 0, 1, 1)]))
    assert table[0] == table[1] == (0, 0, 0)
    noise = range(_first(seq, 1), _first(seq, 2))
    assert [table[k] for k in noise] == [(0, i, j) for j in range(2) for i in range(3)]


@given(scenes(max_n=8))
def test_auxiliary_indices_unique(scene):
    seq, table = _table(scene)
    aux = table.index[table.index[:, 0] == 1]
    assert len({tuple(r) for r in aux.tolist()}) == aux.shape[0]
    assert aux.shape[0] == scene.canvas_area + sum(i.ref_w * i.ref_h for i in scene.instances)


@given(scenes())
def test_offsets_match_explicit_summation(scene):
    _, table = _table(scene)
    dims = [(scene.canvas_w, scene.canvas_h)] + [(i.ref_w, i.ref_h) for i in scene.instances]
    for n in range(len(dims)):
        W = sum(d[0] for d in dims[:n])
        H = sum(d[1] for d in dims[:n])
        assert table.offsets[n] == (W, H)


def test_default_split():
    spec = RotationSpec()
    assert spec.split == (8, 28, 28)
    assert RotationSpec.for_head_dim(64) == spec
    assert sum(RotationSpec.for_head_dim(8).split) == 8


@pytest.mark.parametrize("bad", [dict(head_dim=7, split=(2, 2, 3)), dict(head_dim=8, split=(2, 2, 2)), dict(head_dim=8, split=(3, 3, 2))])
def test_rotation_spec_rejects(bad):
    with pytest.raises(ValueError):
        RotationSpec(**bad)


def _one_token_table(m, i, j):
    return PositionTable(np.array([[m, i, j]], dtype=np.int64), ())


def test_zero_index_is_identity(rng):
    v = rng.standard_normal((1, 64))
    np.testing.assert_array_equal(rope_rotate(v, _one_token_table(0, 0, 0), RotationSpec()), v)


def test_equal_indices_rotate_equally(rng):
    v = rng.standard_normal(64)
    table = PositionTable(np.array([[0, 5, 3], [0, 5, 3]]), ())
    out = rope_rotate(np.stack([v, v]), table, RotationSpec())
    np.testing.assert_array_equal(out[0], out[1])


def test_matches_pairwise_trig_oracle(rng):
    spec = RotationSpec(16, (2, 8, 6))
    idx = rng.integers(0, 20, size=(10, 3))
    x = rng.standard_normal((10, 16))
    out = rope_rotate(x, PositionTable(idx, ()), spec)
    for k in range(10):
        np.testing.assert_allclose(out[k], rotate_oracle(x[k], idx[k], spec.split), atol=1e-12)


def test_single_axis_dot_product_expansion(rng):
    spec = RotationSpec(4, (0, 4, 0))
    q, k = rng.standard_normal(4), rng.standard_normal(4)
    for a in range(8):
        for b in range(8):
            table = PositionTable(np.array([[0, a, 0], [0, b, 0]]), ())
            rq, rk = rope_rotate(np.stack([q, k]), table, spec)
            expected = 0.0
            for t in range(2):
                w = 10000.0 ** (-2 * t / 4)
                q0, q1, k0, k1 = q[2 * t], q[2 * t + 1], k[2 * t], k[2 * t + 1]
                expected += (q0 * k0 + q1 * k1) * math.cos((a - b) * w) + (q0 * k1 - q1 * k0) * math.sin((a - b) * w)
            assert abs(rq @ rk - expected) < 1e-12


@given(st.integers(0, 2**32 - 1))
def test_norm_preserved(seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 64, size=(6, 3))
    x = rng.standard_normal((6, 3, 64)) * 10
    out = rope_rotate(x, PositionTable(idx, ()), RotationSpec())
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1), rtol=0, atol=1e-9)


def test_dim_mismatch():
    with pytest.raises(ValueError):
        rope_rotate(np.zeros((1, 32)), _one_token_table(0, 0, 0), RotationSpec())
    with pytest.raises(ValueError):
        rope_rotate(np.zeros((2, 64)), _one_token_table(0, 0, 0), RotationSpec())
