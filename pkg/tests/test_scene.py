import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import linear_tokens, random_scene, scenes
from migattn.scene import (
    BBox,
    Instance,
    Scene,
    SceneError,
    box_membership,
    build_token_sequence,
    load_scene,
    make_scene,
    scene_from_dict,
    scene_to_dict,
    segment_of,
)


def test_no_reference_sequence_length():
    seq = build_token_sequence(make_scene((2, 2), 3, []))
    assert len(seq) == 11
    assert seq.lengths == (3, 4, 4)


def test_segment_order_with_two_refs():
    scene = make_scene((2, 2), 1, [(0, 0, 1, 1), (1, 1, 1, 1)], refs=[(2, 2), (1, 1)])
    seq = build_token_sequence(scene)
    assert seq.lengths == (1, 4, 4, 4, 1)
    assert [t.role for t in seq.tokens] == ["text"] + ["noise_image"] * 4 + ["layout"] * 4 + ["ref"] * 5


def test_empty_text_segment_rejected():
    with pytest.raises(SceneError, match="text"):
        build_token_sequence(make_scene((4, 4), 0, []))


@pytest.mark.parametrize(
    "boxes, coord, expected",
    [
        ([(0, 0, 2, 2)], (1, 1), {1}),
        ([(0, 0, 2, 2)], (2, 2), set()),
        ([(0, 0, 3, 3), (1, 1, 3, 3)], (2, 2), {1, 2}),
    ],
)
def test_box_membership_examples(boxes, coord, expected):
    assert box_membership(make_scene((5, 5), 1, boxes), coord) == expected


def test_box_membership_rejects_out_of_canvas():
    with pytest.raises(SceneError):
        box_membership(make_scene((4, 4), 1, [(0, 0, 2, 2)]), (4, 0))


def test_segment_of_boundaries():
    scene = make_scene((3, 2), 2, [(0, 0, 1, 1), (1, 0, 2, 2)], refs=[(2, 1), (3, 2)])
    seq = build_token_sequence(scene)
    assert segment_of(seq, 0).role == "text"
    assert segment_of(seq, 2) == ("noise_image", (0, 0), 0)
    assert segment_of(seq, len(seq) - 1) == ("ref", (2, 1), 2)
    with pytest.raises(IndexError):
        segment_of(seq, len(seq))


@given(scenes())
def test_segment_of_round_trip(scene):
    if scene.text_len < 1:
        return
    seq = build_token_sequence(scene)
    expected = linear_tokens(scene)
    assert len(seq) == scene.text_len + 2 * scene.canvas_area + sum(i.ref_w * i.ref_h for i in scene.instances)
    for k, (role, ref, i, j) in enumerate(expected):
        tok = segment_of(seq, k)
        assert (tok.role, tok.ref, tok.coord) == (role, ref, (i, j))


@given(scenes(), st.data())
def test_box_membership_matches_scan(scene, data):
    i = data.draw(st.integers(0, scene.canvas_w - 1))
    j = data.draw(st.integers(0, scene.canvas_h - 1))
    expected = {
        inst.id
        for inst in scene.instances
        if inst.bbox.x <= i < inst.bbox.x + inst.bbox.w and inst.bbox.y <= j < inst.bbox.y + inst.bbox.h
    }
    assert box_membership(scene, (i, j)) == expected


class TestValidation:
    def base(self):
        return {"canvas": [4, 4], "text_len": 2, "instances": [
            {"id": 1, "bbox": [0, 0, 2, 2], "ref": [2, 2]},
            {"id": 2, "bbox": [1, 1, 3, 3], "ref": [1, 1]},
        ]}

    def test_round_trip(self, tmp_path):
        d = self.base()
        d["instances"][1]["occupancy"] = [1, 0, 1, 1, 1, 1, 0, 1, 1]
        path = tmp_path / "s.json"
        path.write_text(json.dumps(d))
        scene = load_scene(path)
        assert scene_to_dict(scene) == d
        assert scene.instances[1].occupancy[0].tolist() == [True, False, True]

    def test_duplicate_id_named(self):
        d = self.base()
        d["instances"][1]["id"] = 1
        with pytest.raises(SceneError, match="duplicate instance id 1") as err:
            scene_from_dict(d)
        assert err.value.instance_id == 1

    def test_out_of_order_id(self):
        d = self.base()
        d["instances"][0]["id"] = 2
        d["instances"][1]["id"] = 1
        with pytest.raises(SceneError, match="id 2") as err:
            scene_from_dict(d)
        assert err.value.instance_id == 2

    @pytest.mark.parametrize(
        "patch, needle",
        [
            ({"bbox": [3, 3, 2, 2]}, "leaves"),
            ({"bbox": [0, 0, 0, 2]}, ">= 1"),
            ({"ref": [0, 2]}, "reference"),
            ({"occupancy": [1, 1, 1]}, "occupancy"),
            ({"occupancy": [0, 0, 0, 0]}, "no effective"),
            ({"bbox": [0, 0, 2]}, "schema"),
        ],
    )
    def test_bad_instance(self, patch, needle):
        d = self.base()
        d["instances"][0].update(patch)
        with pytest.raises(SceneError, match=needle):
            scene_from_dict(d)

    def test_missing_key(self):
        d = self.base()
        del d["text_len"]
        with pytest.raises(SceneError, match="schema"):
            scene_from_dict(d)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{")
        with pytest.raises(SceneError, match="invalid JSON"):
            load_scene(path)


def test_bbox_invariants():
    with pytest.raises(SceneError):
        BBox(0, 0, 1, 0)
    with pytest.raises(SceneError):
        BBox(-1, 0, 1, 1)
    with pytest.raises(SceneError):
        BBox(0.5, 0, 1, 1)
    with pytest.raises(SceneError):
        Scene(2, 2, 1, (Instance(1, BBox(1, 1, 2, 1), 1, 1),))


def test_scene_is_immutable(rng):
    scene = random_scene(rng, occupancy=True, min_n=1)
    with pytest.raises(Exception):
        scene.text_len = 3
    seq = build_token_sequence(scene)
    with pytest.raises(ValueError):
        seq.segment[0] = 5
    occ = [i.occupancy for i in scene.instances if i.occupancy is not None]
    for o in occ:
        with pytest.raises(ValueError):
            o[0, 0] = False
    assert np.all(seq.ci >= 0)
