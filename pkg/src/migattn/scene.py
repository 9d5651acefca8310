"""Scenes, instances and the unified token sequence.

All spatial quantities are in latent-grid token units.  A coordinate
``(i, j)`` is column ``i`` (x axis) and row ``j`` (y axis); grids are
flattened row-major, so the token at ``(i, j)`` in a ``w x h`` grid sits at
local offset ``j * w + i``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
from jsonschema import Draft202012Validator

TEXT = "text"
NOISE = "noise_image"
LAYOUT = "layout"
REF = "ref"

# integer segment codes: 0 text, 1 noise, 2 layout, 2 + n for ref n
SEG_TEXT, SEG_NOISE, SEG_LAYOUT = 0, 1, 2


class SceneError(ValueError):
    """Raised when a scene violates its structural invariants."""

    def __init__(self, message: str, *, instance_id: int | None = None):
        super().__init__(message)
        self.instance_id = instance_id


@dataclass(frozen=True)
class BBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise SceneError(f"bbox.{name} must be an integer, got {value!r}")
        if self.w < 1 or self.h < 1:
            raise SceneError(f"bbox extents must be >= 1, got w={self.w} h={self.h}")
        if self.x < 0 or self.y < 0:
            raise SceneError(f"bbox origin must be non-negative, got ({self.x}, {self.y})")

    @property
    def area(self) -> int:
        return self.w * self.h

    def contains(self, i: int, j: int) -> bool:
        return self.x <= i < self.x + self.w and self.y <= j < self.y + self.h

    def fits(self, canvas_w: int, canvas_h: int) -> bool:
        return self.x + self.w <= canvas_w and self.y + self.h <= canvas_h


@dataclass(frozen=True)
class Instance:
    id: int
    bbox: BBox
    ref_w: int
    ref_h: int
    # bool array of shape (bbox.h, bbox.w); None means the full box
    occupancy: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.ref_w < 1 or self.ref_h < 1:
            raise SceneError(
                f"instance {self.id}: reference dims must be >= 1", instance_id=self.id
            )
        if self.occupancy is not None:
            occ = np.asarray(self.occupancy, dtype=bool)
            if occ.shape != (self.bbox.h, self.bbox.w):
                raise SceneError(
                    f"instance {self.id}: occupancy shape {occ.shape} does not match "
                    f"bbox (h, w) = {(self.bbox.h, self.bbox.w)}",
                    instance_id=self.id,
                )
            if not occ.any():
                raise SceneError(
                    f"instance {self.id}: occupancy has no effective cells",
                    instance_id=self.id,
                )
            occ.setflags(write=False)
            object.__setattr__(self, "occupancy", occ)

    def effective_mask(self, canvas_w: int, canvas_h: int) -> np.ndarray:
        """Canvas-sized boolean grid (rows, cols) of this instance's effective area."""
        grid = np.zeros((canvas_h, canvas_w), dtype=bool)
        b = self.bbox
        if self.occupancy is None:
            grid[b.y : b.y + b.h, b.x : b.x + b.w] = True
        else:
            grid[b.y : b.y + b.h, b.x : b.x + b.w] = self.occupancy
        return grid


@dataclass(frozen=True)
class Scene:
    canvas_w: int
    canvas_h: int
    text_len: int
    instances: tuple[Instance, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if self.canvas_w < 1 or self.canvas_h < 1:
            raise SceneError(f"canvas dims must be >= 1, got {self.canvas_w}x{self.canvas_h}")
        if self.text_len < 0:
            raise SceneError(f"text_len must be >= 0, got {self.text_len}")
        for n, inst in enumerate(self.instances, start=1):
            if inst.id != n:
                raise SceneError(
                    f"instance id {inst.id} at position {n}: ids must be 1..N in listed order",
                    instance_id=inst.id,
                )
            if not inst.bbox.fits(self.canvas_w, self.canvas_h):
                raise SceneError(
                    f"instance {inst.id}: bbox {inst.bbox} leaves the "
                    f"{self.canvas_w}x{self.canvas_h} canvas",
                    instance_id=inst.id,
                )

    @property
    def n_instances(self) -> int:
        return len(self.instances)

    @property
    def canvas_area(self) -> int:
        return self.canvas_w * self.canvas_h


class Token(NamedTuple):
    role: str
    coord: tuple[int, int]
    ref: int = 0  # instance ordinal for role == "ref", else 0


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Flattened ``[text, noise, layout, ref_1 .. ref_N]`` sequence.

    Per-token arrays give constant-time reverse lookup: ``segment`` holds
    the segment code, ``ci``/``cj`` the local column/row.
    """

    segment: np.ndarray
    ci: np.ndarray
    cj: np.ndarray
    starts: tuple[int, ...]
    lengths: tuple[int, ...]
    grid_dims: tuple[tuple[int, int], ...]  # (w, h) per segment; text is (text_len, 1)

    def __len__(self) -> int:
        return int(self.segment.shape[0])

    @property
    def n_refs(self) -> int:
        return len(self.lengths) - 3

    def segment_slice(self, code: int) -> slice:
        return slice(self.starts[code], self.starts[code] + self.lengths[code])

    @property
    def tokens(self) -> list[Token]:
        return [segment_of(self, k) for k in range(len(self))]


def _check_coord(scene: Scene, coord: tuple[int, int]) -> None:
    i, j = coord
    if not (0 <= i < scene.canvas_w and 0 <= j < scene.canvas_h):
        raise SceneError(
            f"coord {coord} outside the {scene.canvas_w}x{scene.canvas_h} canvas"
        )


def build_token_sequence(scene: Scene) -> TokenSequence:
    if scene.text_len < 1:
        raise SceneError("text segment is empty (text_len must be >= 1)")
    dims = [(scene.text_len, 1), (scene.canvas_w, scene.canvas_h), (scene.canvas_w, scene.canvas_h)]
    dims += [(inst.ref_w, inst.ref_h) for inst in scene.instances]

    segment, ci, cj, starts, lengths = [], [], [], [], []
    offset = 0
    for code, (w, h) in enumerate(dims):
        n = w * h
        starts.append(offset)
        lengths.append(n)
        segment.append(np.full(n, code, dtype=np.int64))
        if code == SEG_TEXT:
            ci.append(np.zeros(n, dtype=np.int64))
            cj.append(np.zeros(n, dtype=np.int64))
        else:
            jj, ii = np.divmod(np.arange(n, dtype=np.int64), w)
            ci.append(ii)
            cj.append(jj)
        offset += n

    arrays = [np.concatenate(a) for a in (segment, ci, cj)]
    for a in arrays:
        a.setflags(write=False)
    return TokenSequence(
        segment=arrays[0],
        ci=arrays[1],
        cj=arrays[2],
        starts=tuple(starts),
        lengths=tuple(lengths),
        grid_dims=tuple(dims),
    )


def segment_of(sequence: TokenSequence, index: int) -> Token:
    if not 0 <= index < len(sequence):
        raise IndexError(f"token index {index} out of range [0, {len(sequence)})")
    code = int(sequence.segment[index])
    coord = (int(sequence.ci[index]), int(sequence.cj[index]))
    if code == SEG_TEXT:
        return Token(TEXT, coord)
    if code == SEG_NOISE:
        return Token(NOISE, coord)
    if code == SEG_LAYOUT:
        return Token(LAYOUT, coord)
    return Token(REF, coord, code - SEG_LAYOUT)


def segment_name(code: int) -> str:
    if code == SEG_TEXT:
        return TEXT
    if code == SEG_NOISE:
        return NOISE
    if code == SEG_LAYOUT:
        return LAYOUT
    return f"{REF}{code - SEG_LAYOUT}"


def box_membership(scene: Scene, coord: tuple[int, int]) -> frozenset[int]:
    _check_coord(scene, coord)
    i, j = coord
    return frozenset(inst.id for inst in scene.instances if inst.bbox.contains(i, j))


def membership_grid(scene: Scene) -> np.ndarray:
    """Bool array (N, canvas_h, canvas_w); entry [n-1, j, i] is coord (i, j) in B_n."""
    grid = np.zeros((scene.n_instances, scene.canvas_h, scene.canvas_w), dtype=bool)
    for k, inst in enumerate(scene.instances):
        b = inst.bbox
        grid[k, b.y : b.y + b.h, b.x : b.x + b.w] = True
    return grid


# -- JSON ingestion ---------------------------------------------------------

SCENE_SCHEMA = {
    "type": "object",
    "required": ["canvas", "text_len", "instances"],
    "properties": {
        "canvas": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
        "text_len": {"type": "integer"},
        "instances": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "bbox", "ref"],
                "properties": {
                    "id": {"type": "integer"},
                    "bbox": {"type": "array", "items": {"type": "integer"}, "minItems": 4, "maxItems": 4},
                    "ref": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                    "occupancy": {"type": "array", "items": {"enum": [0, 1]}},
                },
            },
        },
    },
}

_validator = Draft202012Validator(SCENE_SCHEMA)


def scene_from_dict(data: dict) -> Scene:
    errors = sorted(_validator.iter_errors(data), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.path) or "<root>"
        raise SceneError(f"schema violation at {where}: {err.message}")

    seen: set[int] = set()
    for item in data["instances"]:
        if item["id"] in seen:
            raise SceneError(f"duplicate instance id {item['id']}", instance_id=item["id"])
        seen.add(item["id"])

    instances = []
    for item in data["instances"]:
        x, y, w, h = item["bbox"]
        occ = None
        if "occupancy" in item:
            flat = np.asarray(item["occupancy"], dtype=bool)
            if flat.size != w * h:
                raise SceneError(
                    f"instance {item['id']}: occupancy has {flat.size} cells, bbox needs {w * h}",
                    instance_id=item["id"],
                )
            occ = flat.reshape(h, w)
        try:
            bbox = BBox(x, y, w, h)
        except SceneError as exc:
            raise SceneError(f"instance {item['id']}: {exc}", instance_id=item["id"]) from None
        instances.append(Instance(item["id"], bbox, item["ref"][0], item["ref"][1], occ))
    cw, ch = data["canvas"]
    return Scene(cw, ch, data["text_len"], tuple(instances))


def scene_to_dict(scene: Scene) -> dict:
    items = []
    for inst in scene.instances:
        b = inst.bbox
        item = {"id": inst.id, "bbox": [b.x, b.y, b.w, b.h], "ref": [inst.ref_w, inst.ref_h]}
        if inst.occupancy is not None:
            item["occupancy"] = inst.occupancy.astype(int).ravel().tolist()
        items.append(item)
    return {"canvas": [scene.canvas_w, scene.canvas_h], "text_len": scene.text_len, "instances": items}


def load_scene(path: str | Path) -> Scene:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: invalid JSON ({exc})") from None
    return scene_from_dict(data)


def make_scene(
    canvas: tuple[int, int],
    text_len: int,
    boxes: Iterable[tuple[int, int, int, int]],
    refs: Iterable[tuple[int, int]] | None = None,
) -> Scene:
    """Shorthand constructor: boxes as ``(x, y, w, h)``, refs as ``(w, h)``."""
    boxes = list(boxes)
    refs = list(refs) if refs is not None else [(b[2], b[3]) for b in boxes]
    if len(refs) != len(boxes):
        raise SceneError("boxes and refs differ in length")
    instances = tuple(
        Instance(n, BBox(*box), rw, rh)
        for n, (box, (rw, rh)) in enumerate(zip(boxes, refs), start=1)
    )
    return Scene(canvas[0], canvas[1], text_len, instances)
