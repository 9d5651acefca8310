"""Cell-level box IoU, mIoU and spatial success rates.

IoU values are exact ``Fraction`` objects; boxes are half-open integer
rectangles ``(x, y, w, h)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from .scene import BBox, SceneError


def _as_bbox(b) -> BBox:
    return b if isinstance(b, BBox) else BBox(*b)


def iou(a, b) -> Fraction:
    a, b = _as_bbox(a), _as_bbox(b)
    iw = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    ih = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = iw * ih
    return Fraction(inter, a.area + b.area - inter)


@dataclass(frozen=True)
class EvalCase:
    case_id: str
    ids: tuple[int, ...]
    targets: tuple[BBox, ...]
    predictions: tuple[BBox, ...]

    def __post_init__(self):
        if not (len(self.ids) == len(self.targets) == len(self.predictions)):
            raise ValueError(f"case {self.case_id}: ids, targets and predictions differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError(f"case {self.case_id}: duplicate instance ids")

    def ious(self) -> list[Fraction]:
        return [iou(t, p) for t, p in zip(self.targets, self.predictions)]


def miou(case: EvalCase) -> Fraction:
    if not case.ids:
        raise ValueError(f"case {case.case_id} has no instances")
    values = case.ious()
    return sum(values, Fraction(0)) / len(values)


def success_rates(cases: Sequence[EvalCase], threshold: float = 0.5) -> tuple[Fraction, Fraction]:
    """Return ``(I-SR, SR)``: instance success is IoU >= threshold."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    thr = Fraction(threshold)
    n_inst = n_ok = n_case_ok = 0
    for case in cases:
        ok = [v >= thr for v in case.ious()]
        n_inst += len(ok)
        n_ok += sum(ok)
        n_case_ok += all(ok) and bool(ok)
    if not cases or not n_inst:
        return Fraction(0), Fraction(0)
    return Fraction(n_ok, n_inst), Fraction(n_case_ok, len(cases))


def case_from_dict(data: dict, index: int = 0) -> EvalCase:
    """``{"case_id": ..., "instances": [{"id", "target": [x,y,w,h], "pred": [x,y,w,h]}]}``."""
    case_id = str(data.get("case_id", index))
    ids, targets, preds = [], [], []
    for item in data["instances"]:
        try:
            targets.append(BBox(*item["target"]))
            preds.append(BBox(*item["pred"]))
        except (SceneError, TypeError) as exc:
            raise SceneError(f"case {case_id}, instance {item.get('id')}: {exc}", instance_id=item.get("id")) from None
        ids.append(int(item["id"]))
    return EvalCase(case_id, tuple(ids), tuple(targets), tuple(preds))


def load_cases(path: str | Path) -> list[EvalCase]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, list):
        raise SceneError(f"{path}: expected a JSON list of cases")
    try:
        return [case_from_dict(d, k) for k, d in enumerate(data)]
    except (KeyError, ValueError) as exc:
        if isinstance(exc, SceneError):
            raise
        raise SceneError(f"{path}: malformed case ({exc})") from None
