"""Line-delimited JSON formats for benchmark datasets.

Dataset record (one episode per line)::

    {"id": "ep-1", "image": "images/ep-1.png", "image_width": 640, "image_height": 480,
     "instruction_explicit": "...", "instruction_implicit": "...",
     "plan": [{"unordered": false, "actions": [
         {"action": "grasp", "target": "cup", "bbox": [x1, y1, x2, y2]},
         {"action": "place", "target": "tray", "bbox": [x1, y1, x2, y2]}]}],
     "source_meta": {}}

Coordinates in files are pixels. ``plan`` may also be a flat action list, in
which case every unit becomes its own ordered block. Relative image paths
resolve against the dataset file's directory.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable, Iterator

from groundplan.model import (
    BBox,
    Episode,
    GeometryError,
    GroundedAction,
    GtBlock,
    GtPlan,
    Malformed,
    PlanError,
    Point2D,
    PredictedPlan,
    Primitive,
    pair_atomic_units,
)


def action_to_json(action: GroundedAction, width: int, height: int) -> dict:
    out = {"action": action.primitive.value, "target": action.target_text}
    g = action.grounding
    if g is None:
        out["bbox" if action.primitive is not Primitive.PLACE else "point"] = None
    elif isinstance(g, BBox):
        out["bbox"] = g.to_pixels(width, height)
    else:
        out["point"] = g.to_pixels(width, height)
    return out


def action_from_json(data: dict, width: int, height: int) -> GroundedAction:
    """Strict reader for file records; raises PlanError on any defect."""
    try:
        primitive = Primitive.parse(data["action"])
        target = str(data["target"]).strip()
        if data.get("bbox") is not None:
            grounding = BBox.from_pixels(data["bbox"], width, height)
        elif data.get("point") is not None:
            grounding = Point2D.from_pixels(data["point"], width, height)
        else:
            grounding = None
        return GroundedAction(primitive, target, grounding)
    except (KeyError, TypeError, ValueError, GeometryError) as exc:
        raise PlanError(f"bad action record {data!r}: {exc}") from None


def normalized_action_to_json(action: GroundedAction) -> dict:
    """Action with normalized coordinates (used in results logs)."""
    out = {"action": action.primitive.value, "target": action.target_text}
    key = "point" if isinstance(action.grounding, Point2D) or (
        action.grounding is None and action.primitive is Primitive.PLACE
    ) else "bbox"
    out[key] = action.grounding.as_list() if action.grounding is not None else None
    return out


def normalized_action_from_json(data: dict) -> GroundedAction:
    primitive = Primitive.parse(data["action"])
    if data.get("bbox") is not None:
        grounding = BBox(*data["bbox"])
    elif data.get("point") is not None:
        grounding = Point2D(*data["point"])
    else:
        grounding = None
    return GroundedAction(primitive, data["target"], grounding)


def plan_to_json(plan: PredictedPlan) -> list[dict]:
    return [normalized_action_to_json(a) for a in plan.actions]


def plan_from_json(data: list[dict]) -> PredictedPlan:
    return PredictedPlan(tuple(normalized_action_from_json(d) for d in data))


def _units_from_actions(actions: list[GroundedAction], where: str):
    units = pair_atomic_units(actions)
    if any(isinstance(u, Malformed) for u in units):
        raise PlanError(f"{where}: every grasp must be directly followed by a place")
    return units


def gt_plan_from_json(plan: list, width: int, height: int, where: str = "plan") -> GtPlan:
    if not isinstance(plan, list) or not plan:
        raise PlanError(f"{where}: plan must be a non-empty list")
    if all(isinstance(b, dict) and "actions" in b for b in plan):
        blocks = []
        for i, b in enumerate(plan):
            actions = [action_from_json(a, width, height) for a in b["actions"]]
            units = _units_from_actions(actions, f"{where} block {i}")
            blocks.append(GtBlock(tuple(units), bool(b.get("unordered", False))))
        return GtPlan(tuple(blocks))
    actions = [action_from_json(a, width, height) for a in plan]
    return GtPlan.sequential(_units_from_actions(actions, where))


def gt_plan_to_json(plan: GtPlan, width: int, height: int) -> list[dict]:
    return [
        {
            "unordered": b.unordered,
            "actions": [action_to_json(a, width, height) for u in b.units for a in u.actions],
        }
        for b in plan.blocks
    ]


def episode_from_json(data: dict, base_dir: str | os.PathLike | None = None) -> Episode:
    eid = str(data.get("id", "")).strip()
    if not eid:
        raise PlanError("episode without id")
    try:
        width, height = int(data["image_width"]), int(data["image_height"])
        image = str(data["image"])
    except (KeyError, TypeError, ValueError) as exc:
        raise PlanError(f"episode {eid}: missing image fields ({exc})") from None
    if base_dir is not None and not os.path.isabs(image):
        image = str(Path(base_dir) / image)
    gt = gt_plan_from_json(data.get("plan"), width, height, f"episode {eid}")
    return Episode(
        id=eid,
        image_ref=image,
        image_width=width,
        image_height=height,
        explicit_instruction=str(data.get("instruction_explicit", "")),
        implicit_instruction=str(data.get("instruction_implicit", "")),
        gt_plan=gt,
        source_meta=dict(data.get("source_meta") or {}),
    )


def episode_to_json(ep: Episode, image: str | None = None) -> dict:
    return {
        "id": ep.id,
        "image": image if image is not None else ep.image_ref,
        "image_width": ep.image_width,
        "image_height": ep.image_height,
        "instruction_explicit": ep.explicit_instruction,
        "instruction_implicit": ep.implicit_instruction,
        "plan": gt_plan_to_json(ep.gt_plan, ep.image_width, ep.image_height),
        "source_meta": ep.source_meta,
    }


def iter_jsonl(path: str | os.PathLike) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                yield lineno, json.loads(line)


def load_dataset(path: str | os.PathLike) -> list[Episode]:
    """Read and validate a dataset file; ids must be unique."""
    path = Path(path)
    episodes, seen = [], set()
    for lineno, record in iter_jsonl(path):
        try:
            ep = episode_from_json(record, path.parent)
        except PlanError as exc:
            raise PlanError(f"{path}:{lineno}: {exc}") from None
        if ep.id in seen:
            raise PlanError(f"{path}:{lineno}: duplicate episode id {ep.id!r}")
        seen.add(ep.id)
        episodes.append(ep)
    return episodes


def write_jsonl(path: str | os.PathLike, records: Iterable[dict]) -> int:
    """Write records atomically; the file is only replaced once complete."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    n = 0
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(dumps(rec) + "\n")
                n += 1
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return n


def dumps(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=True)


def save_dataset(path: str | os.PathLike, episodes: Iterable[Episode]) -> int:
    path = Path(path)
    records = []
    for ep in episodes:
        image = ep.image_ref
        try:
            image = os.path.relpath(image, path.parent) if os.path.isabs(image) else image
        except ValueError:
            pass
        records.append(episode_to_json(ep, image))
    return write_jsonl(path, records)
