"""Prompt and response contracts for both evaluation paradigms.

End-to-end: one planner returns a grounded plan as text (parsed by
:mod:`groundplan.dsl`). Decoupled: a planner returns natural-language steps,
and each step is classified into a primitive and grounded by a separate
detection / pointing service, or by marks on a Set-of-Mark overlay.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from PIL import Image, ImageDraw

from groundplan.adapters.base import (
    BackendError,
    BackendRequest,
    Client,
    ImageLike,
    substitute_prompt,
)
from groundplan.model import BBox, GeometryError, GroundedAction, Point2D, Primitive

DEFAULT_SCORE_FLOOR = 0.3


def load_template(name: str, prompt_dir: str | Path | None = None, model_id: str | None = None) -> str:
    """Prompt template lookup: per-model override, then override dir, then packaged."""
    if prompt_dir:
        base = Path(prompt_dir)
        candidates = []
        if model_id:
            candidates.append(base / model_id.replace("/", "_") / f"{name}.txt")
        candidates.append(base / f"{name}.txt")
        for path in candidates:
            if path.exists():
                return path.read_text(encoding="utf-8")
    return resources.files("groundplan").joinpath("prompts", f"{name}.txt").read_text(
        encoding="utf-8"
    )


def request_grounded_plan(
    client: Client,
    image: ImageLike,
    instruction: str,
    prompt_template: str,
    params: dict | None = None,
    meta: dict | None = None,
):
    """Ask a planner for a spatially grounded plan; returns the request record."""
    prompt = substitute_prompt(prompt_template, instruction)
    req = BackendRequest("grounded_plan", prompt, (image,), dict(params or {}), dict(meta or {}))
    return client.call(req)


_STEP_PREFIX = re.compile(r"^\s*(?:(?:step\s*)?\d+\s*[.):\-]|[-*•])\s+", re.IGNORECASE)


def extract_steps(text: str) -> list[str]:
    """Numbered or bulleted lines, in order; everything else is prose."""
    steps = []
    for line in (text or "").splitlines():
        m = _STEP_PREFIX.match(line)
        if not m:
            continue
        step = line[m.end():].strip().strip("*").strip()
        if step:
            steps.append(step)
    return steps


def request_language_plan(
    client: Client,
    image: ImageLike,
    instruction: str,
    prompt_template: str,
    params: dict | None = None,
    meta: dict | None = None,
):
    prompt = substitute_prompt(prompt_template, instruction)
    req = BackendRequest("language_plan", prompt, (image,), dict(params or {}), dict(meta or {}))
    rec = client.call(req)
    return extract_steps(rec.response), rec


_KEYWORDS = [
    (Primitive.GRASP, r"grasp|grab|pick(?:\s+up)?|take"),
    (Primitive.PLACE, r"place|put|drop|set\s+down|release"),
    (Primitive.OPEN, r"open"),
    (Primitive.CLOSE, r"close|shut"),
]
_KEYWORD_RE = re.compile(
    "|".join(f"(?P<{p.value}>\\b(?:{pat})\\b)" for p, pat in _KEYWORDS), re.IGNORECASE
)
_ARTICLES = re.compile(r"^(?:the|a|an|it|them|this|that)\b\s*", re.IGNORECASE)
_DESTINATION = re.compile(r"\b(?:onto|into|on top of|inside|on|in|to|at)\b", re.IGNORECASE)
_SPLIT = re.compile(r"\s*(?:,\s*)?\b(?:and then|then|and)\b\s*", re.IGNORECASE)


def classify_step(step: str) -> Primitive | None:
    """Earliest primitive keyword in the step, or None."""
    m = _KEYWORD_RE.search(step)
    if m is None:
        return None
    return Primitive(m.lastgroup)


def split_compound_step(step: str) -> list[str]:
    """``"pick up the cup and place it on the tray"`` -> two steps.

    Only splits where both sides carry a primitive keyword.
    """
    parts = [p for p in _SPLIT.split(step) if p.strip()]
    if len(parts) < 2:
        return [step]
    out: list[str] = []
    for part in parts:
        if out and classify_step(part) is None:
            out[-1] = f"{out[-1]} and {part}"
        else:
            out.append(part)
    if any(classify_step(p) is None for p in out):
        return [step]
    return out


def _strip_phrase(text: str) -> str:
    text = text.strip(" .,:;!\"'")
    prev = None
    while prev != text:
        prev = text
        text = _ARTICLES.sub("", text).strip()
    return text


def step_object_phrase(step: str, primitive: Primitive) -> str:
    """The object (or destination, for place) named by a step."""
    m = _KEYWORD_RE.search(step)
    rest = step[m.end():] if m else step
    if primitive is Primitive.PLACE:
        dests = list(_DESTINATION.finditer(rest))
        if dests:
            rest = rest[dests[0].end():]
    else:
        rest = re.split(r"\b(?:from|with the gripper)\b", rest, maxsplit=1, flags=re.IGNORECASE)[0]
    phrase = _strip_phrase(rest)
    return phrase or step.strip() or primitive.value


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float
    label: str = ""


def detect(client: Client, image: ImageLike, text: str, meta: dict | None = None) -> list[Detection]:
    rec = client.call(BackendRequest("detect", text, (image,), {}, dict(meta or {})))
    return parse_detections(rec.response)


def parse_detections(response: str) -> list[Detection]:
    try:
        payload = json.loads(response or "{}")
    except json.JSONDecodeError as exc:
        raise BackendError(f"malformed detect response: {exc}") from None
    out = []
    for d in payload.get("detections", []):
        try:
            out.append(Detection(BBox(*map(float, d["bbox"])), float(d.get("score", 0.0)), d.get("label", "")))
        except (KeyError, TypeError, ValueError, GeometryError):
            continue
    return out


def point(client: Client, image: ImageLike, text: str, meta: dict | None = None) -> Point2D | None:
    rec = client.call(BackendRequest("point", text, (image,), {}, dict(meta or {})))
    try:
        payload = json.loads(rec.response or "{}")
        coords = payload.get("point")
        return Point2D(*map(float, coords)) if coords else None
    except (json.JSONDecodeError, TypeError, ValueError, GeometryError):
        return None


def track(
    client: Client, frames: Sequence[ImageLike], text: str, first_frame: int = 0, meta: dict | None = None
) -> dict[int, BBox]:
    """Track ``text`` over ``frames``; keys are absolute frame indices."""
    rec = client.call(BackendRequest("track", text, tuple(frames), {}, dict(meta or {})))
    try:
        payload = json.loads(rec.response or "{}")
    except json.JSONDecodeError as exc:
        raise BackendError(f"malformed track response: {exc}", rec.request_hash) from None
    out = {}
    for key, coords in (payload.get("track") or {}).items():
        try:
            out[first_frame + int(key)] = BBox(*map(float, coords))
        except (TypeError, ValueError, GeometryError):
            continue
    return dict(sorted(out.items()))


def ground_language_step(
    grounder: Client,
    image: ImageLike,
    step: str,
    score_floor: float = DEFAULT_SCORE_FLOOR,
    meta: dict | None = None,
) -> GroundedAction | None:
    """Ground one natural-language step.

    Returns None when the step names no primitive. A step whose target cannot
    be localized comes back with ``grounding=None`` and scores as a failure.
    """
    primitive = classify_step(step)
    if primitive is None:
        return None
    phrase = step_object_phrase(step, primitive)
    if primitive is Primitive.PLACE:
        return GroundedAction(primitive, phrase, point(grounder, image, phrase, meta))
    candidates = [d for d in detect(grounder, image, phrase, meta) if d.score >= score_floor]
    if not candidates:
        return GroundedAction(primitive, phrase, None)
    best = max(candidates, key=lambda d: d.score)  # first wins on ties
    return GroundedAction(primitive, phrase, best.bbox)


@dataclass(frozen=True)
class Mark:
    id: int
    bbox: BBox


@dataclass
class SoMOverlay:
    image: Image.Image
    marks: list[Mark]

    def lookup(self, mark_id: int) -> BBox | None:
        for m in self.marks:
            if m.id == mark_id:
                return m.bbox
        return None


MARK_COLOR = (255, 255, 0)


def render_som_overlay(image: ImageLike, proposals: Sequence[BBox]) -> SoMOverlay:
    """Number proposals top-to-bottom, left-to-right and draw the marks."""
    if not proposals:
        raise ValueError("at least one proposal is required")
    base = image.copy() if isinstance(image, Image.Image) else Image.open(image)
    base = base.convert("RGB")
    ordered = sorted(proposals, key=lambda b: (b.y_min, b.x_min, b.y_max, b.x_max))
    marks = [Mark(i + 1, b) for i, b in enumerate(ordered)]
    draw = ImageDraw.Draw(base)
    w, h = base.size
    for m in marks:
        b = m.bbox
        draw.rectangle(
            [b.x_min * w, b.y_min * h, b.x_max * w - 1, b.y_max * h - 1], outline=MARK_COLOR, width=1
        )
        cx, cy = b.center.x * w, b.center.y * h
        label = str(m.id)
        tw, th = draw.textbbox((0, 0), label)[2:]
        draw.rectangle([cx - tw / 2 - 2, cy - th / 2 - 2, cx + tw / 2 + 2, cy + th / 2 + 2], fill=(0, 0, 0))
        draw.text((cx - tw / 2, cy - th / 2), label, fill=MARK_COLOR)
    return SoMOverlay(base, marks)


_MARK_REF = re.compile(r"(?:\bmark(?:er)?\s*#?\s*|#|\[)(\d+)", re.IGNORECASE)


def resolve_mark_reference(overlay: SoMOverlay, text: str) -> BBox | None:
    m = _MARK_REF.search(text)
    if m is None:
        return None
    return overlay.lookup(int(m.group(1)))


def ground_som_step(overlay: SoMOverlay, step: str) -> GroundedAction | None:
    primitive = classify_step(step)
    if primitive is None:
        return None
    m = _MARK_REF.search(step)
    target = f"mark {m.group(1)}" if m else step_object_phrase(step, primitive)
    box = resolve_mark_reference(overlay, step)
    if box is None:
        return GroundedAction(primitive, target, None)
    if primitive is Primitive.PLACE:
        return GroundedAction(primitive, target, box.center)
    return GroundedAction(primitive, target, box)


def som_prompt(template: str, instruction: str, overlay: SoMOverlay) -> str:
    listing = ", ".join(f"mark {m.id}" for m in overlay.marks)
    return substitute_prompt(template, instruction) + f"\nAvailable marks: {listing}\n"
