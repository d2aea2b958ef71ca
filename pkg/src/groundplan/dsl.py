"""Parsing of model-emitted grounded plans and canonical plan text.

Two surface syntaxes are accepted:

* call style, one statement per line::

      grasp("blue box", [120, 80, 240, 200])
      place("on the tray", [400, 310])

* a JSON array of objects with ``action``, ``target`` and ``bbox`` or
  ``point`` keys, possibly wrapped in prose or markdown fences.

Coordinates may be pixels or normalized fractions. A statement whose
coordinate slots are all <= 1.0 and written with a fractional part is read
as normalized; anything else is divided by the image size. Values up to 5%
outside the image are clamped with a warning, beyond that the statement is
dropped with an error. Parsing never raises on malformed statements.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Sequence

from groundplan.model import (
    BBox,
    GeometryError,
    GroundedAction,
    PlanError,
    Point2D,
    PredictedPlan,
    Primitive,
)

CLAMP_MARGIN = 0.05

_CALL_HEAD = re.compile(r"\b(open|close|grasp|place)\s*\(", re.IGNORECASE)
_CALL = re.compile(
    r"""\b(?P<prim>open|close|grasp|place)\s*\(\s*
        (?:target(?:_text)?\s*=\s*)?
        (?:"(?P<dq>(?:[^"\\]|\\.)*)"|'(?P<sq>[^']*)')\s*,\s*
        (?:(?:bbox|point|box)\s*=\s*)?
        [\[(](?P<coords>[^\])]*)[\])]\s*\)""",
    re.IGNORECASE | re.VERBOSE,
)
_NUMBER = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


class Severity(str, enum.Enum):
    WARNING = "warning"
    ERROR = "error"


@dataclass(frozen=True)
class ParseDiagnostic:
    line_index: int
    severity: Severity
    message: str
    raw_fragment: str = ""

    def to_json(self) -> dict:
        return {
            "line": self.line_index,
            "severity": self.severity.value,
            "message": self.message,
            "fragment": self.raw_fragment,
        }


@dataclass
class ParseResult:
    plan: PredictedPlan
    diagnostics: list[ParseDiagnostic] = field(default_factory=list)

    @property
    def errors(self) -> list[ParseDiagnostic]:
        return [d for d in self.diagnostics if d.severity is Severity.ERROR]

    @property
    def warnings(self) -> list[ParseDiagnostic]:
        return [d for d in self.diagnostics if d.severity is Severity.WARNING]


class StatementError(ValueError):
    pass


def _parse_number(token: Any) -> tuple[float, bool]:
    """Return (value, looks_fractional)."""
    if isinstance(token, bool):
        raise StatementError(f"not a number: {token!r}")
    if isinstance(token, int):
        return float(token), False
    if isinstance(token, float):
        if not math.isfinite(token):
            raise StatementError(f"non-finite coordinate {token!r}")
        return token, True
    text = str(token).strip()
    if not _NUMBER.match(text):
        raise StatementError(f"not a number: {text!r}")
    value = float(text)
    if not math.isfinite(value):
        raise StatementError(f"non-finite coordinate {text!r}")
    return value, ("." in text or "e" in text.lower())


def normalize_coords(
    raw: Sequence[Any], width: int, height: int
) -> tuple[list[float], list[str]]:
    """Convert raw coordinate slots (x, y, x, y, ...) to clamped fractions.

    Returns the values and a list of warning messages. Raises StatementError
    for values too far outside the image.
    """
    parsed = [_parse_number(t) for t in raw]
    values = [v for v, _ in parsed]
    normalized = all(v <= 1.0 for v in values) and any(frac for _, frac in parsed)
    if not normalized:
        values = [v / (width if i % 2 == 0 else height) for i, v in enumerate(values)]
    warnings = []
    out = []
    for v in values:
        if v < 0.0 or v > 1.0:
            excess = -v if v < 0.0 else v - 1.0
            if excess > CLAMP_MARGIN + 1e-12:
                raise StatementError(f"coordinate {v:.4f} out of image")
            warnings.append(f"coordinate {v:.4f} clamped into image")
            v = min(1.0, max(0.0, v))
        out.append(v)
    return out, warnings


def build_action(
    primitive: Primitive, target: str, raw_coords: Sequence[Any], width: int, height: int
) -> tuple[GroundedAction, list[str]]:
    target = target.strip()
    if not target:
        raise StatementError("empty target text")
    coords, warnings = normalize_coords(raw_coords, width, height)
    try:
        if primitive is Primitive.PLACE:
            if len(coords) == 4:
                x1, y1, x2, y2 = coords
                grounding = Point2D((x1 + x2) / 2, (y1 + y2) / 2)
                warnings.append("place given a box; using its center")
            elif len(coords) == 2:
                grounding = Point2D(*coords)
            else:
                raise StatementError(f"place expects 2 coordinates, got {len(coords)}")
        else:
            if len(coords) != 4:
                raise StatementError(
                    f"{primitive.value} expects 4 coordinates, got {len(coords)}"
                )
            x1, y1, x2, y2 = coords
            if x1 > x2 or y1 > y2:
                x1, x2 = min(x1, x2), max(x1, x2)
                y1, y2 = min(y1, y2), max(y1, y2)
                warnings.append("box corners reordered")
            grounding = BBox(x1, y1, x2, y2)
        return GroundedAction(primitive, target, grounding), warnings
    except (GeometryError, PlanError) as exc:
        raise StatementError(str(exc)) from None


def _line_of(text: str, offset: int) -> int:
    return text.count("\n", 0, offset)


def _find_object_array(text: str) -> tuple[list, int] | None:
    """Locate the first JSON array of objects embedded in ``text``."""
    decoder = json.JSONDecoder()
    pos = text.find("[")
    while pos != -1:
        try:
            value, _ = decoder.raw_decode(text, pos)
        except (json.JSONDecodeError, RecursionError):
            value = None
        if isinstance(value, list) and value and all(isinstance(v, dict) for v in value):
            return value, pos
        pos = text.find("[", pos + 1)
    return None


def _element_action(
    element: dict, width: int, height: int
) -> tuple[GroundedAction, list[str]]:
    kind = element.get("action", element.get("primitive"))
    if not isinstance(kind, str):
        raise StatementError("missing action")
    try:
        primitive = Primitive.parse(kind)
    except ValueError as exc:
        raise StatementError(str(exc)) from None
    target = element.get("target", element.get("target_text", element.get("object")))
    if not isinstance(target, str):
        raise StatementError("missing target")
    coords = None
    for key in ("point", "bbox", "box") if primitive is Primitive.PLACE else ("bbox", "box"):
        if key in element:
            coords = element[key]
            break
    if not isinstance(coords, list):
        raise StatementError("missing coordinates")
    return build_action(primitive, target, coords, width, height)


def _parse_object_array(text, array, offset, width, height) -> ParseResult:
    line = _line_of(text, offset)
    actions, diags = [], []
    for i, element in enumerate(array):
        fragment = json.dumps(element, ensure_ascii=False)[:200]
        try:
            action, warnings = _element_action(element, width, height)
        except StatementError as exc:
            diags.append(ParseDiagnostic(line, Severity.ERROR, f"element {i}: {exc}", fragment))
            continue
        diags.extend(ParseDiagnostic(line, Severity.WARNING, w, fragment) for w in warnings)
        actions.append(action)
    return ParseResult(PredictedPlan(tuple(actions)), diags)


def _call_target(match: re.Match) -> str:
    if match.group("dq") is not None:
        try:
            return json.loads('"' + match.group("dq") + '"')
        except json.JSONDecodeError:
            return match.group("dq")
    return match.group("sq")


def _parse_calls(text: str, width: int, height: int) -> ParseResult:
    actions, diags = [], []
    seen_statement = False
    # only "\n" separates statements; targets may contain other line breaks
    for idx, line in enumerate(text.split("\n")):
        heads = list(_CALL_HEAD.finditer(line))
        if not heads:
            continue
        seen_statement = True
        fragment = line.strip()[:200]
        match = _CALL.search(line, heads[0].start())
        if match is None or match.start() != heads[0].start():
            diags.append(ParseDiagnostic(idx, Severity.ERROR, "unparseable statement", fragment))
            continue
        if len(heads) > 1 and any(h.start() >= match.end() for h in heads):
            diags.append(
                ParseDiagnostic(idx, Severity.WARNING, "extra statements on line ignored", fragment)
            )
        primitive = Primitive.parse(match.group("prim"))
        coords = [t for t in match.group("coords").split(",")]
        if coords and not coords[-1].strip():
            coords = coords[:-1]
        try:
            action, warnings = build_action(primitive, _call_target(match), coords, width, height)
        except StatementError as exc:
            diags.append(ParseDiagnostic(idx, Severity.ERROR, str(exc), fragment))
            continue
        diags.extend(ParseDiagnostic(idx, Severity.WARNING, w, fragment) for w in warnings)
        actions.append(action)
    if not seen_statement:
        diags.append(
            ParseDiagnostic(0, Severity.ERROR, "no plan statements found", text.strip()[:200])
        )
    return ParseResult(PredictedPlan(tuple(actions)), diags)


def parse_plan(text: str, image_width: int, image_height: int) -> ParseResult:
    if image_width <= 0 or image_height <= 0:
        raise ValueError("image dimensions must be positive")
    if not text or not text.strip():
        return ParseResult(
            PredictedPlan(), [ParseDiagnostic(0, Severity.WARNING, "empty response", "")]
        )
    found = _find_object_array(text)
    if found is not None:
        array, offset = found
        return _parse_object_array(text, array, offset, image_width, image_height)
    return _parse_calls(text, image_width, image_height)


def format_action(action: GroundedAction, image_width: int, image_height: int) -> str:
    target = json.dumps(action.target_text, ensure_ascii=False)
    if action.grounding is None:
        return f"# ungroundable: {action.primitive.value}({target})"
    coords = ",".join(str(v) for v in action.grounding.to_pixels(image_width, image_height))
    return f"{action.primitive.value}({target}, [{coords}])"


def serialize_plan(plan: PredictedPlan, image_width: int, image_height: int) -> str:
    """Canonical call-style text with pixel-integer coordinates."""
    return "\n".join(format_action(a, image_width, image_height) for a in plan.actions)
