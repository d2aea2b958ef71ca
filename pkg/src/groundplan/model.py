"""Domain types for grounded plans, benchmark episodes and 2D geometry.

All coordinates are normalized image fractions in [0, 1]. Pixel values only
appear at file and text boundaries, where the image dimensions are known.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

MAX_UNITS = 26


class GeometryError(ValueError):
    """Raised when a box or point violates its invariants."""


class PlanError(ValueError):
    """Raised when a plan or episode violates its invariants at ingest."""


def round_half_away(value: float) -> int:
    return int(math.copysign(math.floor(abs(value) + 0.5), value))


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite box coordinates {vals}")
        if not (0.0 <= self.x_min < self.x_max <= 1.0 and 0.0 <= self.y_min < self.y_max <= 1.0):
            raise GeometryError(f"invalid box {vals}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> Point2D:
        return Point2D((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def to_pixels(self, width: int, height: int) -> list[int]:
        return [
            round_half_away(self.x_min * width),
            round_half_away(self.y_min * height),
            round_half_away(self.x_max * width),
            round_half_away(self.y_max * height),
        ]

    @classmethod
    def from_pixels(cls, coords: Sequence[float], width: int, height: int) -> BBox:
        x1, y1, x2, y2 = coords
        return cls(x1 / width, y1 / height, x2 / width, y2 / height)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise GeometryError(f"point out of image ({self.x}, {self.y})")

    def to_pixels(self, width: int, height: int) -> list[int]:
        return [round_half_away(self.x * width), round_half_away(self.y * height)]

    @classmethod
    def from_pixels(cls, coords: Sequence[float], width: int, height: int) -> Point2D:
        x, y = coords
        return cls(x / width, y / height)

    def as_list(self) -> list[float]:
        return [self.x, self.y]


Grounding = Union[BBox, Point2D]


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two axis-aligned boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def contains(region: BBox, p: Point2D) -> bool:
    # closed interval: boundary points count as inside
    return region.x_min <= p.x <= region.x_max and region.y_min <= p.y <= region.y_max


class Primitive(str, enum.Enum):
    OPEN = "open"
    CLOSE = "close"
    GRASP = "grasp"
    PLACE = "place"

    @classmethod
    def parse(cls, text: str) -> Primitive:
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown primitive {text!r}") from None


@dataclass(frozen=True)
class GroundedAction:
    """One primitive with its spatial target.

    ``grounding`` is None only for actions a grounding backend failed to
    localize; such actions are kept so they can be scored as failures.
    """

    primitive: Primitive
    target_text: str
    grounding: Grounding | None

    def __post_init__(self):
        if not self.target_text or not self.target_text.strip():
            raise PlanError("target_text must be non-empty")
        if self.grounding is None:
            return
        if self.primitive is not Primitive.PLACE and not isinstance(self.grounding, BBox):
            raise PlanError(f"{self.primitive.value} must be grounded with a box")

    @property
    def groundable(self) -> bool:
        return self.grounding is not None


@dataclass(frozen=True)
class Manipulation:
    grasp: GroundedAction
    place: GroundedAction

    def __post_init__(self):
        if self.grasp.primitive is not Primitive.GRASP or self.place.primitive is not Primitive.PLACE:
            raise PlanError("manipulation unit must be grasp followed by place")

    @property
    def actions(self) -> tuple[GroundedAction, ...]:
        return (self.grasp, self.place)


@dataclass(frozen=True)
class Articulation:
    action: GroundedAction

    def __post_init__(self):
        if self.action.primitive not in (Primitive.OPEN, Primitive.CLOSE):
            raise PlanError("articulation unit must be open or close")

    @property
    def actions(self) -> tuple[GroundedAction, ...]:
        return (self.action,)


@dataclass(frozen=True)
class Malformed:
    actions: tuple[GroundedAction, ...]


AtomicUnit = Union[Manipulation, Articulation, Malformed]


def pair_atomic_units(actions: Sequence[GroundedAction]) -> list[AtomicUnit]:
    """Fuse a flat action list into scoring units, left to right.

    A grasp directly followed by a place becomes one Manipulation; open and
    close stand alone. Orphaned grasps or places each become a Malformed unit.
    """
    units: list[AtomicUnit] = []
    i = 0
    n = len(actions)
    while i < n:
        a = actions[i]
        if a.primitive is Primitive.GRASP:
            if i + 1 < n and actions[i + 1].primitive is Primitive.PLACE:
                units.append(Manipulation(a, actions[i + 1]))
                i += 2
                continue
            units.append(Malformed((a,)))
        elif a.primitive is Primitive.PLACE:
            units.append(Malformed((a,)))
        else:
            units.append(Articulation(a))
        i += 1
    return units


def flatten_units(units: Iterable[AtomicUnit]) -> list[GroundedAction]:
    return [a for u in units for a in u.actions]


@dataclass(frozen=True)
class PredictedPlan:
    actions: tuple[GroundedAction, ...] = ()
    units: tuple[AtomicUnit, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "units", tuple(pair_atomic_units(self.actions)))
        for a in self.actions:
            if a.primitive is Primitive.PLACE and isinstance(a.grounding, BBox):
                raise PlanError("predicted place must be grounded with a point")

    def __len__(self):
        return len(self.actions)


@dataclass(frozen=True)
class GtBlock:
    units: tuple[AtomicUnit, ...]
    unordered: bool = False

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))
        if not self.units:
            raise PlanError("GT block must contain at least one unit")
        for u in self.units:
            if isinstance(u, Malformed):
                raise PlanError("GT plan contains an unpaired grasp or place")
            for a in u.actions:
                if not isinstance(a.grounding, BBox):
                    raise PlanError("GT actions must be grounded with boxes")


@dataclass(frozen=True)
class GtPlan:
    blocks: tuple[GtBlock, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.n_units < 1:
            raise PlanError("GT plan must contain at least one unit")

    @property
    def units(self) -> list[AtomicUnit]:
        return [u for b in self.blocks for u in b.units]

    @property
    def n_units(self) -> int:
        return sum(len(b.units) for b in self.blocks)

    @property
    def bucket(self) -> HorizonBucket:
        return bucket_for(self.n_units)

    @classmethod
    def sequential(cls, units: Sequence[AtomicUnit]) -> GtPlan:
        """Every unit in its own ordered block."""
        return cls(tuple(GtBlock((u,)) for u in units))


def gt_to_predicted(gt: GtPlan) -> PredictedPlan:
    """The GT plan as a planner would emit it: place regions become their centers."""
    actions = []
    for u in gt.units:
        for a in u.actions:
            if a.primitive is Primitive.PLACE:
                a = GroundedAction(a.primitive, a.target_text, a.grounding.center)
            actions.append(a)
    return PredictedPlan(tuple(actions))


class HorizonBucket(str, enum.Enum):
    SHORT = "short"
    MEDIUM = "medium"
    LONG = "long"


def bucket_for(n_units: int) -> HorizonBucket:
    if not 1 <= n_units <= MAX_UNITS:
        raise PlanError(f"unit count {n_units} outside 1..{MAX_UNITS}")
    if n_units <= 4:
        return HorizonBucket.SHORT
    if n_units <= 8:
        return HorizonBucket.MEDIUM
    return HorizonBucket.LONG


class InstructionType(str, enum.Enum):
    EXPLICIT = "explicit"
    IMPLICIT = "implicit"


@dataclass(frozen=True)
class Episode:
    id: str
    image_ref: str
    image_width: int
    image_height: int
    explicit_instruction: str
    implicit_instruction: str
    gt_plan: GtPlan
    source_meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.image_width <= 0 or self.image_height <= 0:
            raise PlanError(f"episode {self.id}: image dims must be positive")
        if not self.explicit_instruction.strip() or not self.implicit_instruction.strip():
            raise PlanError(f"episode {self.id}: instructions must be non-empty")
        # validates the unit count range
        bucket_for(self.gt_plan.n_units)

    @property
    def bucket(self) -> HorizonBucket:
        return self.gt_plan.bucket

    def instruction(self, kind: InstructionType) -> str:
        if kind is InstructionType.EXPLICIT:
            return self.explicit_instruction
        return self.implicit_instruction
