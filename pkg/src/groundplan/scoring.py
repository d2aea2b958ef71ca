"""Sub-action success, sequence matching and the TSR / ARR metrics."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from groundplan.model import (
    Articulation,
    AtomicUnit,
    BBox,
    Episode,
    GtPlan,
    HorizonBucket,
    InstructionType,
    Malformed,
    Manipulation,
    Point2D,
    contains,
    iou,
)


@dataclass(frozen=True)
class Thresholds:
    tau_g: float = 0.5
    tau_d: float = 0.5

    def __post_init__(self):
        for name in ("tau_g", "tau_d"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")

    @classmethod
    def parse(cls, text: str) -> Thresholds:
        """Parse ``"tau_g,tau_d"`` (a single value sets both)."""
        parts = [p for p in text.split(",") if p.strip()]
        if len(parts) == 1:
            parts = parts * 2
        if len(parts) != 2:
            raise ValueError(f"expected tau_g,tau_d, got {text!r}")
        return cls(float(parts[0]), float(parts[1]))


@dataclass(frozen=True)
class UnitMatch:
    gt_index: int
    pred_index: int | None
    success: bool


@dataclass(frozen=True)
class EpisodeScore:
    tsr: bool
    arr_matched: int
    arr_total: int
    per_unit: tuple[UnitMatch, ...] = field(default=())

    def __post_init__(self):
        if self.arr_matched > self.arr_total:
            raise ValueError("matched units exceed GT units")
        if self.tsr and self.arr_matched != self.arr_total:
            raise ValueError("successful task must recall every unit")

    @classmethod
    def failed(cls, gt_plan: GtPlan) -> EpisodeScore:
        n = gt_plan.n_units
        return cls(False, 0, n, tuple(UnitMatch(i, None, False) for i in range(n)))

    def to_json(self) -> dict:
        return {
            "tsr": self.tsr,
            "arr_matched": self.arr_matched,
            "arr_total": self.arr_total,
            "per_unit": [[m.gt_index, m.pred_index, m.success] for m in self.per_unit],
        }

    @classmethod
    def from_json(cls, data: dict) -> EpisodeScore:
        return cls(
            bool(data["tsr"]),
            int(data["arr_matched"]),
            int(data["arr_total"]),
            tuple(UnitMatch(g, p, bool(s)) for g, p, s in data.get("per_unit", [])),
        )


def unit_success(pred: AtomicUnit, gt: AtomicUnit, th: Thresholds = Thresholds()) -> bool:
    """Spatial success of one predicted unit against one GT unit."""
    if isinstance(gt, Malformed):
        raise ValueError("GT unit must not be malformed")
    if isinstance(pred, Manipulation) and isinstance(gt, Manipulation):
        pred_box, pred_point = pred.grasp.grounding, pred.place.grounding
        if not isinstance(pred_box, BBox) or not isinstance(pred_point, Point2D):
            return False
        return iou(pred_box, gt.grasp.grounding) >= th.tau_g and contains(
            gt.place.grounding, pred_point
        )
    if isinstance(pred, Articulation) and isinstance(gt, Articulation):
        if pred.action.primitive is not gt.action.primitive:
            return False
        if not isinstance(pred.action.grounding, BBox):
            return False
        return iou(pred.action.grounding, gt.action.grounding) >= th.tau_d
    return False


def maximum_matching(
    n_left: int, n_right: int, edge: Callable[[int, int], bool]
) -> dict[int, int]:
    """Maximum-cardinality bipartite matching by augmenting paths.

    Left vertices are tried in index order and each scans right vertices in
    index order, so the result is a deterministic function of the edge set.
    Returns a left -> right mapping.
    """
    adj = [[j for j in range(n_right) if edge(i, j)] for i in range(n_left)]
    match_right: list[int | None] = [None] * n_right

    def augment(i: int, seen: list[bool]) -> bool:
        for j in adj[i]:
            if seen[j]:
                continue
            seen[j] = True
            if match_right[j] is None or augment(match_right[j], seen):
                match_right[j] = i
                return True
        return False

    for i in range(n_left):
        augment(i, [False] * n_right)
    return {i: j for j, i in enumerate(match_right) if i is not None}


def match_episode_ordered(
    pred_units: Sequence[AtomicUnit], gt_plan: GtPlan, th: Thresholds = Thresholds()
) -> tuple[bool, list[UnitMatch]]:
    """Sequence-level success: blocks in order, permutations inside unordered blocks.

    Returns the TSR verdict and, when it holds, the pred index aligned to each
    GT unit. A failing verdict returns the alignment up to the first failing block.
    """
    details: list[UnitMatch] = []
    if len(pred_units) != gt_plan.n_units:
        return False, details
    cursor = 0
    for block in gt_plan.blocks:
        k = len(block.units)
        window = pred_units[cursor : cursor + k]
        base = cursor
        gt_base = len(details)
        if block.unordered:
            assignment = maximum_matching(
                k, k, lambda i, j: unit_success(window[i], block.units[j], th)
            )
            if len(assignment) != k:
                return False, details
            inverse = {j: i for i, j in assignment.items()}
            details.extend(UnitMatch(gt_base + j, base + inverse[j], True) for j in range(k))
        else:
            for j in range(k):
                if not unit_success(window[j], block.units[j], th):
                    return False, details
                details.append(UnitMatch(gt_base + j, base + j, True))
        cursor += k
    return True, details


def arr_episode(
    pred_units: Sequence[AtomicUnit], gt_plan: GtPlan, th: Thresholds = Thresholds()
) -> tuple[int, int, list[UnitMatch]]:
    """Order-free recall: maximum matching between all pred and all GT units."""
    gt_units = gt_plan.units
    assignment = maximum_matching(
        len(pred_units), len(gt_units), lambda i, j: unit_success(pred_units[i], gt_units[j], th)
    )
    by_gt = {j: i for i, j in assignment.items()}
    per_unit = [
        UnitMatch(j, by_gt.get(j), j in by_gt) for j in range(len(gt_units))
    ]
    return len(assignment), len(gt_units), per_unit


def score_episode(
    pred_units: Sequence[AtomicUnit], gt_plan: GtPlan, th: Thresholds = Thresholds()
) -> EpisodeScore:
    tsr, _ = match_episode_ordered(pred_units, gt_plan, th)
    matched, total, per_unit = arr_episode(pred_units, gt_plan, th)
    return EpisodeScore(tsr, matched, total, tuple(per_unit))


@dataclass(frozen=True)
class AggregateCell:
    instruction_type: InstructionType
    bucket: HorizonBucket
    tsr_pct: float
    arr_pct: float
    n_episodes: int
    n_units: int = 0


CELL_ORDER = [
    (kind, bucket)
    for kind in (InstructionType.EXPLICIT, InstructionType.IMPLICIT)
    for bucket in (HorizonBucket.SHORT, HorizonBucket.MEDIUM, HorizonBucket.LONG)
]


def aggregate_rows(
    rows: Iterable[tuple[InstructionType, HorizonBucket, EpisodeScore]],
) -> list[AggregateCell]:
    """Group scores by (instruction type, bucket); ARR is micro-averaged."""
    groups: dict[tuple, list[EpisodeScore]] = defaultdict(list)
    for kind, bucket, score in rows:
        groups[(InstructionType(kind), HorizonBucket(bucket))].append(score)
    cells = []
    for key in CELL_ORDER:
        scores = groups.get(key)
        if not scores:
            continue
        n = len(scores)
        total = sum(s.arr_total for s in scores)
        matched = sum(s.arr_matched for s in scores)
        cells.append(
            AggregateCell(
                key[0],
                key[1],
                100.0 * sum(s.tsr for s in scores) / n,
                100.0 * matched / total if total else 0.0,
                n,
                total,
            )
        )
    return cells


def aggregate(
    scores: Iterable[tuple[Episode, InstructionType, EpisodeScore]],
) -> list[AggregateCell]:
    return aggregate_rows((kind, ep.bucket, s) for ep, kind, s in scores)
