"""Synthetic episodes, signals and brute-force oracles for desk-scale checks.

Everything here is driven by an explicit ``numpy.random.Generator`` so runs
are reproducible from a seed. Generated GT boxes sit on the pixel grid of the
episode image, so writing them to pixel-based files loses nothing.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from groundplan.model import (
    Articulation,
    AtomicUnit,
    BBox,
    Episode,
    GroundedAction,
    GtBlock,
    GtPlan,
    Manipulation,
    Point2D,
    PredictedPlan,
    Primitive,
    contains,
    iou,
)
from groundplan.scoring import Thresholds, unit_success
from groundplan.segmentation import GripperSignal, Segment

BRUTE_FORCE_LIMIT = 8

COLORS = ["red", "blue", "green", "yellow", "white", "black", "orange", "purple", "pink", "grey"]
OBJECTS = ["cup", "spoon", "box", "marker", "sponge", "bottle", "apple", "bowl", "towel", "can"]
RECEPTACLES = ["tray", "basket", "plate", "pot", "bin", "shelf", "mat", "sink", "crate", "board"]
ARTICULATED = ["drawer", "cabinet door", "lid", "microwave door", "oven door", "box flap"]


@dataclass
class SynthesisConfig:
    seed: int = 0
    n_units: tuple[int, int] = (1, 12)
    unordered_block_prob: float = 0.3
    max_unordered_size: int = 3
    articulation_prob: float = 0.2
    duplicate_prob: float = 0.0
    box_size: tuple[float, float] = (0.06, 0.2)
    region_size: tuple[float, float] = (0.12, 0.3)
    image_size: tuple[int, int] = (320, 240)
    noise: float = 0.0
    p_correct: float = 1.0
    bbox_jitter: float = 0.0
    point_jitter: float = 0.0

    def __post_init__(self):
        for name in ("unordered_block_prob", "articulation_prob", "duplicate_prob", "p_correct"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        for name in ("n_units", "box_size", "region_size"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty")
        if self.n_units[0] < 1:
            raise ValueError("episodes need at least one unit")
        if self.max_unordered_size < 2:
            raise ValueError("unordered blocks need at least two units")


def _pixel_box(rng: np.random.Generator, size: tuple[float, float], w: int, h: int) -> BBox:
    bw = int(rng.integers(max(2, round(size[0] * w)), max(3, round(size[1] * w)) + 1))
    bh = int(rng.integers(max(2, round(size[0] * h)), max(3, round(size[1] * h)) + 1))
    x = int(rng.integers(0, w - bw + 1))
    y = int(rng.integers(0, h - bh + 1))
    return BBox(x / w, y / h, (x + bw) / w, (y + bh) / h)


def _names(rng, pool_a, pool_b, n):
    combos = [f"{a} {b}" for a in pool_a for b in pool_b]
    idx = rng.permutation(len(combos))
    out = [combos[i] for i in idx[:n]]
    # pools are large enough for MAX_UNITS; suffix only as a guard
    while len(out) < n:
        out.append(f"{combos[idx[len(out) % len(combos)]]} {len(out)}")
    return out


def _gen_units(cfg: SynthesisConfig, rng: np.random.Generator, n: int) -> list[AtomicUnit]:
    w, h = cfg.image_size
    objects = _names(rng, COLORS, OBJECTS, n)
    places = _names(rng, COLORS, RECEPTACLES, n)
    units: list[AtomicUnit] = []
    for i in range(n):
        if units and rng.random() < cfg.duplicate_prob:
            src = units[int(rng.integers(len(units)))]
            if isinstance(src, Manipulation):
                units.append(
                    Manipulation(
                        GroundedAction(Primitive.GRASP, objects[i], src.grasp.grounding),
                        GroundedAction(Primitive.PLACE, places[i], src.place.grounding),
                    )
                )
            else:
                units.append(
                    Articulation(GroundedAction(src.action.primitive, objects[i], src.action.grounding))
                )
            continue
        if rng.random() < cfg.articulation_prob:
            prim = Primitive.OPEN if rng.random() < 0.5 else Primitive.CLOSE
            name = f"{ARTICULATED[int(rng.integers(len(ARTICULATED)))]} {i + 1}"
            units.append(Articulation(GroundedAction(prim, name, _pixel_box(rng, cfg.box_size, w, h))))
        else:
            units.append(
                Manipulation(
                    GroundedAction(Primitive.GRASP, objects[i], _pixel_box(rng, cfg.box_size, w, h)),
                    GroundedAction(Primitive.PLACE, places[i], _pixel_box(rng, cfg.region_size, w, h)),
                )
            )
    return units


def _describe(unit: AtomicUnit) -> str:
    if isinstance(unit, Manipulation):
        return f"put the {unit.grasp.target_text} on the {unit.place.target_text}"
    return f"{unit.action.primitive.value} the {unit.action.target_text}"


def gen_episode(cfg: SynthesisConfig, rng: np.random.Generator, episode_id: str = "syn-0") -> Episode:
    lo, hi = cfg.n_units
    n = int(rng.integers(lo, hi + 1))
    units = _gen_units(cfg, rng, n)
    blocks = []
    i = 0
    while i < n:
        remaining = n - i
        if remaining >= 2 and rng.random() < cfg.unordered_block_prob:
            k = int(rng.integers(2, min(cfg.max_unordered_size, remaining) + 1))
            blocks.append(GtBlock(tuple(units[i : i + k]), unordered=True))
        else:
            k = 1
            blocks.append(GtBlock((units[i],)))
        i += k
    explicit = ", then ".join(_describe(u) for u in units).capitalize() + "."
    implicit = "Tidy up the scene." if n > 1 else "Take care of the " + (
        units[0].grasp.target_text if isinstance(units[0], Manipulation) else units[0].action.target_text
    ) + "."
    w, h = cfg.image_size
    return Episode(
        id=episode_id,
        image_ref=f"images/{episode_id}.png",
        image_width=w,
        image_height=h,
        explicit_instruction=explicit,
        implicit_instruction=implicit,
        gt_plan=GtPlan(tuple(blocks)),
        source_meta={"synthetic": True, "seed": cfg.seed},
    )


def gen_dataset(cfg: SynthesisConfig, n_episodes: int) -> list[Episode]:
    rng = np.random.default_rng(cfg.seed)
    return [gen_episode(cfg, rng, f"syn-{i:04d}") for i in range(n_episodes)]


def write_placeholder_image(episode: Episode, path: str | Path) -> Path:
    """Flat scene with the GT objects and regions drawn as filled rectangles."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    w, h = episode.image_width, episode.image_height
    img = Image.new("RGB", (w, h), (200, 200, 200))
    draw = ImageDraw.Draw(img)
    for k, unit in enumerate(episode.gt_plan.units):
        shade = 60 + (37 * k) % 140
        for a in unit.actions:
            b = a.grounding.to_pixels(w, h)
            fill = (shade, shade, 230) if a.primitive is Primitive.PLACE else (230, shade, shade)
            draw.rectangle([b[0], b[1], b[2] - 1, b[3] - 1], fill=fill)
    img.save(path, format="PNG")
    return path


# -- perturbation planner -------------------------------------------------

IOU_MARGIN = 0.05


def _shift_box(box: BBox, dx: float, dy: float) -> BBox | None:
    x1, y1 = box.x_min + dx, box.y_min + dy
    x2, y2 = box.x_max + dx, box.y_max + dy
    if x1 < 0 or y1 < 0 or x2 > 1 or y2 > 1:
        return None
    return BBox(x1, y1, x2, y2)


def _box_at(box: BBox, x: float, y: float) -> BBox:
    return BBox(x, y, x + box.width, y + box.height)


def _far_box(template: BBox, avoid: Sequence[BBox], tau: float, rng) -> BBox | None:
    """Same-size box whose IoU with every box in ``avoid`` stays below tau."""
    limit = tau - IOU_MARGIN
    for _ in range(400):
        x = rng.uniform(0.0, 1.0 - template.width)
        y = rng.uniform(0.0, 1.0 - template.height)
        cand = _box_at(template, x, y)
        if all(iou(cand, b) < limit for b in avoid):
            return cand
    return None


def _outside_point(regions: Sequence[BBox], rng, margin: float = 0.01) -> Point2D | None:
    for _ in range(400):
        p = Point2D(float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
        if not any(
            r.x_min - margin <= p.x <= r.x_max + margin and r.y_min - margin <= p.y <= r.y_max + margin
            for r in regions
        ):
            return p
    return None


def _correct_unit(unit: AtomicUnit, th: Thresholds, bbox_sigma: float, point_sigma: float, rng) -> list[GroundedAction]:
    if isinstance(unit, Manipulation):
        box = unit.grasp.grounding
        if bbox_sigma > 0:
            moved = _shift_box(box, *rng.normal(0.0, bbox_sigma, 2))
            if moved is not None and iou(moved, box) >= th.tau_g + IOU_MARGIN:
                box = moved
        region = unit.place.grounding
        pt = region.center
        if point_sigma > 0:
            x, y = region.center.x + rng.normal(0, point_sigma), region.center.y + rng.normal(0, point_sigma)
            shrink = 0.01
            if region.x_min + shrink <= x <= region.x_max - shrink and region.y_min + shrink <= y <= region.y_max - shrink:
                pt = Point2D(float(x), float(y))
        return [
            GroundedAction(Primitive.GRASP, unit.grasp.target_text, box),
            GroundedAction(Primitive.PLACE, unit.place.target_text, pt),
        ]
    box = unit.action.grounding
    if bbox_sigma > 0:
        moved = _shift_box(box, *rng.normal(0.0, bbox_sigma, 2))
        if moved is not None and iou(moved, box) >= th.tau_d + IOU_MARGIN:
            box = moved
    return [GroundedAction(unit.action.primitive, unit.action.target_text, box)]


def _failing_unit(unit: AtomicUnit, gt_units: Sequence[AtomicUnit], th: Thresholds, rng) -> list[GroundedAction]:
    """A unit that fails against every GT unit, by construction."""
    if isinstance(unit, Manipulation):
        manips = [u for u in gt_units if isinstance(u, Manipulation)]
        grasp_box, point = unit.grasp.grounding, unit.place.grounding.center
        modes = ["place", "grasp"] if rng.random() < 0.5 else ["grasp", "place"]
        for mode in modes:
            if mode == "place":
                p = _outside_point([u.place.grounding for u in manips], rng)
                if p is not None:
                    point = p
                    break
            else:
                b = _far_box(grasp_box, [u.grasp.grounding for u in manips], th.tau_g, rng)
                if b is not None:
                    grasp_box = b
                    break
        else:
            raise RuntimeError("could not construct a failing manipulation unit")
        return [
            GroundedAction(Primitive.GRASP, unit.grasp.target_text, grasp_box),
            GroundedAction(Primitive.PLACE, unit.place.target_text, point),
        ]
    prim = unit.action.primitive
    same = [u.action.grounding for u in gt_units if isinstance(u, Articulation) and u.action.primitive is prim]
    b = _far_box(unit.action.grounding, same, th.tau_d, rng)
    if b is None:
        raise RuntimeError("could not construct a failing articulation unit")
    return [GroundedAction(prim, unit.action.target_text, b)]


def perturbed_planner(
    gt_plan: GtPlan,
    p_correct: float,
    jitter: tuple[float, float] = (0.0, 0.0),
    rng: np.random.Generator | None = None,
    th: Thresholds = Thresholds(),
) -> PredictedPlan:
    """Planner whose units are each correct with probability ``p_correct``.

    Correct units reproduce the GT box (optionally jittered while staying
    above threshold) and place at the region center. Incorrect units are moved
    so they match no GT unit at all, which makes the expected ARR exactly
    ``p_correct``.
    """
    if not 0.0 <= p_correct <= 1.0:
        raise ValueError("p_correct must be a probability")
    rng = rng if rng is not None else np.random.default_rng()
    gt_units = gt_plan.units
    actions: list[GroundedAction] = []
    for unit in gt_units:
        if rng.random() < p_correct:
            actions += _correct_unit(unit, th, jitter[0], jitter[1], rng)
        else:
            actions += _failing_unit(unit, gt_units, th, rng)
    return PredictedPlan(tuple(actions))


# -- brute-force oracle -----------------------------------------------------


def brute_force_tsr(
    pred_units: Sequence[AtomicUnit], gt_plan: GtPlan, th: Thresholds = Thresholds()
) -> bool:
    """TSR by enumerating every permutation inside every unordered block."""
    if gt_plan.n_units > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_LIMIT} GT units")
    if len(pred_units) != gt_plan.n_units:
        return False
    choices = [
        list(itertools.permutations(b.units)) if b.unordered else [b.units] for b in gt_plan.blocks
    ]
    for combo in itertools.product(*choices):
        order = [u for block in combo for u in block]
        if all(unit_success(p, g, th) for p, g in zip(pred_units, order)):
            return True
    return False


# -- gripper signals ----------------------------------------------------------


def gen_gripper_signal(
    segments: Sequence[Segment],
    total_frames: int,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    fps: float = 15.0,
) -> GripperSignal:
    """Rectangular closure profile (closed on [s, e)) plus bounded uniform noise."""
    values = np.zeros(total_frames)
    last = -1
    for seg in segments:
        if seg.s <= last or seg.e > total_frames:
            raise ValueError("segments must be ordered, disjoint and inside the signal")
        values[seg.s : seg.e] = 1.0
        last = seg.e
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng()
        jitter = rng.uniform(0.0, noise, total_frames)
        values = np.where(values > 0.5, values - jitter, values + jitter)
    return GripperSignal(tuple(np.clip(values, 0.0, 1.0)), fps)


def random_segments(
    rng: np.random.Generator,
    n: int,
    min_len: int = 4,
    max_len: int = 20,
    min_gap: int = 4,
    max_gap: int = 15,
    lead: int = 5,
    tail: int = 5,
) -> tuple[list[Segment], int]:
    """Random well-separated segments and a total frame count that fits them."""
    segs = []
    t = int(rng.integers(lead, lead + max_gap + 1))
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        segs.append(Segment(t, t + length))
        t += length + int(rng.integers(min_gap, max_gap + 1))
    total = (segs[-1].e if segs else t) + tail + 1
    return segs, total


# -- demonstration episodes ---------------------------------------------------


@dataclass
class DemoConfig:
    seed: int = 0
    n_segments: tuple[int, int] = (1, 4)
    articulation_prob: float = 0.2
    frame_size: tuple[int, int] = (128, 96)
    segment_len: tuple[int, int] = (20, 28)
    gap_len: tuple[int, int] = (5, 8)
    noise: float = 0.05
    low_consistency: set = field(default_factory=set)
    flagged: set = field(default_factory=set)


def _scene_boxes(rng, n, size=(0.1, 0.16)):
    """Non-overlapping start boxes in the left half, destinations in the right."""
    starts, dests = [], []
    rows = max(n, 1)
    for i in range(n):
        bw = rng.uniform(*size)
        bh = rng.uniform(*size)
        y = (i + 0.5) / rows - bh / 2
        y = float(np.clip(y, 0.0, 1.0 - bh))
        x = float(rng.uniform(0.05, 0.4 - bw))
        starts.append(BBox(x, y, x + bw, y + bh))
        dx = float(rng.uniform(0.55, 0.85 - bw))
        dests.append(BBox(dx, y, dx + bw, y + bh))
    return starts, dests


def _lerp_box(a: BBox, b: BBox, t: float) -> BBox:
    return BBox(*(u + (v - u) * t for u, v in zip(a.as_list(), b.as_list())))


def gen_demonstration(cfg: DemoConfig, rng: np.random.Generator, episode_id: str, out_dir: str | Path) -> tuple[dict, dict]:
    """Write one synthetic demonstration and return (manifest record, mock script).

    The script holds what scripted identification and tracking backends
    should answer for each segment.
    """
    out_dir = Path(out_dir)
    n = int(rng.integers(cfg.n_segments[0], cfg.n_segments[1] + 1))
    if episode_id in cfg.flagged:
        n = max(n, 2)
    starts, dests = _scene_boxes(rng, n)
    names = _names(rng, COLORS, OBJECTS, n)
    dest_names = _names(rng, COLORS, RECEPTACLES, n)
    kinds = []
    for i in range(n):
        if rng.random() < cfg.articulation_prob:
            kinds.append("open" if rng.random() < 0.5 else "close")
        else:
            kinds.append("pick_place")
    segs = []
    t = int(rng.integers(*cfg.gap_len))
    for _ in range(n):
        length = int(rng.integers(cfg.segment_len[0], cfg.segment_len[1] + 1))
        segs.append(Segment(t, t + length))
        t += length + int(rng.integers(cfg.gap_len[0], cfg.gap_len[1] + 1))
    total = segs[-1].e + cfg.gap_len[1]
    signal = gen_gripper_signal(segs, total, cfg.noise, rng)

    # per-frame object boxes
    positions = [[starts[i]] * total for i in range(n)]
    for i, seg in enumerate(segs):
        if kinds[i] != "pick_place":
            continue
        span = seg.e - 1 - seg.s
        for f in range(seg.s, total):
            frac = min(1.0, (f - seg.s) / span) if span > 0 else 1.0
            positions[i][f] = _lerp_box(starts[i], dests[i], frac)

    W, H = cfg.frame_size
    frame_dir = out_dir / "frames" / episode_id
    frame_dir.mkdir(parents=True, exist_ok=True)
    for f in range(total):
        img = Image.new("RGB", (W, H), (190, 190, 190))
        draw = ImageDraw.Draw(img)
        for i in range(n):
            if kinds[i] == "pick_place":
                d = dests[i].to_pixels(W, H)
                draw.rectangle([d[0], d[1], d[2] - 1, d[3] - 1], outline=(90, 90, 220))
            b = positions[i][f].to_pixels(W, H)
            draw.rectangle([b[0], b[1], max(b[0], b[2] - 1), max(b[1], b[3] - 1)], fill=(220, 60 + 30 * i % 180, 60))
        img.save(frame_dir / f"{f:05d}.png", format="PNG")

    clauses = []
    script_segments = []
    for i, seg in enumerate(segs):
        category = names[i].split()[-1]
        if kinds[i] == "pick_place":
            clauses.append(f"put the {names[i]} on the {dest_names[i]}")
        else:
            clauses.append(f"{kinds[i]} the {names[i]}")
        track = {
            str(f - seg.s): [round(v, 6) for v in positions[i][f].as_list()]
            for f in range(seg.s, seg.e + 1)
        }
        if episode_id in cfg.low_consistency and i == 0:
            track = {
                k: (v if int(k) % 2 == 0 else [round(1.0 - v[2], 6), round(1.0 - v[3], 6), round(1.0 - v[0], 6), round(1.0 - v[1], 6)])
                for k, v in track.items()
            }
        identity = {
            "description": f"{names[i]} on the table",
            "category": category,
            "interaction": kinds[i],
        }
        if episode_id in cfg.flagged and i == n - 1:
            identity = {"description": f"{names[i]} on the table", "interaction": kinds[i]}
        script_segments.append(
            {"s": seg.s, "e": seg.e, "identity": identity, "track": track, "object": names[i]}
        )
    instruction = ", then ".join(clauses).capitalize() + "."
    record = {
        "id": episode_id,
        "frame_dir": str(frame_dir.relative_to(out_dir)),
        "gripper": [round(v, 6) for v in signal.values],
        "gripper_polarity": "closure",
        "instruction": instruction,
        "camera_static": True,
        "fps": 15.0,
    }
    script = {"segments": script_segments, "implicit": "Tidy up the table." if n > 1 else "Sort this out."}
    return record, script


def binomial_interval(p: float, n: int, confidence: float = 0.99) -> tuple[float, float]:
    """Normal-approximation interval for a sample proportion around ``p``."""
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    half = z * math.sqrt(p * (1 - p) / n)
    return p - half, p + half
