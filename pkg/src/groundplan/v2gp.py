"""Training-data generation from robot demonstrations.

Stages per demonstration: gripper segmentation, object identification with a
planner VLM, multi-cue tracking with a grounding service, plan assembly in
first-frame coordinates, instruction variants, then filtering/refinement.

Manifest record (one demonstration per line)::

    {"id": "demo-1", "frame_dir": "frames/demo-1", "gripper": [0.0, ...],
     "gripper_polarity": "closure", "instruction": "...", "camera_static": true}

``video`` may replace ``frame_dir``. Output record::

    {"id", "image", "image_width", "image_height", "instruction_explicit",
     "instruction_implicit", "plan": [{"action", "target", "bbox" | "point", "region"?}],
     "provenance": {"episode_id", "segments", "skipped", "consistency", "backends", "flags"}}

Plan coordinates are pixel integers; ``region`` is the release box a place
point was taken from, kept so samples can serve as GT episodes.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from groundplan.adapters.base import BackendError, BackendRequest, Client
from groundplan.adapters.planning import load_template, track as track_request
from groundplan.formats import action_to_json, iter_jsonl, write_jsonl
from groundplan.model import (
    MAX_UNITS,
    Articulation,
    AtomicUnit,
    BBox,
    GroundedAction,
    GtPlan,
    HorizonBucket,
    Manipulation,
    PlanError,
    Point2D,
    PredictedPlan,
    Primitive,
    bucket_for,
    iou,
    pair_atomic_units,
)
from groundplan.segmentation import GripperSignal, Segment, SegmentationConfig, segment_signal

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
CONTINUITY_IOU = 0.3
MAX_ID_FRAMES = 8


class PipelineError(RuntimeError):
    """A segment or sample could not be produced; the message says why."""


@dataclass(frozen=True)
class DemonstrationEpisode:
    id: str
    frames: tuple[str, ...]
    gripper: GripperSignal
    instruction: str
    camera_static: bool = True
    trajectory_meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.frames) != len(self.gripper):
            raise PlanError(
                f"demo {self.id}: {len(self.frames)} frames but {len(self.gripper)} gripper values"
            )
        if not self.instruction.strip():
            raise PlanError(f"demo {self.id}: empty instruction")

    @property
    def image_size(self) -> tuple[int, int]:
        with Image.open(self.frames[0]) as img:
            return img.size


def _video_frames(video: Path, dest: Path) -> list[str]:
    import cv2

    dest.mkdir(parents=True, exist_ok=True)
    cap = cv2.VideoCapture(str(video))
    out = []
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        path = dest / f"{len(out):05d}.png"
        if not path.exists():
            cv2.imwrite(str(path), frame)
        out.append(str(path))
    cap.release()
    return out


def load_manifest(path: str | os.PathLike, frame_cache: str | os.PathLike | None = None):
    """Read demonstrations; returns (episodes, rejected) where rejected maps id -> reason."""
    path = Path(path)
    episodes, rejected = [], {}
    for lineno, rec in iter_jsonl(path):
        eid = str(rec.get("id", f"line-{lineno}"))
        try:
            if not rec.get("camera_static", False):
                raise PlanError("camera is not static")
            if rec.get("frame_dir"):
                fdir = path.parent / rec["frame_dir"]
                frames = sorted(str(p) for p in fdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
            elif rec.get("video"):
                cache = Path(frame_cache) if frame_cache else path.parent / ".frames"
                frames = _video_frames(path.parent / rec["video"], cache / eid)
            else:
                raise PlanError("record has neither frame_dir nor video")
            signal = GripperSignal.from_source(
                rec["gripper"], rec.get("gripper_polarity", "closure"), float(rec.get("fps", 15.0))
            )
            meta = dict(rec.get("trajectory_meta") or {})
            meta["gripper_polarity"] = rec.get("gripper_polarity", "closure")
            episodes.append(
                DemonstrationEpisode(eid, tuple(frames), signal, str(rec.get("instruction", "")), True, meta)
            )
        except (PlanError, KeyError, ValueError, OSError) as exc:
            logger.warning("rejecting demo %s: %s", eid, exc)
            rejected[eid] = str(exc)
    return episodes, rejected


class InteractionClass(str, enum.Enum):
    MANIPULATION = "manipulation"
    OPEN = "open"
    CLOSE = "close"


@dataclass(frozen=True)
class ObjectIdentity:
    description: str
    category: str
    primitive_class: InteractionClass = InteractionClass.MANIPULATION

    def __post_init__(self):
        if not self.description.strip() or not self.category.strip():
            raise PipelineError("identity needs a description and a category")


@dataclass(frozen=True)
class Track:
    per_frame: dict
    identity_key: str
    consistency: float

    def box_at_or_after(self, frame: int) -> BBox:
        later = [f for f in self.per_frame if f >= frame]
        return self.per_frame[min(later) if later else max(self.per_frame)]

    def box_at_or_before(self, frame: int) -> BBox:
        earlier = [f for f in self.per_frame if f <= frame]
        return self.per_frame[max(earlier) if earlier else min(self.per_frame)]


def sample_frame_indices(segment: Segment, limit: int = MAX_ID_FRAMES) -> list[int]:
    """First, last and evenly spaced frames in between, at most ``limit``."""
    count = min(limit, segment.e - segment.s + 1)
    return sorted({int(round(v)) for v in np.linspace(segment.s, segment.e, count)})


_INTERACTION = {
    "pick_place": InteractionClass.MANIPULATION,
    "pick-and-place": InteractionClass.MANIPULATION,
    "pick and place": InteractionClass.MANIPULATION,
    "manipulation": InteractionClass.MANIPULATION,
    "open": InteractionClass.OPEN,
    "close": InteractionClass.CLOSE,
}


def parse_identity(text: str) -> ObjectIdentity:
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            value, _ = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            value = None
        if isinstance(value, dict):
            desc, cat = value.get("description"), value.get("category")
            if not isinstance(desc, str) or not desc.strip():
                raise PipelineError("identification lacks a description")
            if not isinstance(cat, str) or not cat.strip():
                raise PipelineError("identification lacks a category")
            kind = str(value.get("interaction", "pick_place")).strip().lower()
            if kind not in _INTERACTION:
                raise PipelineError(f"unknown interaction {kind!r}")
            return ObjectIdentity(desc.strip(), cat.strip(), _INTERACTION[kind])
        pos = text.find("{", pos + 1)
    raise PipelineError("identification response holds no JSON object")


def identify_object(
    episode: DemonstrationEpisode,
    segment: Segment,
    planner: Client,
    template: str | None = None,
) -> ObjectIdentity:
    template = template or load_template("identify_object")
    frames = tuple(episode.frames[i] for i in sample_frame_indices(segment))
    prompt = template.replace("{I}", "<frames>").replace("{H}", episode.instruction)
    req = BackendRequest(
        "object_identification",
        prompt,
        frames,
        {},
        {"episode_id": episode.id, "segment": [segment.s, segment.e]},
    )
    return parse_identity(planner.call(req).response)


def track_consistency(per_frame: dict, segment: Segment, threshold: float = CONTINUITY_IOU) -> float:
    """Fraction of segment frames whose box overlaps a temporal neighbor's box."""
    frames = range(segment.s, segment.e + 1)
    good = 0
    for f in frames:
        box = per_frame.get(f)
        if box is None:
            continue
        for g in (f - 1, f + 1):
            other = per_frame.get(g)
            if other is not None and segment.s <= g <= segment.e and iou(box, other) >= threshold:
                good += 1
                break
    return good / len(frames)


def ground_segment(
    episode: DemonstrationEpisode,
    segment: Segment,
    identity: ObjectIdentity,
    original_phrase: str,
    grounder: Client,
    continuity: float = CONTINUITY_IOU,
) -> Track:
    """Track with each text cue and keep the most consistent track."""
    cues = []
    for cue in (original_phrase, identity.description, identity.category):
        cue = (cue or "").strip()
        if cue and cue not in cues:
            cues.append(cue)
    frames = episode.frames[segment.s : segment.e + 1]
    best = None
    for cue in cues:
        per_frame = track_request(
            grounder,
            frames,
            cue,
            first_frame=segment.s,
            meta={"episode_id": episode.id, "segment": [segment.s, segment.e]},
        )
        if not per_frame:
            continue
        cand = Track(per_frame, cue, track_consistency(per_frame, segment, continuity))
        if best is None or cand.consistency > best.consistency:
            best = cand
    if best is None:
        raise PipelineError("no cue produced a track")
    return best


_LEADING_VERB = re.compile(
    r"^\s*(?:please\s+)?(?:pick\s+up|put|place|move|pick|take|grab|grasp|open|close|shut|bring|set|drop|"
    r"push|pull|transfer|stack|slide|turn|remove)\b\s*",
    re.IGNORECASE,
)
_PREPOSITION = re.compile(r"\b(?:onto|into|on top of|inside|on|in|to|at|from|off)\b", re.IGNORECASE)
_CLAUSE_SPLIT = re.compile(r"\s*(?:,\s*(?:and\s+)?then\b|;|\bthen\b|\.\s+|,\s+and\b|\band then\b)\s*", re.IGNORECASE)
_ARTICLE = re.compile(r"^(?:the|a|an|some)\s+", re.IGNORECASE)


def _clean(phrase: str) -> str:
    phrase = phrase.strip(" .,;:!\"'")
    return _ARTICLE.sub("", phrase).strip()


def instruction_clauses(instruction: str) -> list[str]:
    return [c for c in (p.strip(" .") for p in _CLAUSE_SPLIT.split(instruction)) if c]


def clause_object(clause: str) -> str:
    rest = _LEADING_VERB.sub("", clause, count=1)
    return _clean(_PREPOSITION.split(rest, maxsplit=1)[0])


def clause_destination(clause: str) -> str:
    m = _PREPOSITION.search(clause)
    if not m or m.group(0).lower() in ("from", "off"):
        return ""
    return _clean(clause[m.end():])


def instruction_phrases(instruction: str, n: int) -> list[tuple[str, str]]:
    """Per-segment (object, destination) phrases from the original instruction.

    When the clause count does not match the segment count the whole
    instruction is the only cue available.
    """
    clauses = instruction_clauses(instruction)
    if len(clauses) == n:
        return [(clause_object(c) or c, clause_destination(c)) for c in clauses]
    return [(instruction.strip(), "")] * n


def _unit_for(identity: ObjectIdentity, track: Track, segment: Segment, destination: str) -> AtomicUnit:
    grasp_box = track.box_at_or_after(segment.s)
    if identity.primitive_class is InteractionClass.MANIPULATION:
        release = track.box_at_or_before(segment.e)
        target = destination or f"{identity.category} destination"
        return Manipulation(
            GroundedAction(Primitive.GRASP, identity.description, grasp_box),
            GroundedAction(Primitive.PLACE, target, release),
        )
    prim = Primitive.OPEN if identity.primitive_class is InteractionClass.OPEN else Primitive.CLOSE
    return Articulation(GroundedAction(prim, identity.description, grasp_box))


@dataclass
class TrainingSample:
    episode_id: str
    image_ref: str
    image_size: tuple[int, int]
    explicit_instruction: str
    implicit_instruction: str
    plan: GtPlan
    provenance: dict = field(default_factory=dict)

    @property
    def n_units(self) -> int:
        return self.plan.n_units

    @property
    def flags(self) -> list[str]:
        return self.provenance.setdefault("flags", [])


@dataclass
class AssembledPlan:
    plan: GtPlan | None
    skipped: list[int]
    kept: list[int]


def assemble_plan(
    episode: DemonstrationEpisode,
    segments: Sequence[Segment],
    identities: Sequence[ObjectIdentity | None],
    tracks: Sequence[Track | None],
    destinations: Sequence[str] | None = None,
) -> AssembledPlan:
    """Grounded plan in first-frame coordinates; flagged segments (None) are skipped.

    Manipulation segments give grasp(box at start) + place(box at release,
    whose center is the place point). Open/close segments give one action on
    the box at the start frame.
    """
    if not (len(segments) == len(identities) == len(tracks)):
        raise ValueError("segments, identities and tracks must align")
    if not episode.camera_static:
        raise PipelineError("plans need a static camera")
    destinations = destinations or [""] * len(segments)
    units, skipped, kept = [], [], []
    for i, (seg, ident, trk) in enumerate(zip(segments, identities, tracks)):
        if ident is None or trk is None:
            skipped.append(i)
            continue
        units.append(_unit_for(ident, trk, seg, destinations[i]))
        kept.append(i)
    plan = GtPlan.sequential(units) if units else None
    return AssembledPlan(plan, skipped, kept)


def _rewrite(planner: Client, template: str, text: str, meta: dict, extra: str = "") -> str:
    prompt = template.replace("{H}", text) + extra
    rec = planner.call(BackendRequest("instruction_rewrite", prompt, (), {}, meta))
    return rec.response.strip()


def generate_implicit_instruction(
    explicit: str, planner: Client, template: str | None = None, meta: dict | None = None
) -> tuple[str, bool]:
    """Abstract rewrite of ``explicit``; returns (text, fell_back)."""
    template = template or load_template("implicit_rewrite")
    meta = {**(meta or {}), "purpose": "implicit", "instruction": explicit}
    try:
        text = _rewrite(planner, template, explicit, meta)
    except BackendError as exc:
        logger.warning("implicit rewrite failed: %s", exc)
        text = ""
    if not text:
        return explicit, True
    return text, False


def describe_unit(unit: AtomicUnit) -> str:
    if isinstance(unit, Manipulation):
        return f"put the {unit.grasp.target_text} on the {unit.place.target_text}"
    return f"{unit.action.primitive.value} the {unit.action.target_text}"


@dataclass
class FilterConfig:
    min_consistency: float = 0.8


def filter_and_refine(
    sample: TrainingSample,
    tracks: Sequence[Track],
    planner: Client | None = None,
    cfg: FilterConfig = FilterConfig(),
    revise_template: str | None = None,
    implicit_template: str | None = None,
) -> TrainingSample | None:
    """Drop inconsistent samples; align instructions with what survived.

    Returns None when the sample is dropped, with the reason logged.
    """
    low = [t.consistency for t in tracks if t.consistency < cfg.min_consistency]
    if low:
        logger.info("dropping %s: track consistency %.2f", sample.episode_id, min(low))
        return None
    if not sample.provenance.get("skipped"):
        return sample
    if planner is None:
        return None
    revise_template = revise_template or load_template("revise_instruction")
    surviving = [describe_unit(u) for u in sample.plan.units]
    meta = {"episode_id": sample.episode_id, "purpose": "revise", "surviving": surviving}
    extra = "".join(f"- {s}\n" for s in surviving)
    try:
        revised = _rewrite(planner, revise_template, sample.explicit_instruction, meta, extra)
    except BackendError as exc:
        logger.info("dropping %s: revision failed (%s)", sample.episode_id, exc)
        return None
    if not revised:
        logger.info("dropping %s: empty revision", sample.episode_id)
        return None
    implicit, fell_back = generate_implicit_instruction(
        revised, planner, implicit_template, {"episode_id": sample.episode_id}
    )
    provenance = dict(sample.provenance)
    flags = [f for f in provenance.get("flags", []) if f != "implicit_fallback"]
    flags.append("instruction_revised")
    if fell_back:
        flags.append("implicit_fallback")
    provenance["flags"] = flags
    provenance["original_instruction"] = sample.explicit_instruction
    return replace(
        sample, explicit_instruction=revised, implicit_instruction=implicit, provenance=provenance
    )


@dataclass
class PipelineConfig:
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    filtering: FilterConfig = field(default_factory=FilterConfig)
    continuity: float = CONTINUITY_IOU
    concurrency: int = 4
    prompt_dir: str | None = None


@dataclass
class EpisodeOutcome:
    episode_id: str
    sample: TrainingSample | None
    reason: str | None = None
    tracks: list = field(default_factory=list)


def process_episode(
    episode: DemonstrationEpisode, planner: Client, grounder: Client, cfg: PipelineConfig = PipelineConfig()
) -> EpisodeOutcome:
    segments = segment_signal(episode.gripper, cfg.segmentation)
    if not segments:
        return EpisodeOutcome(episode.id, None, "no gripper cycles")
    id_template = load_template("identify_object", cfg.prompt_dir, planner.backend.model_id)
    phrases = instruction_phrases(episode.instruction, len(segments))
    identities: list[ObjectIdentity | None] = []
    tracks: list[Track | None] = []
    reasons = {}
    for i, seg in enumerate(segments):
        try:
            ident = identify_object(episode, seg, planner, id_template)
            trk = ground_segment(episode, seg, ident, phrases[i][0], grounder, cfg.continuity)
        except (PipelineError, BackendError) as exc:
            reasons[i] = str(exc)
            identities.append(None)
            tracks.append(None)
            continue
        identities.append(ident)
        tracks.append(trk)
    assembled = assemble_plan(episode, segments, identities, tracks, [p[1] for p in phrases])
    if assembled.plan is None:
        return EpisodeOutcome(episode.id, None, "no surviving segments")
    if assembled.plan.n_units > MAX_UNITS:
        return EpisodeOutcome(episode.id, None, f"{assembled.plan.n_units} units exceed {MAX_UNITS}")
    kept_tracks = [t for t in tracks if t is not None]
    implicit, fell_back = generate_implicit_instruction(
        episode.instruction,
        planner,
        load_template("implicit_rewrite", cfg.prompt_dir, planner.backend.model_id),
        {"episode_id": episode.id},
    )
    sample = TrainingSample(
        episode_id=episode.id,
        image_ref=episode.frames[0],
        image_size=episode.image_size,
        explicit_instruction=episode.instruction,
        implicit_instruction=implicit,
        plan=assembled.plan,
        provenance={
            "episode_id": episode.id,
            "segments": [list(s.as_tuple()) for s in segments],
            "skipped": assembled.skipped,
            "skip_reasons": {str(k): v for k, v in sorted(reasons.items())},
            "consistency": [round(t.consistency, 4) for t in kept_tracks],
            "backends": {
                "planner": f"{planner.backend.backend_id}:{planner.backend.model_id}",
                "grounder": f"{grounder.backend.backend_id}:{grounder.backend.model_id}",
            },
            "flags": (["segments_skipped"] if assembled.skipped else [])
            + (["implicit_fallback"] if fell_back else []),
        },
    )
    refined = filter_and_refine(
        sample,
        kept_tracks,
        planner,
        cfg.filtering,
        load_template("revise_instruction", cfg.prompt_dir, planner.backend.model_id),
        load_template("implicit_rewrite", cfg.prompt_dir, planner.backend.model_id),
    )
    if refined is None:
        low = any(t.consistency < cfg.filtering.min_consistency for t in kept_tracks)
        return EpisodeOutcome(
            episode.id, None, "low track consistency" if low else "instruction revision failed", kept_tracks
        )
    return EpisodeOutcome(episode.id, refined, None, kept_tracks)


def run_pipeline(
    episodes: Sequence[DemonstrationEpisode],
    planner: Client,
    grounder: Client,
    cfg: PipelineConfig = PipelineConfig(),
) -> list[EpisodeOutcome]:
    """Process demonstrations in parallel; outcomes keep manifest order."""

    def one(ep):
        try:
            return process_episode(ep, planner, grounder, cfg)
        except (PipelineError, BackendError, PlanError) as exc:
            return EpisodeOutcome(ep.id, None, str(exc))

    with ThreadPoolExecutor(max_workers=max(1, cfg.concurrency)) as pool:
        return list(pool.map(one, episodes))


def sample_to_json(sample: TrainingSample, base_dir: str | os.PathLike | None = None) -> dict:
    w, h = sample.image_size
    plan = []
    for unit in sample.plan.units:
        for a in unit.actions:
            if a.primitive is Primitive.PLACE:
                rec = action_to_json(GroundedAction(a.primitive, a.target_text, a.grounding.center), w, h)
                rec["region"] = a.grounding.to_pixels(w, h)
            else:
                rec = action_to_json(a, w, h)
            plan.append(rec)
    image = sample.image_ref
    if base_dir is not None:
        try:
            image = os.path.relpath(image, base_dir)
        except ValueError:
            pass
    return {
        "id": sample.episode_id,
        "image": image,
        "image_width": w,
        "image_height": h,
        "instruction_explicit": sample.explicit_instruction,
        "instruction_implicit": sample.implicit_instruction,
        "plan": plan,
        "provenance": sample.provenance,
    }


def bucket_histogram(unit_counts: Sequence[int]) -> dict[str, int]:
    hist = {b.value: 0 for b in HorizonBucket}
    for n in unit_counts:
        hist[bucket_for(n).value] += 1
    return hist


def emit_samples(samples: Sequence[TrainingSample], out_path: str | os.PathLike) -> dict:
    """Write samples as JSONL (atomically) and return bucket statistics."""
    out_path = Path(out_path)
    records = [sample_to_json(s, out_path.parent.resolve()) for s in samples]
    write_jsonl(out_path, records)
    counts = [s.n_units for s in samples]
    return {
        "n_samples": len(samples),
        "n_units": sum(counts),
        "buckets": bucket_histogram(counts),
        "flags": {
            flag: sum(flag in s.provenance.get("flags", []) for s in samples)
            for flag in sorted({f for s in samples for f in s.provenance.get("flags", [])})
        },
    }


def sample_plans(record: dict) -> tuple[PredictedPlan, GtPlan]:
    """Read an emitted sample back as (predicted-style plan, GT-style plan)."""
    w, h = record["image_width"], record["image_height"]
    pred_actions, gt_actions = [], []
    for a in record["plan"]:
        prim = Primitive.parse(a["action"])
        if prim is Primitive.PLACE:
            pred_actions.append(GroundedAction(prim, a["target"], Point2D.from_pixels(a["point"], w, h)))
            gt_actions.append(GroundedAction(prim, a["target"], BBox.from_pixels(a["region"], w, h)))
        else:
            act = GroundedAction(prim, a["target"], BBox.from_pixels(a["bbox"], w, h))
            pred_actions.append(act)
            gt_actions.append(act)
    return PredictedPlan(tuple(pred_actions)), GtPlan.sequential(pair_atomic_units(gt_actions))
