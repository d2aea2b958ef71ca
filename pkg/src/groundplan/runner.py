"""Evaluation runs, the append-only results log and Table-style reports."""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from groundplan.adapters import (
    BackendError,
    Client,
    GroundingBackend,
    PlannerBackend,
    RequestCache,
    RetryPolicy,
    make_grounder,
    make_planner,
)
from groundplan.adapters.planning import (
    DEFAULT_SCORE_FLOOR,
    detect,
    ground_language_step,
    ground_som_step,
    load_template,
    render_som_overlay,
    request_grounded_plan,
    request_language_plan,
    som_prompt,
    split_compound_step,
    extract_steps,
)
from groundplan.adapters.base import BackendRequest
from groundplan.dsl import ParseDiagnostic, Severity, parse_plan
from groundplan.formats import dumps, load_dataset, plan_to_json
from groundplan.model import Episode, HorizonBucket, InstructionType, PredictedPlan
from groundplan.scoring import (
    CELL_ORDER,
    AggregateCell,
    EpisodeScore,
    Thresholds,
    aggregate_rows,
    score_episode,
)

logger = logging.getLogger(__name__)


class Paradigm(str, enum.Enum):
    END_TO_END = "end-to-end"
    DECOUPLED = "decoupled"
    DECOUPLED_SOM = "som"


@dataclass
class RunConfig:
    dataset: str
    out: str
    planner: str = "mock://gt"
    planner_model: str | None = None
    grounder: str | None = None
    grounder_model: str | None = None
    paradigm: Paradigm = Paradigm.END_TO_END
    thresholds: Thresholds = field(default_factory=Thresholds)
    instructions: tuple[InstructionType, ...] = (InstructionType.EXPLICIT, InstructionType.IMPLICIT)
    concurrency: int = 4
    cache: str | None = None
    resume: bool = False
    seed: int = 0
    retries: int = 3
    score_floor: float = DEFAULT_SCORE_FLOOR
    prompt_dir: str | None = None
    label: str | None = None
    decoding: dict = field(default_factory=lambda: {"temperature": 0.0})

    def __post_init__(self):
        self.paradigm = Paradigm(self.paradigm)
        self.instructions = tuple(InstructionType(k) for k in self.instructions)
        if self.concurrency < 1:
            raise ValueError("concurrency must be at least 1")
        if self.paradigm is not Paradigm.END_TO_END and not self.grounder:
            raise ValueError(f"paradigm {self.paradigm.value} needs a grounder backend")

    @property
    def run_label(self) -> str:
        return self.label or Path(self.out).stem


@dataclass
class ResultRecord:
    run: str
    episode_id: str
    instruction_type: InstructionType
    bucket: HorizonBucket
    image: str
    paradigm: str
    raw_response: str
    plan: PredictedPlan
    score: EpisodeScore
    diagnostics: list = field(default_factory=list)
    failed: bool = False
    error: str | None = None
    request_hashes: list = field(default_factory=list)
    latency_ms: float = 0.0

    def to_json(self) -> dict:
        return {
            "run": self.run,
            "episode_id": self.episode_id,
            "instruction_type": self.instruction_type.value,
            "bucket": self.bucket.value,
            "image": self.image,
            "paradigm": self.paradigm,
            "raw_response": self.raw_response,
            "plan": plan_to_json(self.plan),
            "score": self.score.to_json(),
            "diagnostics": [d.to_json() if isinstance(d, ParseDiagnostic) else d for d in self.diagnostics],
            "failed": self.failed,
            "error": self.error,
            "request_hashes": self.request_hashes,
            "timing": {"latency_ms": round(self.latency_ms, 3)},
        }


def _diag(message: str, severity: Severity = Severity.WARNING, index: int = 0, fragment: str = "") -> dict:
    return ParseDiagnostic(index, severity, message, fragment).to_json()


class Evaluator:
    """Runs one (episode, instruction type) pair through the configured paradigm."""

    def __init__(self, cfg: RunConfig, planner: Client, grounder: Client | None):
        self.cfg = cfg
        self.planner = planner
        self.grounder = grounder
        model = planner.backend.model_id
        self.templates = {
            name: load_template(name, cfg.prompt_dir, model)
            for name in ("grounded_plan", "language_plan", "som_plan")
        }
        self.params = dict(cfg.decoding)
        if cfg.seed is not None:
            self.params.setdefault("seed", cfg.seed)

    def run(self, ep: Episode, kind: InstructionType) -> ResultRecord:
        meta = {"episode_id": ep.id, "instruction_type": kind.value}
        base = dict(
            run=self.cfg.run_label,
            episode_id=ep.id,
            instruction_type=kind,
            bucket=ep.bucket,
            image=ep.image_ref,
            paradigm=self.cfg.paradigm.value,
        )
        hashes: list[str] = []
        latency = 0.0
        try:
            if self.cfg.paradigm is Paradigm.END_TO_END:
                rec = request_grounded_plan(
                    self.planner, ep.image_ref, ep.instruction(kind), self.templates["grounded_plan"], self.params, meta
                )
                hashes.append(rec.request_hash)
                latency += rec.latency_ms
                parsed = parse_plan(rec.response, ep.image_width, ep.image_height)
                raw, plan, diags = rec.response, parsed.plan, [d.to_json() for d in parsed.diagnostics]
            elif self.cfg.paradigm is Paradigm.DECOUPLED:
                raw, plan, diags, latency = self._decoupled(ep, kind, meta, hashes)
            else:
                raw, plan, diags, latency = self._som(ep, kind, meta, hashes)
        except BackendError as exc:
            if exc.request_hash and exc.request_hash not in hashes:
                hashes.append(exc.request_hash)
            logger.warning("episode %s/%s failed: %s", ep.id, kind.value, exc)
            return ResultRecord(
                **base,
                raw_response="",
                plan=PredictedPlan(),
                score=EpisodeScore.failed(ep.gt_plan),
                diagnostics=[_diag(str(exc), Severity.ERROR)],
                failed=True,
                error=str(exc),
                request_hashes=hashes,
            )
        score = score_episode(plan.units, ep.gt_plan, self.cfg.thresholds)
        return ResultRecord(
            **base,
            raw_response=raw,
            plan=plan,
            score=score,
            diagnostics=diags,
            request_hashes=hashes,
            latency_ms=latency,
        )

    def _ground_steps(self, steps, ground, diags) -> list:
        actions = []
        for i, step in enumerate(steps):
            for part in split_compound_step(step):
                action = ground(part)
                if action is None:
                    diags.append(_diag("step names no primitive", Severity.WARNING, i, part))
                    continue
                if action.grounding is None:
                    diags.append(_diag("target could not be grounded", Severity.WARNING, i, part))
                actions.append(action)
        return actions

    def _decoupled(self, ep, kind, meta, hashes):
        steps, rec = request_language_plan(
            self.planner, ep.image_ref, ep.instruction(kind), self.templates["language_plan"], self.params, meta
        )
        hashes.append(rec.request_hash)
        diags: list = []
        if not steps:
            diags.append(_diag("no plan steps found"))
        actions = self._ground_steps(
            steps,
            lambda s: ground_language_step(self.grounder, ep.image_ref, s, self.cfg.score_floor, meta),
            diags,
        )
        return rec.response, PredictedPlan(tuple(actions)), diags, rec.latency_ms

    def _som(self, ep, kind, meta, hashes):
        proposals = [d.bbox for d in detect(self.grounder, ep.image_ref, "", meta) if d.score >= self.cfg.score_floor]
        if not proposals:
            return "", PredictedPlan(), [_diag("grounder returned no proposals", Severity.ERROR)], 0.0
        overlay = render_som_overlay(ep.image_ref, proposals)
        prompt = som_prompt(self.templates["som_plan"], ep.instruction(kind), overlay)
        som_meta = {**meta, "marks": [[m.id, m.bbox.as_list()] for m in overlay.marks]}
        rec = self.planner.call(BackendRequest("language_plan", prompt, (overlay.image,), self.params, som_meta))
        hashes.append(rec.request_hash)
        steps = extract_steps(rec.response)
        diags: list = [] if steps else [_diag("no plan steps found")]
        actions = self._ground_steps(steps, lambda s: ground_som_step(overlay, s), diags)
        return rec.response, PredictedPlan(tuple(actions)), diags, rec.latency_ms


def _read_done(path: Path) -> set[tuple[str, str]]:
    """Keys already in a results log; a torn trailing line is cut off."""
    if not path.exists():
        return set()
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        data = data[: data.rfind(b"\n") + 1]
        path.write_bytes(data)
    done = set()
    for line in data.decode("utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            done.add((rec["episode_id"], rec["instruction_type"]))
    return done


def build_clients(cfg: RunConfig, episodes: Sequence[Episode], planner=None, grounder=None):
    by_id = {ep.id: ep for ep in episodes}
    cache = RequestCache(cfg.cache)
    retry = RetryPolicy(max_retries=cfg.retries)
    if planner is None:
        spec = cfg.planner
        if spec.startswith("mock://perturb") and "seed=" not in spec:
            spec += ("&" if "?" in spec else "?") + f"seed={cfg.seed}"
        planner = make_planner(spec, by_id, cfg.planner_model, cfg.decoding)
    if grounder is None and cfg.grounder:
        grounder = make_grounder(cfg.grounder, by_id, cfg.grounder_model)
    return (
        Client(planner, cache, retry),
        Client(grounder, cache, retry) if grounder is not None else None,
    )


def run_eval(
    cfg: RunConfig,
    planner: PlannerBackend | None = None,
    grounder: GroundingBackend | None = None,
) -> Path:
    """Evaluate every (episode, instruction type) pair and append to the results log.

    With ``cfg.resume`` the existing log is kept and finished pairs are
    skipped; records are always written in dataset order, so a resumed run
    ends with the same file as an uninterrupted one.
    """
    episodes = load_dataset(cfg.dataset)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    done = _read_done(out) if cfg.resume else set()
    if not cfg.resume:
        out.write_text("", encoding="utf-8")
    planner_client, grounder_client = build_clients(cfg, episodes, planner, grounder)
    evaluator = Evaluator(cfg, planner_client, grounder_client)
    tasks = [
        (ep, kind)
        for ep in episodes
        for kind in cfg.instructions
        if (ep.id, kind.value) not in done
    ]
    pool = ThreadPoolExecutor(max_workers=cfg.concurrency)
    try:
        with open(out, "a", encoding="utf-8") as fh:
            for record in pool.map(lambda t: evaluator.run(*t), tasks):
                fh.write(dumps(record.to_json()) + "\n")
                fh.flush()
    finally:
        pool.shutdown(wait=True, cancel_futures=True)
    return out


# -- reports ---------------------------------------------------------------------


def load_results(path: str | os.PathLike) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError:
                    logger.warning("skipping torn line in %s", path)
    return out


def aggregate_results(records: Iterable[dict]) -> list[AggregateCell]:
    return aggregate_rows(
        (r["instruction_type"], r["bucket"], EpisodeScore.from_json(r["score"])) for r in records
    )


CELL_LABELS = [f"{k.value[0].upper()}-{b.value}" for k, b in CELL_ORDER]


@dataclass
class ReportRow:
    run: str
    cells: dict  # (InstructionType, HorizonBucket) -> AggregateCell


def build_report(results: Sequence[str | os.PathLike]) -> list[ReportRow]:
    rows = []
    for path in results:
        records = load_results(path)
        if not records:
            continue
        by_run: dict[str, list[dict]] = {}
        for r in records:
            by_run.setdefault(r.get("run") or Path(path).stem, []).append(r)
        for run, recs in by_run.items():
            cells = {(c.instruction_type, c.bucket): c for c in aggregate_results(recs)}
            rows.append(ReportRow(run, cells))
    return rows


def _columns(rows: Sequence[ReportRow], empty: str) -> list[int]:
    idx = list(range(len(CELL_ORDER)))
    if empty == "omit" and rows:
        idx = [i for i in idx if any(CELL_ORDER[i] in r.cells for r in rows)]
    return idx


def report_table(rows: Sequence[ReportRow], empty: str = "dash") -> tuple[list[str], list[list[str]]]:
    """Header and body: TSR cells, then ARR cells, then episode counts."""
    cols = _columns(rows, empty)
    header = ["run"]
    header += [f"TSR {CELL_LABELS[i]}" for i in cols]
    header += [f"ARR {CELL_LABELS[i]}" for i in cols]
    header += [f"n {CELL_LABELS[i]}" for i in cols]
    body = []
    for row in rows:
        tsr, arr, n = [], [], []
        for i in cols:
            cell = row.cells.get(CELL_ORDER[i])
            tsr.append(f"{cell.tsr_pct:.1f}" if cell else "-")
            arr.append(f"{cell.arr_pct:.1f}" if cell else "-")
            n.append(str(cell.n_episodes) if cell else "0")
        body.append([row.run] + tsr + arr + n)
    return header, body


def format_report(rows: Sequence[ReportRow], fmt: str = "text", empty: str = "dash") -> str:
    header, body = report_table(rows, empty)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(body)
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] + ["---:"] * (len(header) - 1)) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in body]
        return "\n".join(lines) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(header)]
    fmt_row = lambda r: "  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r))
    lines = [fmt_row(header)] + [fmt_row(r) for r in body]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def report(
    results: Sequence[str | os.PathLike] | str | os.PathLike,
    fmt: str = "text",
    empty: str = "dash",
) -> str:
    if isinstance(results, (str, os.PathLike)):
        results = [results]
    return format_report(build_report(results), fmt, empty)
