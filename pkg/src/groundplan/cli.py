"""Command line entry point: eval, report, overlay, datagen, synth."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from groundplan.formats import dumps, episode_to_json, load_dataset, plan_from_json, write_jsonl
from groundplan.model import InstructionType
from groundplan.scoring import Thresholds

logger = logging.getLogger("groundplan")


def _instructions(value: str) -> tuple[InstructionType, ...]:
    if value == "both":
        return (InstructionType.EXPLICIT, InstructionType.IMPLICIT)
    return (InstructionType(value),)


def _id_list(value: str | None) -> set[str]:
    return {v.strip() for v in (value or "").split(",") if v.strip()}


def _size(value: str) -> tuple[int, int]:
    w, _, h = value.lower().partition("x")
    return int(w), int(h)


def cmd_eval(args) -> int:
    from groundplan.runner import RunConfig, run_eval

    cfg = RunConfig(
        dataset=args.dataset,
        out=args.out,
        planner=args.planner_endpoint,
        planner_model=args.planner_model,
        grounder=args.grounder_endpoint,
        grounder_model=args.grounder_model,
        paradigm=args.paradigm,
        thresholds=Thresholds.parse(args.thresholds),
        instructions=_instructions(args.instructions),
        concurrency=args.concurrency,
        cache=args.cache,
        resume=args.resume,
        seed=args.seed,
        retries=args.retries,
        prompt_dir=args.prompt_dir,
        label=args.label,
    )
    out = run_eval(cfg)
    print(f"results written to {out}")
    return 0


def cmd_report(args) -> int:
    from groundplan.plotting import render_report_figure
    from groundplan.runner import build_report, format_report

    rows = build_report(args.results)
    text = format_report(rows, args.format, args.empty)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        figure = args.figure or str(out.with_suffix(".png"))
    else:
        sys.stdout.write(text)
        figure = args.figure
    if figure and not args.no_figure:
        render_report_figure(rows, figure)
        logger.info("figure written to %s", figure)
    return 0


def cmd_overlay(args) -> int:
    from groundplan.plotting import render_overlay
    from groundplan.runner import load_results

    records = [
        r
        for r in load_results(args.results)
        if (args.episode is None or r["episode_id"] == args.episode)
        and (args.instruction_type == "both" or r["instruction_type"] == args.instruction_type)
    ]
    if not records:
        print("no matching records", file=sys.stderr)
        return 1
    single = args.episode is not None and len(records) == 1
    written = 0
    for r in records:
        out = Path(args.out) if single else Path(args.out) / f"{r['episode_id']}_{r['instruction_type']}.png"
        if render_overlay(r["image"], plan_from_json(r["plan"]), out) is not None:
            written += 1
    print(f"{written} overlay(s) written")
    return 0 if written else 1


def cmd_datagen(args) -> int:
    from groundplan.adapters import Client, RequestCache, RetryPolicy, make_grounder, make_planner
    from groundplan.v2gp import FilterConfig, PipelineConfig, emit_samples, load_manifest, run_pipeline

    episodes, rejected = load_manifest(args.manifest)
    cache = RequestCache(args.cache)
    retry = RetryPolicy(max_retries=args.retries)
    planner = Client(make_planner(args.planner_endpoint, model=args.planner_model), cache, retry)
    grounder = Client(make_grounder(args.grounder_endpoint, model=args.grounder_model), cache, retry)
    cfg = PipelineConfig(
        filtering=FilterConfig(min_consistency=args.min_consistency),
        concurrency=args.concurrency,
        prompt_dir=args.prompt_dir,
    )
    outcomes = run_pipeline(episodes, planner, grounder, cfg)
    samples = [o.sample for o in outcomes if o.sample is not None]
    stats = emit_samples(samples, args.out)
    stats["dropped"] = {o.episode_id: o.reason for o in outcomes if o.sample is None}
    stats["rejected"] = rejected
    Path(args.out).with_suffix(".stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(
        f"{stats['n_samples']} samples, {len(stats['dropped'])} dropped, {len(rejected)} rejected "
        f"-> {args.out}"
    )
    return 0


def cmd_synth(args) -> int:
    from groundplan.synth import DemoConfig, SynthesisConfig, gen_dataset, gen_demonstration, write_placeholder_image

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "bench":
        cfg = SynthesisConfig(
            seed=args.seed,
            n_units=(args.min_units, args.max_units),
            unordered_block_prob=args.unordered_prob,
            articulation_prob=args.articulation_prob,
            duplicate_prob=args.duplicate_prob,
            image_size=_size(args.image_size),
        )
        records = []
        for ep in gen_dataset(cfg, args.episodes):
            write_placeholder_image(ep, out / ep.image_ref)
            records.append(episode_to_json(ep))
        write_jsonl(out / "dataset.jsonl", records)
        print(f"{len(records)} episodes -> {out / 'dataset.jsonl'}")
        return 0
    cfg = DemoConfig(
        seed=args.seed,
        articulation_prob=args.articulation_prob,
        low_consistency=_id_list(args.inject_low_consistency),
        flagged=_id_list(args.inject_flagged),
    )
    rng = np.random.default_rng(args.seed)
    manifest, script = [], {"episodes": {}}
    for i in range(args.episodes):
        record, ep_script = gen_demonstration(cfg, rng, f"demo-{i:04d}", out)
        manifest.append(record)
        script["episodes"][record["id"]] = ep_script
    write_jsonl(out / "manifest.jsonl", manifest)
    (out / "script.json").write_text(dumps(script) + "\n", encoding="utf-8")
    print(f"{len(manifest)} demonstrations -> {out / 'manifest.jsonl'} (mock script: {out / 'script.json'})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groundplan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="run a benchmark evaluation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--paradigm", choices=["end-to-end", "decoupled", "som"], default="end-to-end")
    p.add_argument("--planner-endpoint", default="mock://gt")
    p.add_argument("--planner-model")
    p.add_argument("--grounder-endpoint")
    p.add_argument("--grounder-model")
    p.add_argument("--thresholds", default="0.5,0.5", help="tau_g,tau_d")
    p.add_argument("--instructions", choices=["explicit", "implicit", "both"], default="both")
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--cache")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--prompt-dir")
    p.add_argument("--label", help="run name shown in reports (default: results file stem)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tabulate one or more results files")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--format", choices=["text", "csv", "markdown"], default="text")
    p.add_argument("--empty", choices=["dash", "omit"], default="dash", help="how to show cells without episodes")
    p.add_argument("--out", help="write the table here; the figure goes next to it")
    p.add_argument("--figure", help="explicit path for the bar chart")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("overlay", help="draw predicted plans over episode images")
    p.add_argument("--results", required=True)
    p.add_argument("--episode", help="one episode id (default: every record)")
    p.add_argument("--instruction-type", choices=["explicit", "implicit", "both"], default="explicit")
    p.add_argument("--out", required=True, help="image file for one episode, else a directory")
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("datagen", help="turn demonstrations into grounded-plan samples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-consistency", type=float, default=0.8)
    p.add_argument("--planner-endpoint", required=True)
    p.add_argument("--planner-model")
    p.add_argument("--grounder-endpoint", required=True)
    p.add_argument("--grounder-model")
    p.add_argument("--cache")
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--prompt-dir")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("synth", help="write synthetic benchmark episodes or demonstrations")
    p.add_argument("--kind", choices=["bench", "demo"], default="bench")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-units", type=int, default=1)
    p.add_argument("--max-units", type=int, default=12)
    p.add_argument("--unordered-prob", type=float, default=0.3)
    p.add_argument("--articulation-prob", type=float, default=0.2)
    p.add_argument("--duplicate-prob", type=float, default=0.0)
    p.add_argument("--image-size", default="320x240")
    p.add_argument("--inject-low-consistency", help="comma-separated demo ids")
    p.add_argument("--inject-flagged", help="comma-separated demo ids")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
