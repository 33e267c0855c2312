"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 IO or digest error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ConfigError, parse_config
from .pipeline import IO_ERRORS, STAGES, Pipeline, StageFailure, resolve_suite_seed

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("saftlab")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment config JSON")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--threads", type=int, default=0, help="worker threads, 0 = one per CPU")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="saftlab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGES:
        _common(sub.add_parser(name, help=f"run the {name} stage"))
    run = sub.add_parser("run", help="run the full pipeline and write the manifest")
    _common(run)
    run.add_argument("--stage", choices=STAGES, help="resume from this stage")
    rep = sub.add_parser("report", help="print the manifest as a text table")
    rep.add_argument("--out", required=True, help="run directory containing manifest.json")
    return ap


def load(args) -> Pipeline:
    cfg, defaults = parse_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg = resolve_suite_seed(cfg, explicit="suite.seed" not in defaults)
    threads = args.threads if args.threads > 0 else (os.cpu_count() or 1)
    pipe = Pipeline(cfg, args.out, threads, defaults)
    pipe.out.mkdir(parents=True, exist_ok=True)
    # Load data up front so bad inputs fail before any stage starts.
    try:
        pipe.ws
    except IO_ERRORS:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return pipe


def _fmt(v) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def render_report(manifest: dict) -> str:
    lines = [f"saftlab {manifest.get('tool_version', '?')}  seed={manifest.get('seed')}", ""]
    ft = manifest.get("finetuned_accuracy", {})
    if ft:
        lines.append("fine-tuned test accuracy (%)")
        lines += [f"  {tid:<12}{_fmt(v['test'])}" for tid, v in ft.items()]
        lines.append("")
    merged = manifest.get("merged_accuracy", {})
    if merged:
        tids = list(next(iter(merged.values()))["per_task"])
        head = f"{'method':<12}" + "".join(f"{t:>10}" for t in tids) + f"{'Abs.':>9}{'Norm.':>9}"
        lines += [head, "-" * len(head)]
        for m, r in merged.items():
            cells = "".join(f"{_fmt(r['per_task'][t]['abs']):>10}" for t in tids)
            lines.append(f"{m:<12}{cells}{_fmt(r['avg_abs']):>9}{_fmt(r['avg_norm']):>9}")
        lines.append("")
    hess = manifest.get("stages", {}).get("hessian", {})
    if hess.get("eigen_minima"):
        lines.append("dominant Hessian eigenvalue at fine-tuned minima")
        lines += [f"  {tid:<12}{v['lambda_max']:.6g}" for tid, v in hess["eigen_minima"].items()]
        lines.append("")
    scan = manifest.get("stages", {}).get("scan", {}).get("summary", {})
    for key, s in scan.items():
        if key == "barrier":
            continue
        vals = ", ".join(f"{k}={v:.4g}" for k, v in s.items() if isinstance(v, float))
        lines.append(f"pair {key}: {vals}")
    stages = manifest.get("stages", {})
    times = {k: stages[k]["wall_clock_s"] for k in STAGES if k in stages}
    if times:
        lines.append("")
        lines.append("wall clock: " + ", ".join(f"{k} {v:.1f}s" for k, v in times.items()))
    return "\n".join(lines).rstrip() + "\n"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            manifest = json.loads((Path(args.out) / "manifest.json").read_text())
            sys.stdout.write(render_report(manifest))
            return EXIT_OK
        pipe = load(args)
        if args.command == "run":
            pipe.run(start=args.stage)
            print(pipe.path("manifest.json"))
        else:
            pipe.run_stage(args.command)
            pipe.write_manifest()
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (*IO_ERRORS, json.JSONDecodeError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
