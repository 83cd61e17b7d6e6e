"""Command-line entry point.

    cryosort simulate|pick|score|sort|reconstruct|pipeline|verify|report [options]

Settings come from ``--config FILE`` and ``--set key=value`` (repeatable);
``--set``, ``--seed`` and ``--workers`` override the file, which overrides
the defaults. A relative ``--run-dir`` is resolved under ``$CRYOSORT_RUN_ROOT``
when that variable is set.

Exit status: 0 success, 2 configuration or parameter error, 3 unimodal
score distribution, 4 too few particles, 5 failed invariant or internal error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import RUN_ROOT_ENV, RunConfig, parse_overrides
from .errors import CryosortError
from .sort import LoopTrace


def _run_dir(arg: str) -> pipeline.RunDirectory:
    p = Path(arg)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return pipeline.RunDirectory(p)


def _config(args) -> RunConfig:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.workers is not None:
        overrides["run.workers"] = args.workers
    return RunConfig.load(args.config, overrides)


def _print_checks(checks) -> None:
    for c in checks:
        print(c.line())


def _table(path: Path) -> list[str]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    widths = [max(len(r[i]) for r in rows if i < len(r)) for i in range(len(rows[0]))]
    return ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]


def cmd_report(run: pipeline.RunDirectory) -> int:
    found = False
    if (run.root / "report.txt").exists():
        print((run.root / "report.txt").read_text(), end="")
        found = True
    if (run.root / "trace.csv").exists():
        trace = LoopTrace.from_csv(run.root / "trace.csv")
        print("\nround  retained  threshold  good-peak std")
        for r in trace.rounds:
            print(f"{r.round:5d}  {r.retained:8d}  {r.threshold:9.5f}  {r.good_peak_std:13.5f}")
        found = True
    if (run.root / "verify.csv").exists():
        print()
        print("\n".join(_table(run.root / "verify.csv")))
        found = True
    if not found:
        print(f"nothing to report in {run.root}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    common.add_argument("--workers", type=int, help="shorthand for --set run.workers=N")
    common.add_argument("--run-dir", default="run", help="output directory (default: run)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cryosort", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write micrographs and ground truth")
    sub.add_parser("pick", parents=[common], help="detect particles in simulated micrographs")
    p = sub.add_parser("score", parents=[common], help="score picks against a reference")
    p.add_argument("--reference", help="MRC map (default: volumes/initial.mrc)")
    p = sub.add_parser("sort", parents=[common], help="threshold a scores file")
    p.add_argument("--scores", help="scores CSV (default: latest scores_round_<k>.csv)")
    sub.add_parser("reconstruct", parents=[common], help="maps and FSC from labelled scores")
    sub.add_parser("pipeline", parents=[common], help="run every stage and write a report")
    sub.add_parser("verify", parents=[common], help="Monte-Carlo checks of the score model")
    sub.add_parser("report", parents=[common], help="print the summaries found in a run directory")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        run = _run_dir(args.run_dir)
        if args.command == "show-config":
            print(cfg.dumps(), end="")
        elif args.command == "simulate":
            _, mics, particles = pipeline.cmd_simulate(cfg, run)
            print(f"{len(mics)} micrographs, {len(particles)} ground-truth rows -> {run.root}")
        elif args.command == "pick":
            picks = pipeline.cmd_pick(cfg, run)
            print(f"{len(picks)} picks -> {run.root / 'picks.csv'}")
        elif args.command == "score":
            records = pipeline.cmd_score(cfg, run, args.reference)
            print(f"{len(records)} scores -> {run.scores_path(1)}")
        elif args.command == "sort":
            _, result = pipeline.cmd_sort(cfg, run, args.scores)
            print(f"threshold {result.threshold:.6f}, retained {result.retained}")
        elif args.command == "reconstruct":
            cmp = pipeline.cmd_reconstruct(cfg, run)
            print("\n".join(cmp.lines()))
        elif args.command == "pipeline":
            run.write_config(cfg)
            try:
                pipeline.cmd_pipeline(cfg, run)
            finally:
                if (run.root / "report.txt").exists():
                    print((run.root / "report.txt").read_text(), end="")
        elif args.command == "verify":
            run.root.mkdir(parents=True, exist_ok=True)
            checks = pipeline.cmd_verify(cfg, run)
            _print_checks(checks)
            if any(c.passed is False for c in checks):
                return 5
        elif args.command == "report":
            return cmd_report(run)
    except CryosortError as exc:
        where = f" in stage {exc.stage}" if hasattr(exc, "stage") else ""
        print(f"cryosort: error [{exc.code}]{where}: {exc}", file=sys.stderr)
        return exc.exit_status
    return 0


if __name__ == "__main__":
    sys.exit(main())
