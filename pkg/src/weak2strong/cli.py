"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 run divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .exceptions import ConfigError, DivergenceError, FormatError
from .harness import ExperimentConfig, run_detection, run_pair, sweep_band, train_teacher
from .reporting import emit_report, plot_curves, read_log_csv, reports_from_json

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


def _load(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        config.seeds = [args.seed]
    if getattr(args, "out", None):
        config.output_dir = str(Path(args.out).resolve())
    return config


def cmd_train_teacher(args) -> int:
    config = _load(args)
    if args.seed is not None:
        config.teacher["train"]["seed"] = args.seed
    result = train_teacher(config, config.resolve(config.output_dir))
    for stage in result.stages:
        print(f"stage {stage.index}: metric {stage.metric:.4f} -> {stage.path}")
    if not result.reached_target:
        print("warning: teacher target not reached; best checkpoint kept", file=sys.stderr)
    return EXIT_OK


def cmd_run_pair(args) -> int:
    config = _load(args)
    if config.task == "detection":
        summary = run_detection(config)
        print(json.dumps(summary["runs"][0], indent=2))
        return EXIT_OK
    result = run_pair(config, teacher_ckpt=args.teacher_ckpt)
    ok = [r for r in result.reports if not r.failed]
    if ok:
        print(emit_report(ok, args.format if args.format != "svg" else "table"), end="")
    print(json.dumps({k: v for k, v in result.aggregate.items() if k != "speedups"}, indent=2))
    if not ok:
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_sweep_band(args) -> int:
    config = _load(args)
    rows = sweep_band(config)
    for r in rows:
        sp = r["median_speedup"]
        print(f"{r['teacher']:>16}  gap {r['relative_gap']:+7.2f}%  {r['regime']:<16} "
              f"median speedup {'—' if sp is None else f'{sp:.2f}×'}")
    return EXIT_OK


def _collect_reports(paths):
    reports = []
    for p in map(Path, paths):
        files = [p] if p.is_file() else sorted(p.glob("**/report.json"))
        if not files:
            raise FileNotFoundError(f"no report.json under {p}")
        for f in files:
            reports.extend(reports_from_json(f.read_text()))
    return reports


def cmd_report(args) -> int:
    reports = _collect_reports(args.runs)
    if args.format == "svg":
        out = Path(args.out or ".")
        out.mkdir(parents=True, exist_ok=True)
        for r in reports:
            rows = read_log_csv(r.log_path)
            arms = {}
            for row in rows:
                arms.setdefault(row.run_id, []).append(row)
            ours = next((arm for name, arm in arms.items() if name.startswith("ours")), [])
            gate_off = next((row.index for row in ours if not row.gate_active), None)
            plot_curves(out / f"curves_seed{r.seed}.svg", arms, r.tau, gate_off,
                        xlabel="epoch" if r.unit == "ep" else "step")
        print(f"wrote {len(reports)} SVG file(s) to {out}")
        return EXIT_OK
    text = emit_report(reports, args.format, args.out)
    if not args.out:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weak2strong", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, teacher=False):
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None, help="run only this seed")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        if teacher:
            p.add_argument("--teacher-ckpt", default=None, help="use this teacher checkpoint")
        p.add_argument("--format", default="table", choices=["table", "csv", "json", "svg"])

    p = sub.add_parser("train-teacher", help="train a teacher and write stage checkpoints")
    common(p)
    p.set_defaults(func=cmd_train_teacher)
    p = sub.add_parser("run-pair", help="baseline vs distilled runs for every seed")
    common(p, teacher=True)
    p.set_defaults(func=cmd_run_pair)
    p = sub.add_parser("sweep-band", help="speedup against teacher strength")
    common(p)
    p.set_defaults(func=cmd_sweep_band)
    p = sub.add_parser("report", help="render collected run reports")
    p.add_argument("runs", nargs="+", help="run directories or report.json files")
    p.add_argument("--format", default="table", choices=["table", "csv", "json", "svg"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"run diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
