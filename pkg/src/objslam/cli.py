"""Command-line surface.

Four subcommands:

  run        execute one scenario in one mode, writing the record table,
             a metrics report, and report figures into --out
  eval       recompute report + figures from an existing record table
  scenario   list / print / generate / validate scenario descriptions
  sweep      seed-ensemble runs across all modes with aggregate medians

Every report-writing path also renders figures next to the delimited
output. Validation failures exit nonzero with a one-line diagnostic.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .graph import FEEDBACK_THRESHOLD, GATE_ALPHA
from .metrics import DEFAULT_LOST_THRESHOLD_M, per_frame_error, render_report
from .pipeline import MODES, RunConfig, read_records, run, write_records
from .scene import (
    builtin_scenario,
    builtin_scenarios,
    read_scenario,
    replace_seed,
    write_scenario,
)


def load_scenario(token: str, seed=None):
    """A scenario reference is either a built-in name or a path to a
    scenario file; an optional seed overrides the stored one."""
    path = Path(token)
    if path.exists():
        scn = read_scenario(path)
        return replace_seed(scn, seed) if seed is not None else scn
    return builtin_scenario(token, seed=seed)


def _write_report_bundle(records, out_dir, meta, lost_threshold):
    from . import plots

    os.makedirs(out_dir, exist_ok=True)
    report = render_report(records, meta, lost_threshold)
    report_path = os.path.join(out_dir, "report.txt")
    with open(report_path, "w") as fh:
        fh.write(report)
    figures = plots.save_report_figures(records, out_dir, lost_threshold)
    return report, [report_path, *figures]


def _cmd_run(args) -> int:
    scn = load_scenario(args.scenario, args.seed)
    cfg = RunConfig(
        scenario=scn, mode=args.mode, alpha=args.alpha, threshold=args.th
    )
    records = run(cfg)
    os.makedirs(args.out, exist_ok=True)
    records_path = os.path.join(args.out, "records.txt")
    write_records(records, records_path)
    meta = {
        "scenario": scn.name,
        "mode": args.mode,
        "seed": str(scn.seed),
        "alpha": f"{args.alpha:g}",
        "th": str(args.th),
    }
    report, written = _write_report_bundle(
        records, args.out, meta, args.lost_threshold
    )
    sys.stdout.write(report)
    print("wrote", " ".join([records_path, *written]))
    return 0


def _cmd_eval(args) -> int:
    records = read_records(args.records)
    out_dir = args.out or str(Path(args.records).parent)
    report, written = _write_report_bundle(
        records, out_dir, None, args.lost_threshold
    )
    sys.stdout.write(report)
    print("wrote", " ".join(written))
    return 0


def _describe(scn) -> str:
    lines = [
        f"name {scn.name}",
        f"seed {scn.seed}",
        f"frames {scn.n_frames}",
        f"frame_period {scn.frame_period:.6g}",
    ]
    for model, pose in scn.objects:
        lines.append(
            f"object {model.label} segments {len(model.segments)} "
            f"landmarks {len(model.landmark_points)} "
            f"at ({pose.translation[0]:.3g}, {pose.translation[1]:.3g}, "
            f"{pose.translation[2]:.3g})"
        )
    for occ in scn.occlusions:
        lines.append(
            f"occlusion {occ.label} frames {occ.start}-{occ.end} "
            f"fraction {occ.fraction:g}"
        )
    if not scn.occlusions:
        lines.append("occlusion none")
    return "\n".join(lines)


def _cmd_scenario(args) -> int:
    if args.action == "list":
        for scn in builtin_scenarios():
            occ = "occluded" if scn.occlusions else "plain"
            print(f"{scn.name:24s} {scn.n_frames} frames  {occ:8s}  seed {scn.seed}")
        return 0
    if args.action == "print":
        if args.name is None:
            raise ValueError("scenario print needs a name or file")
        print(_describe(load_scenario(args.name, args.seed)))
        return 0
    if args.action == "generate":
        if args.name is None or args.out is None:
            raise ValueError("scenario generate needs a name and --out FILE")
        scn = load_scenario(args.name, args.seed)
        write_scenario(scn, args.out)
        print(f"wrote {args.out}")
        return 0
    # validate: constructors check invariants while reading
    if args.name is None:
        raise ValueError("scenario validate needs a file")
    scn = read_scenario(args.name)
    print(f"ok: {scn.name} ({scn.n_frames} frames)")
    return 0


def _cmd_sweep(args) -> int:
    from . import plots

    base = load_scenario(args.scenario)
    os.makedirs(args.out, exist_ok=True)
    results = {mode: [] for mode in MODES}
    rows = []
    for i in range(args.seeds):
        seed = base.seed + i
        scn = replace_seed(base, seed)
        for mode in MODES:
            cfg = RunConfig(
                scenario=scn, mode=mode, alpha=args.alpha, threshold=args.th
            )
            report = per_frame_error(run(cfg), args.lost_threshold)
            results[mode].append((seed, report.ratio_pct))
            rows.append(
                f"{mode} {seed} {report.ratio_pct:.6g} {report.mean_m:.6g}"
            )
    lines = [
        f"# objslam sweep scenario {base.name} seeds {args.seeds} "
        f"lost_threshold {args.lost_threshold:g}",
        "# mode seed ratio_pct mean_m",
        *rows,
        "# mode median_ratio_pct",
    ]
    medians = {
        mode: float(np.median([r for _, r in results[mode]])) for mode in MODES
    }
    for mode in MODES:
        lines.append(f"{mode} {medians[mode]:.6g}")
    ordered = (
        medians["full"] >= medians["no-feedback"] >= medians["tracker-only"]
    )
    lines.append(
        "ordering full>=no-feedback>=tracker-only: " + ("yes" if ordered else "no")
    )
    text = "\n".join(lines) + "\n"
    sweep_path = os.path.join(args.out, "sweep.txt")
    with open(sweep_path, "w") as fh:
        fh.write(text)
    fig_path = os.path.join(args.out, "sweep.png")
    plots.save_sweep_figure(results, fig_path, args.lost_threshold)
    sys.stdout.write(text)
    print("wrote", sweep_path, fig_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="objslam",
        description="Desk-scale object tracking and mapping simulation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one scenario")
    run_p.add_argument("--scenario", required=True,
                       help="built-in name or scenario file")
    run_p.add_argument("--mode", choices=MODES, default="full")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    run_p.add_argument("--alpha", type=float, default=GATE_ALPHA,
                       help="gate width in sigmas")
    run_p.add_argument("--th", type=int, default=FEEDBACK_THRESHOLD,
                       help="rejections tolerated before reinitialization")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument("--lost-threshold", type=float,
                       default=DEFAULT_LOST_THRESHOLD_M)
    run_p.set_defaults(func=_cmd_run)

    eval_p = sub.add_parser("eval", help="report metrics for a record table")
    eval_p.add_argument("records", help="record table written by run")
    eval_p.add_argument("--out", default=None,
                        help="output directory (default: beside the input)")
    eval_p.add_argument("--lost-threshold", type=float,
                        default=DEFAULT_LOST_THRESHOLD_M)
    eval_p.set_defaults(func=_cmd_eval)

    scn_p = sub.add_parser("scenario", help="scenario tooling")
    scn_p.add_argument("action", choices=("list", "print", "generate", "validate"))
    scn_p.add_argument("name", nargs="?", default=None,
                       help="built-in name or scenario file")
    scn_p.add_argument("--seed", type=int, default=None)
    scn_p.add_argument("--out", default=None, help="output file for generate")
    scn_p.set_defaults(func=_cmd_scenario)

    sweep_p = sub.add_parser("sweep", help="seed ensemble across all modes")
    sweep_p.add_argument("--scenario", required=True)
    sweep_p.add_argument("--seeds", type=int, default=10,
                         help="ensemble size; seeds count up from the scenario seed")
    sweep_p.add_argument("--alpha", type=float, default=GATE_ALPHA)
    sweep_p.add_argument("--th", type=int, default=FEEDBACK_THRESHOLD)
    sweep_p.add_argument("--out", required=True, help="output directory")
    sweep_p.add_argument("--lost-threshold", type=float,
                         default=DEFAULT_LOST_THRESHOLD_M)
    sweep_p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
