"""Command-line front end.

Subcommands:
    plan run <scenario.json>        closed-loop episode, CSV log
    plan sweep <sweepspec.json>     canned solve-time studies, CSV outputs
    plan plot <summary.csv>         static SVG bars from a sweep summary
    plan calibrate <data.csv>       contact parameter identification

Exit codes: 0 success, 1 usage/validation error, 2 solver divergence in any
run.  Worker count for sweeps comes from the PLAN_WORKERS environment
variable.  All CSV files written by default contain only seed-derived values
(byte-identical across runs); measured wall times go to stdout, and to a
separate file only when --timings is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import bench
from .dynamics import calibrate_contact
from .planner import PlannerConfig, simulate_episode
from .scenarios import ScenarioError, load_scenario


def _cmd_run(args):
    try:
        scenario = load_scenario(args.scenario)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.cem_iters is not None and args.no_cem:
        print("error: --no-cem and --cem-iters are mutually exclusive", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    config = PlannerConfig(use_cem=not args.no_cem, cem_iters=args.cem_iters,
                           dump_filter=os.path.join(args.out, "filter.csv")
                           if args.dump_filter else None)
    log = simulate_episode(scenario, config, seed=args.seed)
    out_csv = os.path.join(args.out, f"episode_{scenario.name}_seed{args.seed}.csv")
    log.to_csv(out_csv, with_timings=args.timings)
    n_fail = sum(1 for r in log.rows if r["mpc_status"] != "converged")
    cem_t = sum(r["cem_time_s"] for r in log.rows)
    mpc_t = sum(r["mpc_time_s"] for r in log.rows)
    print(f"episode: {len(log.rows)} steps, modes visited {log.mode_sequence()}")
    print(f"max impedance force: {log.max_impedance_force():.3f} N "
          f"(limit {scenario.nlp_params.F_max})")
    print(f"solver: {len(log.rows) - n_fail}/{len(log.rows)} converged; "
          f"total CEM {cem_t:.2f} s, MPC {mpc_t:.2f} s")
    print(f"wrote {out_csv}")
    return 2 if n_fail else 0


def _cmd_sweep(args):
    try:
        spec = bench.load_sweep_spec(args.spec)
    except (ScenarioError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    if spec.variable == "cem_iters":
        result = bench.run_warmstart_sweep(spec)
    else:
        result = bench.run_param_sweep(spec)
    runs_csv = os.path.join(args.out, f"sweep_{spec.variable}_runs.csv")
    summary_csv = os.path.join(args.out, f"sweep_{spec.variable}_summary.csv")
    bench.write_runs_csv(result, runs_csv)
    bench.write_summary_csv(result, summary_csv)
    print(bench.timing_table(result))
    print(f"wrote {runs_csv}")
    print(f"wrote {summary_csv}")
    if args.timings:
        timings_csv = os.path.join(args.out, f"sweep_{spec.variable}_timings.csv")
        bench.write_timings_csv(result, timings_csv)
        print(f"wrote {timings_csv} (wall times, not deterministic)")
    return 2 if result.any_divergence() else 0


def _cmd_plot(args):
    try:
        out = bench.emit_plots(args.csv, args.out or (os.path.splitext(args.csv)[0] + ".svg"),
                               quantity=args.quantity)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


def _cmd_calibrate(args):
    try:
        scenario = load_scenario(args.scenario)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    n = scenario.model.n
    try:
        with open(args.data) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in line] for line in reader if line]
    except (OSError, ValueError) as exc:
        print(f"error: reading {args.data}: {exc}", file=sys.stderr)
        return 1
    if len(header) < 2 * n:
        print(f"error: {args.data}: need columns q_0..q_{n-1}, tau_0..tau_{n-1}",
              file=sys.stderr)
        return 1
    data = np.asarray(rows)
    dataset = [(row[:n], row[n:2 * n]) for row in data]
    try:
        result = calibrate_contact(dataset, args.contacts, scenario.model,
                                   full_attach=args.fit_attach)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"fit over {len(dataset)} samples: rms residual {result.residual:.3e}, "
          f"{'converged' if result.converged else 'NOT converged'}, "
          f"{'identifiable' if result.identifiable else 'UNIDENTIFIABLE'}")
    doc = []
    for i, cp in enumerate(result.contacts):
        print(f"  contact {i}: |K| = {np.linalg.norm(cp.K):.4g} N/m, "
              f"normal = {np.round(cp.normal, 4).tolist()}, rest = {np.round(cp.rest, 4).tolist()}")
        doc.append({"stiffness_npm": cp.K.tolist(), "rest_m": cp.rest.tolist(),
                    "attach_tcp_m": cp.attach.tolist()})
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"contacts": doc, "rms_residual": result.residual,
                       "converged": result.converged,
                       "identifiable": result.identifiable}, fh, indent=2)
        print(f"wrote {args.out}")
    return 0 if result.converged else 2


def main(argv=None):
    parser = argparse.ArgumentParser(prog="plan",
                                     description="contact-rich planning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a closed-loop episode")
    p_run.add_argument("scenario", help="scenario JSON path")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--no-cem", action="store_true",
                       help="skip the CEM warmstart (plain MPC arm)")
    p_run.add_argument("--cem-iters", type=int, default=None,
                       help="override the scenario's CEM iteration count")
    p_run.add_argument("--out", default=".", help="output directory")
    p_run.add_argument("--timings", action="store_true",
                       help="include measured wall-time columns in the CSV")
    p_run.add_argument("--dump-filter", action="store_true",
                       help="write per-step particle dumps to filter.csv")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a canned solve-time study")
    p_sweep.add_argument("spec", help="sweep spec JSON path")
    p_sweep.add_argument("--out", default=".", help="output directory")
    p_sweep.add_argument("--timings", action="store_true",
                         help="also write measured wall times to a separate CSV")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_plot = sub.add_parser("plot", help="render a sweep summary as SVG bars")
    p_plot.add_argument("csv", help="sweep summary CSV")
    p_plot.add_argument("--out", default=None, help="output SVG path")
    p_plot.add_argument("--quantity", default="iter", choices=["iter", "cost"])
    p_plot.set_defaults(func=_cmd_plot)

    p_cal = sub.add_parser("calibrate", help="fit contact parameters from torque data")
    p_cal.add_argument("data", help="CSV with columns q_0..q_{n-1}, tau_0..tau_{n-1}")
    p_cal.add_argument("--scenario", required=True,
                       help="scenario JSON defining the robot model")
    p_cal.add_argument("--contacts", type=int, default=1)
    p_cal.add_argument("--fit-attach", action="store_true",
                       help="also fit attachment offsets (needs orientation excitation)")
    p_cal.add_argument("--out", default=None, help="write the fit as JSON")
    p_cal.set_defaults(func=_cmd_calibrate)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1   # usage errors exit 1
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
