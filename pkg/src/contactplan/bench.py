"""Benchmark harness: canned solve-time studies, CSV emission, SVG plots.

Three studies mirror the simulation protocols of the planner evaluation:

* warmstart sweep — converge the MPC on the free-space problem, switch the
  dynamics to a single stiff point contact, run a configurable number of CEM
  iterations from the shifted free-space solution, then solve the contact MPC;
  repeated with perturbed initial states.
* parameter sweep — the same protocol at a fixed CEM budget (0 vs 5
  iterations) over a grid of contact stiffnesses or planning horizons.
* episode — the full closed loop of ``planner.simulate_episode``.

Determinism contract: every CSV written by default carries only seed-derived
quantities (iteration counts, costs, statuses), so identical arguments and
seeds give byte-identical files.  Measured wall times are inherently
machine-dependent; they are kept in the in-memory results and the stdout
summary, and written to a separate file only when explicitly requested.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cem import icem_plan
from .dynamics import forward_kinematics
from .nlp import build_nlp, solve
from .scenarios import Scenario, load_scenario, scenario_from_dict

RUNS_SCHEMA = "contactplan-sweep-runs-v1"
SUMMARY_SCHEMA = "contactplan-sweep-summary-v1"
WORKERS_ENV = "PLAN_WORKERS"

SWEEP_VARIABLES = ("cem_iters", "stiffness", "horizon")


@dataclass
class SweepSpec:
    variable: str                  # one of SWEEP_VARIABLES
    values: list
    repeats: int
    perturbation_std: float
    scenario: Scenario
    seed: int = 0
    cem_iters_fixed: tuple = (0, 5)   # arms used by the parameter sweeps

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ValueError(f"sweep variable must be one of {SWEEP_VARIABLES}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.repeats < 1:
            raise ValueError("need at least one repeat")


@dataclass
class RunRecord:
    value: float
    cem_iters: int
    rep: int
    seed: int
    mpc_iterations: int
    mpc_status: str
    traj_cost: float
    kkt_residual: float
    cem_rollout_steps: int         # deterministic CEM work counter
    cem_time_s: float              # measured, excluded from deterministic CSV
    mpc_time_s: float

    @property
    def total_time_s(self):
        return self.cem_time_s + self.mpc_time_s


@dataclass
class SweepResult:
    spec_variable: str
    records: list = field(default_factory=list)

    def arms(self):
        return sorted({(r.value, r.cem_iters) for r in self.records})

    def stats(self):
        """Per (value, arm): mean/std of total solve time, iterations, cost."""
        out = {}
        for key in self.arms():
            rs = [r for r in self.records if (r.value, r.cem_iters) == key]
            times = np.array([r.total_time_s for r in rs])
            iters = np.array([r.mpc_iterations for r in rs], dtype=float)
            costs = np.array([r.traj_cost for r in rs])
            out[key] = {
                "n": len(rs),
                "time_mean": float(times.mean()), "time_std": float(times.std()),
                "iter_mean": float(iters.mean()), "iter_std": float(iters.std()),
                "cost_mean": float(costs.mean()), "cost_std": float(costs.std()),
                "any_failed": any(r.mpc_status != "converged" for r in rs),
            }
        return out

    def any_divergence(self):
        return any(r.mpc_status not in ("converged",) for r in self.records)


def _free_space_solution(scenario: Scenario):
    """Converge the MPC on the free-space problem from the nominal state."""
    xi0 = scenario.initial_state.vector
    free = scenario.planner_modes[0]
    belief = np.zeros(scenario.n_modes)
    belief[0] = 1.0
    problem = build_nlp(belief, {m.id: xi0 for m in scenario.planner_modes},
                        scenario.planner_modes, scenario.nlp_params, scenario.cost,
                        scenario.model, scenario.gains)
    U, states, stats = solve(problem, scenario.solve_options)
    if stats.status != "converged":
        raise RuntimeError(f"free-space reference solve failed: {stats.status}")
    return U, states


class _ShiftedInit:
    """Adapter giving build_nlp a shifted previous solution."""

    def __init__(self, U, states):
        self.U = U
        self.states = states

    def shifted(self):
        U = np.vstack([self.U[1:], self.U[-1:]])
        states = {z: np.vstack([S[1:], S[-1:]]) for z, S in self.states.items()}
        return U, states


def run_transition_case(scenario: Scenario, n_cem_iters: int, rep_seed: int,
                        perturbation_std: float, free_solution=None) -> RunRecord:
    """One repetition of the contact-transition re-solve protocol."""
    rng = np.random.default_rng(rep_seed)
    if free_solution is None:
        free_solution = _free_space_solution(scenario)
    U_free, states_free = free_solution

    xi0 = scenario.initial_state.vector + perturbation_std * rng.standard_normal(
        2 * scenario.model.n)
    contact_mode = scenario.planner_modes[1]
    belief = np.zeros(scenario.n_modes)
    belief[contact_mode.id] = 1.0
    xi0_by_mode = {m.id: xi0 for m in scenario.planner_modes}

    prev = _ShiftedInit(U_free, states_free)
    cem_time = 0.0
    cem_steps = 0
    warmstart = None
    if n_cem_iters > 0:
        cem_params = replace(scenario.cem_params, n_iter=n_cem_iters)
        particles = [(xi0, 1.0, contact_mode.id)]
        warm_mean = prev.shifted()[0].T
        t0 = time.perf_counter()
        warmstart = icem_plan(particles, warm_mean, cem_params, scenario.cost,
                              scenario.dt, scenario.model, scenario.gains,
                              [contact_mode], rng, xi0_by_mode=xi0_by_mode)
        cem_time = time.perf_counter() - t0
        cem_steps = n_cem_iters * cem_params.n_samples * scenario.horizon

    problem = build_nlp(belief, xi0_by_mode, scenario.planner_modes,
                        scenario.nlp_params, scenario.cost, scenario.model,
                        scenario.gains, warmstart=warmstart,
                        prev_solution=None if warmstart is not None else prev)
    t0 = time.perf_counter()
    _, _, stats = solve(problem, scenario.solve_options)
    mpc_time = time.perf_counter() - t0
    return RunRecord(value=np.nan, cem_iters=n_cem_iters, rep=0, seed=rep_seed,
                     mpc_iterations=stats.iterations, mpc_status=stats.status,
                     traj_cost=stats.cost, kkt_residual=stats.kkt_residual,
                     cem_rollout_steps=cem_steps, cem_time_s=cem_time,
                     mpc_time_s=mpc_time)


def _case_args(spec: SweepSpec):
    """Deterministic (value, arm, rep, seed, scenario) grid for the sweep."""
    cases = []
    for vi, value in enumerate(spec.values):
        if spec.variable == "cem_iters":
            scen = spec.scenario
            arms = [int(value)]
        elif spec.variable == "stiffness":
            scen = spec.scenario.with_contact_stiffness(float(value))
            arms = list(spec.cem_iters_fixed)
        else:
            scen = spec.scenario.with_horizon(int(value))
            arms = list(spec.cem_iters_fixed)
        for arm in arms:
            for rep in range(spec.repeats):
                # seed depends on the repetition only: every value and arm sees
                # the same perturbation draws (paired comparisons)
                seed = spec.seed + 101 * rep
                cases.append((float(value), arm, rep, seed, scen))
    return cases


def _run_case(args):
    value, arm, rep, seed, scen, perturbation_std = args
    rec = run_transition_case(scen, arm, seed, perturbation_std)
    rec.value = value
    rec.rep = rep
    return rec


def run_warmstart_sweep(spec: SweepSpec) -> SweepResult:
    """CEM-iteration sweep on the contact-transition protocol (Fig. 4 style)."""
    if spec.variable != "cem_iters":
        raise ValueError("warmstart sweep expects variable == 'cem_iters'")
    return _run_sweep(spec)


def run_param_sweep(spec: SweepSpec) -> SweepResult:
    """Stiffness or horizon sweep with fixed CEM budgets (Fig. 5 style)."""
    if spec.variable not in ("stiffness", "horizon"):
        raise ValueError("parameter sweep expects 'stiffness' or 'horizon'")
    return _run_sweep(spec)


def _run_sweep(spec: SweepSpec) -> SweepResult:
    cases = [(v, a, r, s, scen, spec.perturbation_std)
             for (v, a, r, s, scen) in _case_args(spec)]
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_case, cases))
    else:
        records = [_run_case(c) for c in cases]
    # deterministic ordering regardless of scheduling
    records.sort(key=lambda r: (r.value, r.cem_iters, r.rep))
    return SweepResult(spec_variable=spec.variable, records=records)


# ---------------------------------------------------------------------------
# CSV / plotting
# ---------------------------------------------------------------------------

RUN_COLUMNS = ["value", "cem_iters", "rep", "seed", "mpc_iterations", "mpc_status",
               "traj_cost", "kkt_residual", "cem_rollout_steps"]
SUMMARY_COLUMNS = ["value", "cem_iters", "n", "iter_mean", "iter_std",
                   "cost_mean", "cost_std"]
TIMING_COLUMNS = ["value", "cem_iters", "rep", "cem_time_s", "mpc_time_s", "total_time_s"]


def write_runs_csv(result: SweepResult, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{RUNS_SCHEMA}:{result.spec_variable}"])
        w.writerow(RUN_COLUMNS)
        for r in result.records:
            w.writerow([repr(float(r.value)), r.cem_iters, r.rep, r.seed,
                        r.mpc_iterations, r.mpc_status, repr(float(r.traj_cost)),
                        repr(float(r.kkt_residual)), r.cem_rollout_steps])


def write_summary_csv(result: SweepResult, path):
    stats = result.stats()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{SUMMARY_SCHEMA}:{result.spec_variable}"])
        w.writerow(SUMMARY_COLUMNS)
        for (value, arm), st in stats.items():
            w.writerow([repr(float(value)), arm, st["n"],
                        repr(st["iter_mean"]), repr(st["iter_std"]),
                        repr(st["cost_mean"]), repr(st["cost_std"])])


def write_timings_csv(result: SweepResult, path):
    """Measured wall times; machine-dependent, opt-in."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["contactplan-sweep-timings-v1 (not seed-deterministic)"])
        w.writerow(TIMING_COLUMNS)
        for r in result.records:
            w.writerow([repr(float(r.value)), r.cem_iters, r.rep,
                        repr(r.cem_time_s), repr(r.mpc_time_s), repr(r.total_time_s)])


def timing_table(result: SweepResult):
    """Human-readable mean +/- std of measured solve times per arm."""
    lines = [f"{'value':>10} {'cem_iters':>9} {'n':>4} {'time_mean_s':>12} "
             f"{'time_std_s':>11} {'iter_mean':>9} {'cost_mean':>12}"]
    for (value, arm), st in result.stats().items():
        lines.append(f"{value:>10.4g} {arm:>9d} {st['n']:>4d} {st['time_mean']:>12.4f} "
                     f"{st['time_std']:>11.4f} {st['iter_mean']:>9.1f} {st['cost_mean']:>12.5g}")
    return "\n".join(lines)


def load_summary_rows(path):
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or not header[0].startswith(SUMMARY_SCHEMA):
            raise ValueError(f"{path}: not a sweep summary CSV")
        cols = next(reader)
        rows = [dict(zip(cols, line)) for line in reader]
    if not rows:
        raise ValueError(f"{path}: summary contains no data rows")
    return rows


def emit_plots(summary_csv_path, out_svg_path, quantity="iter", title=None):
    """Render mean +/- std bars per sweep value from a summary CSV.

    Deterministic static SVG, produced without any plotting backend.
    """
    rows = load_summary_rows(summary_csv_path)
    values = sorted({float(r["value"]) for r in rows})
    arms = sorted({int(r["cem_iters"]) for r in rows})
    mean_key, std_key = f"{quantity}_mean", f"{quantity}_std"
    data = {(float(r["value"]), int(r["cem_iters"])):
            (float(r[mean_key]), float(r[std_key])) for r in rows}

    width, height, margin = 640, 400, 60
    tops = [m + s for (m, s) in data.values()]
    y_max = max(tops) * 1.15 if max(tops) > 0 else 1.0
    y_min = 0.0
    plot_w, plot_h = width - 2 * margin, height - 2 * margin

    def ypix(v):
        return margin + plot_h * (1.0 - (v - y_min) / (y_max - y_min))

    group_w = plot_w / len(values)
    bar_w = group_w / (len(arms) + 1)
    palette = ["#d95f02", "#1b9e77", "#7570b3", "#e7298a"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        parts.append(f'<text x="{width/2}" y="24" text-anchor="middle" '
                     f'font-size="15">{title}</text>')
    parts.append(f'<line x1="{margin}" y1="{ypix(0)}" x2="{width-margin}" '
                 f'y2="{ypix(0)}" stroke="black"/>')
    parts.append(f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
                 f'y2="{height-margin}" stroke="black"/>')
    for gi, value in enumerate(values):
        x0 = margin + gi * group_w
        for ai, arm in enumerate(arms):
            if (value, arm) not in data:
                continue
            mean, std = data[(value, arm)]
            bx = x0 + (ai + 0.5) * bar_w
            color = palette[ai % len(palette)]
            parts.append(f'<rect x="{bx:.2f}" y="{ypix(mean):.2f}" width="{bar_w:.2f}" '
                         f'height="{(ypix(0)-ypix(mean)):.2f}" fill="{color}" opacity="0.85"/>')
            cx = bx + bar_w / 2
            parts.append(f'<line x1="{cx:.2f}" y1="{ypix(mean-std):.2f}" x2="{cx:.2f}" '
                         f'y2="{ypix(mean+std):.2f}" stroke="black" stroke-width="1.5"/>')
        parts.append(f'<text x="{x0 + group_w/2:.2f}" y="{height-margin+18}" '
                     f'text-anchor="middle" font-size="12">{value:g}</text>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = y_min + frac * (y_max - y_min)
        parts.append(f'<text x="{margin-6}" y="{ypix(v)+4:.2f}" text-anchor="end" '
                     f'font-size="11">{v:.3g}</text>')
    legend_y = margin - 18
    for ai, arm in enumerate(arms):
        lx = margin + 120 * ai
        parts.append(f'<rect x="{lx}" y="{legend_y-10}" width="12" height="12" '
                     f'fill="{palette[ai % len(palette)]}"/>')
        parts.append(f'<text x="{lx+16}" y="{legend_y}" font-size="12">'
                     f'cem_iters={arm}</text>')
    parts.append("</svg>")
    with open(out_svg_path, "w") as fh:
        fh.write("\n".join(parts))
    return out_svg_path


def load_sweep_spec(path) -> SweepSpec:
    import json
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("variable", "values", "repeats", "perturbation_std", "scenario"):
        if key not in doc:
            raise ValueError(f"{path}: sweep spec missing '{key}'")
    scen = doc["scenario"]
    if isinstance(scen, str):
        base = os.path.join(os.path.dirname(os.fspath(path)), scen)
        scenario = load_scenario(base)
    else:
        scenario = scenario_from_dict(scen, name=f"{path}.scenario")
    return SweepSpec(variable=doc["variable"], values=list(doc["values"]),
                     repeats=int(doc["repeats"]),
                     perturbation_std=float(doc["perturbation_std"]),
                     scenario=scenario, seed=int(doc.get("seed", 0)),
                     cem_iters_fixed=tuple(doc.get("cem_iters_fixed", (0, 5))))
