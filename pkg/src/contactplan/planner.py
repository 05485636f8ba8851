"""Closed-loop integration: simulator, filter, CEM warmstart, MPC, logging.

Per control step the pipeline is: measure -> hybrid particle filter ->
weighted iCEM seeded with the shifted previous MPC solution -> belief-weighted
MPC solved by the interior-point method, warmstarted from the CEM rollout ->
apply the first action.  The planner only ever sees measurements; the
ground-truth simulator selects the active contact mode from geometric
predicates and may substep for fidelity at high stiffness.

If the MPC fails to converge the applied action falls back to the CEM
incumbent (always available and box-clipped).  Every applied action is
additionally projected onto the impedance-force cap at the estimated TCP
position, with a small safety margin, so the executed command respects the
force limit on both paths.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .cem import icem_plan
from .dynamics import JointState, forward_kinematics, observe, step
from .estimator import (
    HybridBelief,
    mode_conditioned_state,
    pf_step,
    RobotHybridSystem,
)
from .nlp import NlpSolution, build_nlp, solve
from .scenarios import Scenario

FORCE_MARGIN = 1e-3   # applied actions keep this relative margin under F_max


@dataclass
class PlannerConfig:
    use_cem: bool = True
    cem_iters: int | None = None      # override the scenario's n_iter
    dump_filter: str | None = None    # CSV path for per-step particle dumps


@dataclass
class PlannerState:
    system: RobotHybridSystem
    belief: HybridBelief
    prev_solution: object | None = None
    last_u: np.ndarray | None = None
    filter_rows: list = field(default_factory=list)


@dataclass
class EpisodeLog:
    """One row per executed control step."""

    scenario: str
    n_modes: int
    n_joints: int
    m: int
    rows: list = field(default_factory=list)

    COLUMNS_STATIC = ["step", "time_s", "true_mode"]

    def columns(self, with_timings=False):
        cols = list(self.COLUMNS_STATIC)
        cols += [f"belief_{z}" for z in range(self.n_modes)]
        cols += [f"q_{i}" for i in range(self.n_joints)]
        cols += [f"qd_{i}" for i in range(self.n_joints)]
        cols += [f"y_{i}" for i in range(2 * self.n_joints)]
        cols += [f"u_{i}" for i in range(self.m)]
        cols += ["impedance_force_n", "mpc_iterations", "mpc_status", "plan_cost"]
        if with_timings:
            cols += ["cem_time_s", "mpc_time_s"]
        return cols

    def to_csv(self, path, with_timings=False):
        cols = self.columns(with_timings)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"contactplan-episode-v1:{self.scenario}"])
            writer.writerow(cols)
            for row in self.rows:
                writer.writerow([_fmt(row[c]) for c in cols])

    def max_impedance_force(self):
        return max(r["impedance_force_n"] for r in self.rows)

    def mode_sequence(self):
        """Distinct true modes in order of first appearance."""
        seq = []
        for r in self.rows:
            if not seq or seq[-1] != r["true_mode"]:
                seq.append(r["true_mode"])
        return seq


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def init_planner(scenario: Scenario, rng) -> PlannerState:
    system = RobotHybridSystem(scenario.model, scenario.planner_modes, scenario.gains,
                               scenario.noise, scenario.dt)
    belief = HybridBelief.initialize(scenario.initial_state.vector,
                                     np.diag(scenario.init_state_std ** 2),
                                     scenario.mode_prior, scenario.n_particles, rng)
    x0, _ = forward_kinematics(scenario.initial_state.q, scenario.model)
    return PlannerState(system=system, belief=belief,
                        last_u=np.clip(x0, scenario.nlp_params.u_lo, scenario.nlp_params.u_hi))


def project_to_force_limit(u, x_hat, gains, F_max):
    """Scale the setpoint toward the TCP so |K_imp (x - u)| stays under F_max."""
    d = x_hat - u
    f = np.linalg.norm(gains.K_imp * d)
    cap = F_max * (1.0 - FORCE_MARGIN)
    if f <= cap:
        return u
    return x_hat - d * (cap / f)


def plan_step(ps: PlannerState, y, scenario: Scenario, rng, config: PlannerConfig | None = None):
    """One receding-horizon planning step; returns (applied action, diagnostics)."""
    config = config or PlannerConfig()
    ps.belief = pf_step(ps.belief, ps.system, scenario.transition, ps.last_u, y, rng,
                        ess_threshold=scenario.ess_threshold)
    belief = ps.belief.mode_belief_
    xi0_by_mode = {mode.id: mode_conditioned_state(ps.belief, mode.id)[0]
                   for mode in scenario.planner_modes}

    # shifted previous optimum seeds the CEM mean (or a hold if none exists)
    if ps.prev_solution is not None:
        warm_mean = ps.prev_solution.shifted()[0].T
    else:
        q_hat = np.average(ps.belief.mus, axis=0, weights=ps.belief.weights)[: scenario.model.n]
        x_hat, _ = forward_kinematics(q_hat, scenario.model)
        warm_mean = np.repeat(np.clip(x_hat, scenario.nlp_params.u_lo, scenario.nlp_params.u_hi)
                              [:, None], scenario.horizon, axis=1)

    cem_result = None
    cem_time = 0.0
    if config.use_cem:
        cem_params = scenario.cem_params
        if config.cem_iters is not None:
            from dataclasses import replace
            cem_params = replace(cem_params, n_iter=config.cem_iters)
        particles = [(ps.belief.mus[i], float(ps.belief.weights[i]),
                      int(ps.belief.sampled_modes[i]))
                     for i in range(ps.belief.n_particles)]
        t0 = time.perf_counter()
        cem_result = icem_plan(particles, warm_mean, cem_params, scenario.cost,
                               scenario.dt, scenario.model, scenario.gains,
                               scenario.planner_modes, rng, xi0_by_mode=xi0_by_mode)
        cem_time = time.perf_counter() - t0

    problem = build_nlp(belief, xi0_by_mode, scenario.planner_modes, scenario.nlp_params,
                        scenario.cost, scenario.model, scenario.gains,
                        warmstart=cem_result, prev_solution=ps.prev_solution)
    t0 = time.perf_counter()
    U, states, stats = solve(problem, scenario.solve_options)
    mpc_time = time.perf_counter() - t0

    if stats.status == "converged":
        u_apply = U[0].copy()
        ps.prev_solution = NlpSolution(U=U, states=states, stats=stats)
    elif cem_result is not None:
        u_apply = cem_result.best_actions[:, 0].copy()   # safe fallback
    elif ps.prev_solution is not None:
        u_apply = ps.prev_solution.shifted()[0][0].copy()
    else:
        u_apply = ps.last_u.copy()

    q_hat = np.average(ps.belief.mus, axis=0, weights=ps.belief.weights)[: scenario.model.n]
    x_hat, _ = forward_kinematics(q_hat, scenario.model)
    u_apply = np.clip(u_apply, scenario.nlp_params.u_lo, scenario.nlp_params.u_hi)
    u_apply = project_to_force_limit(u_apply, x_hat, scenario.gains, scenario.nlp_params.F_max)
    ps.last_u = u_apply

    diagnostics = {"cem_time_s": cem_time, "mpc_time_s": mpc_time,
                   "mpc_iterations": stats.iterations, "mpc_status": stats.status,
                   "plan_cost": stats.cost, "belief": belief.copy()}
    return u_apply, diagnostics


def true_step(state: JointState, u, scenario: Scenario, rng):
    """Ground-truth step: predicate-selected mode, substepped integration.

    Returns the next state and the measurement taken at it.  Process and
    measurement noise follow the scenario's noise model when enabled.
    """
    sub = scenario.sim_substeps
    dt_sub = scenario.dt / sub
    st = state
    for _ in range(sub):
        x, _ = forward_kinematics(st.q, scenario.model)
        mode = scenario.true_modes[scenario.true_mode_id(x)]
        st = step(st, mode, u, dt_sub, scenario.model, scenario.gains)
    if scenario.noise_enabled:
        w = np.linalg.cholesky(scenario.noise.Q) @ rng.standard_normal(2 * scenario.model.n)
        st = JointState.from_vector(st.vector + w)
    x, _ = forward_kinematics(st.q, scenario.model)
    mode = scenario.true_modes[scenario.true_mode_id(x)]
    y = observe(st, mode, scenario.model,
                noise=scenario.noise if scenario.noise_enabled else None, rng=rng)
    return st, y


def measure(state: JointState, scenario: Scenario, rng):
    x, _ = forward_kinematics(state.q, scenario.model)
    mode = scenario.true_modes[scenario.true_mode_id(x)]
    return observe(state, mode, scenario.model,
                   noise=scenario.noise if scenario.noise_enabled else None, rng=rng), mode.id


def simulate_episode(scenario: Scenario, config: PlannerConfig | None = None,
                     seed: int = 0) -> EpisodeLog:
    """Run the full closed loop; deterministic for a given seed."""
    config = config or PlannerConfig()
    rng_sim = np.random.default_rng([seed, 0xC0])
    rng_plan = np.random.default_rng([seed, 0x9E])
    ps = init_planner(scenario, rng_plan)
    log = EpisodeLog(scenario=scenario.name, n_modes=scenario.n_modes,
                     n_joints=scenario.model.n, m=scenario.model.m)
    sim_state = scenario.initial_state
    for k in range(scenario.episode_steps):
        y, true_mode = measure(sim_state, scenario, rng_sim)
        u, diag = plan_step(ps, y, scenario, rng_plan, config)
        x_true, _ = forward_kinematics(sim_state.q, scenario.model)
        force = float(np.linalg.norm(scenario.gains.K_imp * (x_true - u)))
        row = {"step": k, "time_s": k * scenario.dt, "true_mode": true_mode,
               "impedance_force_n": force, "mpc_iterations": diag["mpc_iterations"],
               "mpc_status": diag["mpc_status"], "plan_cost": diag["plan_cost"],
               "cem_time_s": diag["cem_time_s"], "mpc_time_s": diag["mpc_time_s"]}
        for z in range(scenario.n_modes):
            row[f"belief_{z}"] = float(diag["belief"][z])
        for i in range(scenario.model.n):
            row[f"q_{i}"] = float(sim_state.q[i])
            row[f"qd_{i}"] = float(sim_state.qd[i])
        for i in range(2 * scenario.model.n):
            row[f"y_{i}"] = float(y[i])
        for i in range(scenario.model.m):
            row[f"u_{i}"] = float(u[i])
        log.rows.append(row)
        if config.dump_filter is not None:
            ps.filter_rows.extend([[k] + r[1:] for r in _particle_rows(ps.belief)])
        sim_state, _ = true_step(sim_state, u, scenario, rng_sim)
    if config.dump_filter is not None:
        _write_filter_dump(config.dump_filter, ps.filter_rows, scenario)
    return log


def _particle_rows(belief: HybridBelief):
    return [[0, i, float(belief.weights[i]), int(belief.sampled_modes[i])]
            + [float(v) for v in belief.mus[i]]
            for i in range(belief.n_particles)]


def _write_filter_dump(path, rows, scenario: Scenario):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["contactplan-filter-v1"])
        writer.writerow(["step", "particle", "weight", "sampled_mode"]
                        + [f"mu_{i}" for i in range(2 * scenario.model.n)])
        for r in rows:
            writer.writerow([_fmt(v) for v in r])
