"""Scenario definitions: JSON schema, validating loader, canned setups.

A scenario is one JSON document describing the robot, the ordered contact
mode set with geometric activation predicates, impedance gains, noise, cost
weights, constraint limits, and the estimator/CEM/solver settings used by the
closed loop.  Field names carry units.  The loader validates structure and
reports errors with the JSON path that caused them.

Mode predicates partition the workspace: the simulator picks the last mode in
the list whose conditions all hold (order the list general to specific; the
first mode must be unconditional).  Each condition constrains one TCP axis,
e.g. {"axis": 1, "max_m": 0.02} is true when TCP z <= 0.02.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .cem import CemParams
from .dynamics import ContactMode, ContactPoint, ImpedanceGains, JointState, NoiseModel, RobotModel
from .estimator import TransitionMatrix
from .nlp import CostParams, NlpParams, SolveOptions

SCHEMA = "contactplan-scenario-v1"


class ScenarioError(ValueError):
    """Scenario document failed validation; message carries the JSON path."""


def _need(doc, key, path, kind=None):
    if key not in doc:
        raise ScenarioError(f"{path}: missing required field '{key}'")
    val = doc[key]
    if kind is not None and not isinstance(val, kind):
        raise ScenarioError(f"{path}.{key}: expected {kind.__name__}, got {type(val).__name__}")
    return val


def _vector(doc, key, path, size=None, allow_null=False):
    raw = _need(doc, key, path, list)
    out = []
    for i, v in enumerate(raw):
        if v is None and allow_null:
            out.append(np.nan)
        elif isinstance(v, (int, float)):
            out.append(float(v))
        else:
            raise ScenarioError(f"{path}.{key}[{i}]: expected a number")
    if size is not None and len(out) != size:
        raise ScenarioError(f"{path}.{key}: expected {size} entries, got {len(out)}")
    return np.array(out)


@dataclass(frozen=True)
class ModePredicate:
    """Axis-aligned TCP box conditions; empty means always active."""

    conditions: tuple = ()

    def holds(self, x_tcp) -> bool:
        for cond in self.conditions:
            v = x_tcp[cond["axis"]]
            if "max_m" in cond and v > cond["max_m"]:
                return False
            if "min_m" in cond and v < cond["min_m"]:
                return False
        return True


@dataclass
class Scenario:
    name: str
    model: RobotModel
    gains: ImpedanceGains
    true_modes: list            # ContactMode, ground-truth contact parameters
    planner_modes: list         # ContactMode, possibly perturbed
    predicates: list            # ModePredicate per mode
    initial_state: JointState
    dt: float
    horizon: int
    episode_steps: int
    sim_substeps: int
    transition: TransitionMatrix
    noise: NoiseModel
    noise_enabled: bool
    cost: CostParams
    nlp_params: NlpParams
    cem_params: CemParams
    solve_options: SolveOptions
    n_particles: int
    init_state_std: np.ndarray
    mode_prior: np.ndarray
    ess_threshold: float | None = None

    @property
    def n_modes(self) -> int:
        return len(self.true_modes)

    def true_mode_id(self, x_tcp) -> int:
        """Last mode whose predicate holds: the workspace partition rule."""
        chosen = 0
        for i, pred in enumerate(self.predicates):
            if pred.holds(x_tcp):
                chosen = i
        return chosen

    def with_horizon(self, horizon: int) -> "Scenario":
        return replace(self, horizon=horizon,
                       nlp_params=replace(self.nlp_params, horizon=horizon),
                       cem_params=replace(self.cem_params, horizon=horizon))

    def with_contact_stiffness(self, stiffness: float) -> "Scenario":
        """Rescale every contact spring magnitude to the given stiffness."""

        def rescale(modes):
            out = []
            for mode in modes:
                cps = tuple(ContactPoint(K=cp.normal * stiffness, rest=cp.rest, attach=cp.attach)
                            for cp in mode.contacts)
                out.append(ContactMode(id=mode.id, label=mode.label, contacts=cps))
            return out

        return replace(self, true_modes=rescale(self.true_modes),
                       planner_modes=rescale(self.planner_modes))


def _parse_robot(doc, path):
    kind = _need(doc, "kind", path, str)
    damping = doc.get("viscous_damping", 0.5)
    gravity = doc.get("gravity_mps2")
    if kind == "point-mass":
        dim = int(_need(doc, "dim", path))
        g = np.zeros(dim) if gravity is None else np.asarray(gravity, dtype=float)
        return RobotModel.point_mass(mass=float(_need(doc, "mass_kg", path)), dim=dim,
                                     damping=float(damping), gravity=g)
    if kind == "planar-arm":
        lengths = _vector(doc, "link_lengths_m", path)
        masses = _vector(doc, "link_masses_kg", path, size=len(lengths))
        g = (0.0, -9.81) if gravity is None else gravity
        return RobotModel.planar_arm(link_lengths=lengths, link_masses=masses,
                                     damping=damping, gravity=g)
    raise ScenarioError(f"{path}.kind: unknown robot kind {kind!r}")


def _parse_modes(doc, m, path):
    modes, predicates = [], []
    for i, mdoc in enumerate(doc):
        mpath = f"{path}[{i}]"
        label = _need(mdoc, "label", mpath, str)
        cps = []
        for j, cdoc in enumerate(mdoc.get("contacts", [])):
            cpath = f"{mpath}.contacts[{j}]"
            cps.append(ContactPoint(
                K=_vector(cdoc, "stiffness_npm", cpath, size=m),
                rest=_vector(cdoc, "rest_m", cpath, size=m),
                attach=np.asarray(cdoc.get("attach_tcp_m", [0.0] * m), dtype=float)))
        conds = []
        for j, cond in enumerate(mdoc.get("active_when", [])):
            cpath = f"{mpath}.active_when[{j}]"
            axis = int(_need(cond, "axis", cpath))
            if axis < 0 or axis >= m:
                raise ScenarioError(f"{cpath}.axis: out of range for task dimension {m}")
            if "min_m" not in cond and "max_m" not in cond:
                raise ScenarioError(f"{cpath}: needs min_m or max_m")
            conds.append(dict(cond))
        modes.append(ContactMode(id=i, label=label, contacts=tuple(cps)))
        predicates.append(ModePredicate(conditions=tuple(conds)))
    if not modes:
        raise ScenarioError(f"{path}: need at least one mode")
    if predicates[0].conditions:
        raise ScenarioError(f"{path}[0]: the first mode must be unconditional (free space)")
    return modes, predicates


def _perturb_modes(modes, planner_doc, m):
    scale = float(planner_doc.get("stiffness_scale", 1.0))
    offset = np.asarray(planner_doc.get("rest_offset_m", [0.0] * m), dtype=float)
    out = []
    for mode in modes:
        cps = tuple(ContactPoint(K=cp.K * scale, rest=cp.rest + offset, attach=cp.attach)
                    for cp in mode.contacts)
        out.append(ContactMode(id=mode.id, label=mode.label, contacts=cps))
    return out


def scenario_from_dict(doc, name="scenario") -> Scenario:
    if _need(doc, "schema", name, str) != SCHEMA:
        raise ScenarioError(f"{name}.schema: expected {SCHEMA!r}, got {doc['schema']!r}")
    model = _parse_robot(_need(doc, "robot", name, dict), f"{name}.robot")
    m, n = model.m, model.n

    imp = _need(doc, "impedance", name, dict)
    gains = ImpedanceGains(K_imp=_vector(imp, "stiffness_npm", f"{name}.impedance", size=m),
                           D_imp=_vector(imp, "damping_nspm", f"{name}.impedance", size=m))

    true_modes, predicates = _parse_modes(_need(doc, "modes", name, list), m, f"{name}.modes")
    planner_modes = _perturb_modes(true_modes, doc.get("planner_model", {}), m)

    st = _need(doc, "initial_state", name, dict)
    state0 = JointState(_vector(st, "q", f"{name}.initial_state", size=n),
                        _vector(st, "qd", f"{name}.initial_state", size=n))

    tim = _need(doc, "timing", name, dict)
    dt = float(_need(tim, "dt_s", f"{name}.timing"))
    horizon = int(_need(tim, "horizon_steps", f"{name}.timing"))
    episode_steps = int(tim.get("episode_steps", 100))
    substeps = int(tim.get("sim_substeps", 1))
    if dt <= 0 or horizon < 1 or substeps < 1:
        raise ScenarioError(f"{name}.timing: dt_s > 0, horizon_steps >= 1, sim_substeps >= 1")

    T = TransitionMatrix(np.asarray(_need(doc, "transition_matrix", name, list), dtype=float))
    if T.n_modes != len(true_modes):
        raise ScenarioError(f"{name}.transition_matrix: size must match the mode count")

    nz = _need(doc, "noise", name, dict)
    noise = NoiseModel.diagonal(_vector(nz, "process_std", f"{name}.noise", size=2 * n),
                                _vector(nz, "measurement_std", f"{name}.noise", size=2 * n))
    noise_enabled = bool(nz.get("enabled", True))

    cdoc = _need(doc, "cost", name, dict)
    targets_raw = _need(cdoc, "targets_m", f"{name}.cost", list)
    if len(targets_raw) != len(true_modes):
        raise ScenarioError(f"{name}.cost.targets_m: one target per mode required")
    targets = np.vstack([_vector({"t": t}, "t", f"{name}.cost.targets_m[{i}]", size=m, allow_null=True)
                         for i, t in enumerate(targets_raw)])
    cost = CostParams.diagonal(_vector(cdoc, "tracking_weight", f"{name}.cost", size=m),
                               _vector(cdoc, "setpoint_weight", f"{name}.cost", size=m),
                               _vector(cdoc, "velocity_weight", f"{name}.cost", size=m),
                               targets)

    con = _need(doc, "constraints", name, dict)
    nlp_params = NlpParams(
        horizon=horizon, dt=dt,
        u_lo=_vector(con, "action_low_m", f"{name}.constraints", size=m),
        u_hi=_vector(con, "action_high_m", f"{name}.constraints", size=m),
        F_max=float(_need(con, "max_impedance_force_n", f"{name}.constraints")),
        rho=float(con.get("continuity_slack", 1e-6)),
        p_min=float(con.get("belief_min", 1e-3)))

    est = _need(doc, "estimator", name, dict)
    n_particles = int(_need(est, "n_particles", f"{name}.estimator"))
    init_std = _vector(est, "init_state_std", f"{name}.estimator", size=2 * n)
    mode_prior = _vector(est, "mode_prior", f"{name}.estimator", size=len(true_modes))
    ess = est.get("ess_threshold")

    cem_doc = _need(doc, "cem", name, dict)
    cem_params = CemParams(
        n_samples=int(_need(cem_doc, "n_samples", f"{name}.cem")),
        n_iter=int(_need(cem_doc, "n_iter", f"{name}.cem")),
        elite=int(_need(cem_doc, "elite", f"{name}.cem")),
        horizon=horizon,
        beta=float(_need(cem_doc, "beta", f"{name}.cem")),
        u_lo=nlp_params.u_lo, u_hi=nlp_params.u_hi)

    sdoc = doc.get("solver", {})
    mu_cap = sdoc.get("mu_cap", "auto")
    solve_options = SolveOptions(tol=float(sdoc.get("tol", 1e-8)),
                                 max_iter=int(sdoc.get("max_iter", 200)),
                                 mu0=float(sdoc.get("mu0", 1e-2)),
                                 mu_cap=mu_cap if mu_cap in ("auto", None) else float(mu_cap))

    return Scenario(name=doc.get("name", name), model=model, gains=gains,
                    true_modes=true_modes, planner_modes=planner_modes,
                    predicates=predicates, initial_state=state0, dt=dt,
                    horizon=horizon, episode_steps=episode_steps,
                    sim_substeps=substeps, transition=T, noise=noise,
                    noise_enabled=noise_enabled, cost=cost, nlp_params=nlp_params,
                    cem_params=cem_params, solve_options=solve_options,
                    n_particles=n_particles, init_state_std=init_std,
                    mode_prior=mode_prior, ess_threshold=ess)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
    return scenario_from_dict(doc, name=str(path))


def builtin_scenario_path(name: str):
    """Filesystem path of a scenario shipped with the package."""
    ref = resources.files("contactplan") / "scenarios" / f"{name}.json"
    if not ref.is_file():
        raise ScenarioError(f"no builtin scenario named {name!r}")
    return ref


def load_builtin(name: str) -> Scenario:
    with resources.files("contactplan").joinpath(f"scenarios/{name}.json").open() as fh:
        return scenario_from_dict(json.load(fh), name=name)
