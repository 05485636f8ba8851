"""Belief-weighted multiple-shooting MPC and a primal-dual interior-point solver.

The planning problem couples one shared impedance-setpoint sequence u_{0:h-1}
with one state trajectory per plausible contact mode.  Continuity of each
mode's trajectory under its own dynamics is imposed element-wise as two-sided
inequalities |xi_{t+1} - f(xi_t, u_t, z)| <= rho, the virtual impedance force
is capped through a smooth squared-norm constraint, and actions live in a box.
The objective is the expectation of the per-mode stage costs under the
discrete-mode belief.

The solver is a line-search primal-dual interior-point method on the
slack-augmented KKT system: Newton steps on the condensed normal equations, a
fraction-to-boundary rule on slacks and multipliers, an l1 merit function with
backtracking, and a barrier parameter cut by 10x whenever the inner criterion
is met.  Hessians are Gauss-Newton (built from first derivatives only), which
is exact for the quadratic stage costs used here.  Dynamics sensitivities come
from ``dynamics_jacobians``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    ContactMode,
    ImpedanceGains,
    JointState,
    RobotModel,
    dynamics_jacobians,
    forward_kinematics,
    jacobian,
    step_xi,
)

_CS_H = 1e-100


# ---------------------------------------------------------------------------
# cost and constraint primitives (shared with the CEM)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostParams:
    """Quadratic stage-cost weights and per-mode tracking targets.

    ``targets[z]`` may contain NaN on axes that are omitted from the cost
    (the per-axis ignore mask).
    """

    Q_x: np.ndarray
    Q_u: np.ndarray
    Q_xd: np.ndarray
    targets: np.ndarray          # (n_modes, m), NaN = ignored axis

    def __post_init__(self):
        for name in ("Q_x", "Q_u", "Q_xd"):
            M = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, M)
            if not np.allclose(M, M.T, atol=1e-12) or np.any(np.linalg.eigvalsh(M) < -1e-12):
                raise ValueError(f"{name} must be symmetric PSD")
        object.__setattr__(self, "targets", np.asarray(self.targets, dtype=float))

    @property
    def mask(self) -> np.ndarray:
        """1.0 on tracked axes, 0.0 on ignored ones."""
        return np.where(np.isnan(self.targets), 0.0, 1.0)

    @property
    def targets_filled(self) -> np.ndarray:
        return np.nan_to_num(self.targets, nan=0.0)

    @staticmethod
    def diagonal(track_weight, setpoint_weight, velocity_weight, targets):
        track_weight = np.asarray(track_weight, dtype=float)
        return CostParams(Q_x=np.diag(track_weight),
                          Q_u=np.diag(np.asarray(setpoint_weight, dtype=float)),
                          Q_xd=np.diag(np.asarray(velocity_weight, dtype=float)),
                          targets=np.asarray(targets, dtype=float))


def _sqrt_psd(M):
    w, V = np.linalg.eigh(M)
    return V @ np.diag(np.sqrt(np.maximum(w, 0.0))) @ V.T


def stage_cost(state, u, z, cost: CostParams, model: RobotModel):
    """(x_d - x)' Q_x (x_d - x) + (u - x)' Q_u (u - x) + xd' Q_xd xd.

    Masked target axes contribute nothing to the tracking term.  Batched over
    leading axes of a stacked state.
    """
    xi = state.vector if isinstance(state, JointState) else np.asarray(state)
    n = model.n
    q, qd = xi[..., :n], xi[..., n:]
    x, _ = forward_kinematics(q, model)
    J = jacobian(q, model)
    xd = np.einsum("...dn,...n->...d", J, qd)
    dx = (cost.targets_filled[z] - x) * cost.mask[z]
    du = np.asarray(u) - x
    return (np.einsum("...d,de,...e->...", dx, cost.Q_x, dx)
            + np.einsum("...d,de,...e->...", du, cost.Q_u, du)
            + np.einsum("...d,de,...e->...", xd, cost.Q_xd, xd))


def force_constraint(q, u, gains: ImpedanceGains, F_max, model: RobotModel):
    """Smooth impedance-force cap: g = F_max^2 - |K_imp (x - u)|^2 >= 0.

    Squaring the norm keeps the constraint differentiable at zero deflection;
    g >= 0 holds iff |K_imp (x - u)| <= F_max.
    """
    x, _ = forward_kinematics(np.asarray(q), model)
    Kd = (x - np.asarray(u)) * gains.K_imp
    return F_max ** 2 - np.einsum("...d,...d->...", Kd, Kd)


def _force_constraint_grads(q, u, gains, model):
    """dg/dq and dg/du for the squared-norm force cap (batched)."""
    x, _ = forward_kinematics(q, model)
    J = jacobian(q, model)
    v = gains.K_imp ** 2 * (x - u)      # (..., m)
    dg_dq = -2.0 * np.einsum("...d,...dn->...n", v, J)
    dg_du = 2.0 * v
    return dg_dq, dg_du


def _xdot_jacobian(q, qd, model):
    """d(J(q) qd)/dq via complex step, batched."""
    n = model.n
    Q = np.repeat(q[..., None, :].astype(complex), n, axis=-2)
    ii = np.arange(n)
    Q[..., ii, ii] += 1j * _CS_H
    J = jacobian(Q, model)
    xd = np.einsum("...dn,...n->...d", J, qd[..., None, :])
    return (xd.imag / _CS_H).swapaxes(-1, -2)   # (..., m, n)


# ---------------------------------------------------------------------------
# problem transcription
# ---------------------------------------------------------------------------

@dataclass
class NlpParams:
    horizon: int
    dt: float
    u_lo: np.ndarray
    u_hi: np.ndarray
    F_max: float
    rho: float = 1e-6
    p_min: float = 1e-3

    def __post_init__(self):
        self.u_lo = np.asarray(self.u_lo, dtype=float)
        self.u_hi = np.asarray(self.u_hi, dtype=float)
        if np.any(self.u_lo >= self.u_hi):
            raise ValueError("action bounds must satisfy lo < hi")


@dataclass
class SolveStats:
    iterations: int
    wall_time: float
    cost: float
    kkt_residual: float
    max_violation: float
    status: str
    trace: list = field(default_factory=list)


@dataclass
class NlpSolution:
    U: np.ndarray                 # (h, d)
    states: dict                  # mode id -> (h, 2n)
    stats: SolveStats

    def shifted(self):
        """Receding-horizon shift: drop the first step, repeat the last."""
        U = np.vstack([self.U[1:], self.U[-1:]])
        states = {z: np.vstack([S[1:], S[-1:]]) for z, S in self.states.items()}
        return U, states


class NlpProblem:
    """One instance of the belief-weighted transcription, ready to solve."""

    def __init__(self, modes, belief, xi0, params: NlpParams, cost: CostParams,
                 model: RobotModel, gains: ImpedanceGains, w0):
        self.modes = list(modes)           # active modes only
        self.belief = np.asarray(belief, dtype=float)
        self.xi0 = np.asarray(xi0, dtype=float)    # (n_act, 2n)
        self.params = params
        self.cost = cost
        self.model = model
        self.gains = gains
        self.h = params.horizon
        self.d = model.m
        self.two_n = 2 * model.n
        self.n_act = len(self.modes)
        self.nu = self.h * self.d
        self.nxi = self.h * self.two_n
        self.nw = self.nu + self.n_act * self.nxi
        self.w0 = np.asarray(w0, dtype=float)
        if self.w0.shape != (self.nw,):
            raise ValueError("bad initial point size")
        self._sx = _sqrt_psd(cost.Q_x)
        self._su = _sqrt_psd(cost.Q_u)
        self._sxd = _sqrt_psd(cost.Q_xd)

    # -- layout ------------------------------------------------------------
    def unpack(self, w):
        U = w[: self.nu].reshape(self.h, self.d)
        XIs = [w[self.nu + k * self.nxi: self.nu + (k + 1) * self.nxi].reshape(self.h, self.two_n)
               for k in range(self.n_act)]
        return U, XIs

    def pack(self, U, XIs):
        return np.concatenate([np.ravel(U)] + [np.ravel(X) for X in XIs])

    @property
    def n_constraints(self):
        return self.n_act * (2 * self.nxi + self.h) + 2 * self.nu

    def counts(self):
        return {"variables": self.nw, "constraints": self.n_constraints,
                "actions": self.nu, "states_per_mode": self.nxi, "modes": self.n_act}

    def signed_row_basis(self):
        """Reduced multiplier basis for the least-squares dual estimate.

        Two-sided pairs (continuity upper/lower, box sides) have exactly
        opposite gradients, so one signed variable per pair spans them; force
        rows stand alone.  Returns (base row indices, paired row index or -1).
        """
        n_cont = self.n_act * self.nxi
        row_f = 2 * n_cont
        row_b = row_f + self.n_act * self.h
        base, paired = [], []
        for i in range(n_cont):                      # lower continuity rows
            base.append(n_cont + i)
            paired.append(i)
        for i in range(self.n_act * self.h):         # force rows, unpaired
            base.append(row_f + i)
            paired.append(-1)
        for i in range(self.nu):                     # (u - lo) rows
            base.append(row_b + i)
            paired.append(row_b + self.nu + i)
        return np.array(base), np.array(paired)

    def _stage_states(self, XI, k):
        """States paired with u_0..u_{h-1}: the pinned start plus xi_1..xi_{h-1}."""
        return np.vstack([self.xi0[k][None, :], XI[:-1]])

    # -- evaluations ---------------------------------------------------------
    def eval_fc(self, w):
        """Objective value and constraint vector only (used in line search)."""
        U, XIs = self.unpack(w)
        phi = 0.0
        cons = []
        cont_up, cont_lo, force = [], [], []
        for k, mode in enumerate(self.modes):
            prev = self._stage_states(XIs[k], k)
            nxt = step_xi(prev, mode, U, self.params.dt, self.model, self.gains)
            r = XIs[k] - nxt
            cont_up.append((self.params.rho - r).ravel())
            cont_lo.append((self.params.rho + r).ravel())
            force.append(force_constraint(prev[:, : self.model.n], U, self.gains,
                                          self.params.F_max, self.model))
            phi += self.belief[k] * float(
                np.sum(stage_cost(prev, U, mode.id, self.cost, self.model)))
        cons = np.concatenate(cont_up + cont_lo + force
                              + [(U - self.params.u_lo).ravel(), (self.params.u_hi - U).ravel()])
        return phi, cons

    def objective(self, w):
        return self.eval_fc(w)[0]

    def constraints(self, w):
        return self.eval_fc(w)[1]

    def _stage_residual_blocks(self, U, XIs):
        """Weighted residuals and their Jacobians per (mode, stage).

        Residual r = sqrt(belief) [Sx mask (x_d - x); Su (u - x); Sxd xd],
        differentiated wrt (xi_t, u_t).
        """
        m, n = self.model.m, self.model.n
        out = []
        for k, mode in enumerate(self.modes):
            prev = self._stage_states(XIs[k], k)
            q, qd = prev[:, :n], prev[:, n:]
            x, _ = forward_kinematics(q, self.model)
            J = jacobian(q, self.model)
            xd = np.einsum("tdn,tn->td", J, qd)
            dJqd = _xdot_jacobian(q, qd, self.model)
            mask = self.cost.mask[mode.id]
            tgt = self.cost.targets_filled[mode.id]
            wz = np.sqrt(self.belief[k])
            r = np.concatenate([
                (mask * (tgt - x)) @ self._sx.T,
                (U - x) @ self._su.T,
                xd @ self._sxd.T,
            ], axis=1) * wz                                    # (h, 3m)
            # jacobians wrt xi = (q, qd) and u
            Jr_xi = np.zeros((self.h, 3 * m, self.two_n))
            Jr_u = np.zeros((self.h, 3 * m, self.d))
            SxM = self._sx * mask[None, :]
            Jr_xi[:, :m, :n] = -wz * np.einsum("de,ten->tdn", SxM, J)
            Jr_xi[:, m:2 * m, :n] = -wz * np.einsum("de,ten->tdn", self._su, J)
            Jr_u[:, m:2 * m, :] = wz * self._su[None, :, :]
            Jr_xi[:, 2 * m:, :n] = wz * np.einsum("de,ten->tdn", self._sxd, dJqd)
            Jr_xi[:, 2 * m:, n:] = wz * np.einsum("de,ten->tdn", self._sxd, J)
            out.append((r, Jr_xi, Jr_u))
        return out

    def objective_terms(self, w):
        """phi, exact gradient, Gauss-Newton Hessian."""
        U, XIs = self.unpack(w)
        phi = 0.0
        grad = np.zeros(self.nw)
        H = np.zeros((self.nw, self.nw))
        blocks = self._stage_residual_blocks(U, XIs)
        for k in range(self.n_act):
            r, Jr_xi, Jr_u = blocks[k]
            phi += float(np.sum(r * r))
            for t in range(self.h):
                iu = slice(t * self.d, (t + 1) * self.d)
                gu = 2.0 * Jr_u[t].T @ r[t]
                grad[iu] += gu
                H[iu, iu] += 2.0 * Jr_u[t].T @ Jr_u[t]
                if t >= 1:
                    ix = slice(self.nu + k * self.nxi + (t - 1) * self.two_n,
                               self.nu + k * self.nxi + t * self.two_n)
                    grad[ix] += 2.0 * Jr_xi[t].T @ r[t]
                    H[ix, ix] += 2.0 * Jr_xi[t].T @ Jr_xi[t]
                    cross = 2.0 * Jr_xi[t].T @ Jr_u[t]
                    H[ix, iu] += cross
                    H[iu, ix] += cross.T
        return phi, grad, H

    def force_curvature(self, w, lam_force):
        """Gauss-Newton curvature of the force rows, weighted by multipliers.

        For g = F^2 - |K (x - u)|^2 the Lagrangian contribution -lam * d2g is
        approximately +2 lam B' K^2 B with B = [J, -I] (second FK derivatives
        dropped).  Continuity and bound rows contribute nothing, matching the
        first-derivative Hessian policy.
        """
        U, XIs = self.unpack(w)
        n = self.model.n
        Hc = np.zeros((self.nw, self.nw))
        K2 = self.gains.K_imp ** 2
        for k in range(self.n_act):
            prev = self._stage_states(XIs[k], k)
            J = jacobian(prev[:, :n], self.model)
            base = self.nu + k * self.nxi
            for t in range(self.h):
                lam_t = lam_force[k * self.h + t]
                if lam_t <= 0.0:
                    continue
                JtK2J = 2.0 * lam_t * np.einsum("dn,d,dm->nm", J[t], K2, J[t])
                JtK2 = 2.0 * lam_t * (J[t].T * K2)
                K2d = 2.0 * lam_t * np.diag(K2)
                iu = slice(t * self.d, (t + 1) * self.d)
                Hc[iu, iu] += K2d
                if t >= 1:
                    iq = slice(base + (t - 1) * self.two_n, base + (t - 1) * self.two_n + n)
                    Hc[iq, iq] += JtK2J
                    Hc[iq, iu] += -JtK2
                    Hc[iu, iq] += -JtK2.T
        return Hc

    def constraint_jac(self, w):
        U, XIs = self.unpack(w)
        nc = self.n_constraints
        A = np.zeros((nc, self.nw))
        n = self.model.n
        row_up = 0
        row_lo = self.n_act * self.nxi
        row_f = 2 * self.n_act * self.nxi
        for k, mode in enumerate(self.modes):
            prev = self._stage_states(XIs[k], k)
            Adyn, Bdyn = dynamics_jacobians(prev, mode, U, self.params.dt,
                                            self.model, self.gains)
            base = self.nu + k * self.nxi
            for t in range(self.h):
                rows_u = slice(row_up + t * self.two_n, row_up + (t + 1) * self.two_n)
                rows_l = slice(row_lo + t * self.two_n, row_lo + (t + 1) * self.two_n)
                # r = xi_{t+1} - f(xi_t, u_t): c_up = rho - r, c_lo = rho + r
                cols_next = slice(base + t * self.two_n, base + (t + 1) * self.two_n)
                I = np.eye(self.two_n)
                A[rows_u, cols_next] = -I
                A[rows_l, cols_next] = I
                iu = slice(t * self.d, (t + 1) * self.d)
                A[rows_u, iu] = Bdyn[t]
                A[rows_l, iu] = -Bdyn[t]
                if t >= 1:
                    cols_prev = slice(base + (t - 1) * self.two_n, base + t * self.two_n)
                    A[rows_u, cols_prev] = Adyn[t]
                    A[rows_l, cols_prev] = -Adyn[t]
            dg_dq, dg_du = _force_constraint_grads(prev[:, :n], U, self.gains, self.model)
            for t in range(self.h):
                row = row_f + k * self.h + t
                iu = slice(t * self.d, (t + 1) * self.d)
                A[row, iu] = dg_du[t]
                if t >= 1:
                    cols_prev = slice(base + (t - 1) * self.two_n, base + t * self.two_n)
                    A[row, cols_prev.start: cols_prev.start + n] = dg_dq[t]
            row_up += self.nxi
            row_lo += self.nxi
        row_b = 2 * self.n_act * self.nxi + self.n_act * self.h
        A[row_b: row_b + self.nu, : self.nu] = np.eye(self.nu)
        A[row_b + self.nu:, : self.nu] = -np.eye(self.nu)
        return A

    def solution_from(self, w, stats: SolveStats) -> NlpSolution:
        U, XIs = self.unpack(w)
        return NlpSolution(U=U.copy(),
                           states={mode.id: XIs[k].copy() for k, mode in enumerate(self.modes)},
                           stats=stats)


def build_nlp(belief, xi0_by_mode, modes, params: NlpParams, cost: CostParams,
              model: RobotModel, gains: ImpedanceGains,
              warmstart=None, prev_solution=None) -> NlpProblem:
    """Assemble the transcription for the modes whose belief clears p_min.

    Decision variables initialize from, in order of preference: a CEM result
    (best actions plus their per-mode rollouts), the shifted previous solution,
    or a hold at the current TCP position.
    """
    belief = np.asarray(belief, dtype=float)
    keep = [z for z in range(len(belief)) if belief[z] >= params.p_min]
    if not keep:
        raise ValueError("empty active mode set: no mode clears p_min")
    act_belief = belief[keep] / belief[keep].sum()
    act_modes = [modes[z] for z in keep]
    xi0 = np.asarray([xi0_by_mode[z] for z in keep], dtype=float)
    h, d = params.horizon, model.m

    U0 = None
    states0 = {}
    if warmstart is not None:
        U0 = np.clip(warmstart.best_actions.T, params.u_lo, params.u_hi)
        states0 = dict(warmstart.rollouts)
    elif prev_solution is not None:
        U_shift, states_shift = prev_solution.shifted()
        U0 = np.clip(U_shift, params.u_lo, params.u_hi)
        states0 = states_shift
    if U0 is None:
        q0 = xi0[np.argmax(act_belief)][: model.n]
        x_hold, _ = forward_kinematics(q0, model)
        U0 = np.clip(np.repeat(x_hold[None, :], h, axis=0), params.u_lo, params.u_hi)

    XIs = []
    for k, (z, mode) in enumerate(zip(keep, act_modes)):
        if z in states0 and states0[z].shape == (h, 2 * model.n):
            XIs.append(np.asarray(states0[z], dtype=float))
        else:
            # roll the initial actions out under this mode for a consistent start
            traj = np.empty((h, 2 * model.n))
            xi = xi0[k]
            for t in range(h):
                xi = step_xi(xi, mode, U0[t], params.dt, model, gains)
                traj[t] = xi
            XIs.append(traj)

    problem = NlpProblem(act_modes, act_belief, xi0, params, cost, model, gains,
                         w0=np.concatenate([U0.ravel()] + [X.ravel() for X in XIs]))
    return problem


# ---------------------------------------------------------------------------
# primal-dual interior-point solver
# ---------------------------------------------------------------------------

@dataclass
class SolveOptions:
    tol: float = 1e-8
    max_iter: int = 200
    mu0: float = 1e-2
    # cap the initial barrier at the tightest constraint band ("auto"): keeps
    # band multipliers O(1).  A float caps explicitly; None starts at mu0.
    mu_cap: object = "auto"
    trace: bool = False


def _kkt_error(grad, A, lam, c, s, mu):
    sd = max(1.0, float(np.sum(np.abs(lam))) / (100.0 * max(1, lam.size)))
    dual = float(np.linalg.norm(grad - A.T @ lam, np.inf)) / sd
    prim = float(np.linalg.norm(c - s, np.inf))
    comp = float(np.linalg.norm(s * lam - mu, np.inf)) / sd
    return max(dual, prim, comp)


def solve(problem: NlpProblem, opts: SolveOptions | None = None):
    """Solve the transcription; returns (u*, states per mode, SolveStats).

    Terminates at a scaled KKT residual below ``tol`` (status ``converged``),
    at the iteration cap, or when the merit line search stalls; the best
    iterate found is always returned.
    """
    opts = opts or SolveOptions()
    t_start = time.perf_counter()
    tau_fb = 0.995
    w = problem.w0.copy()
    # push action entries off the box boundary (standard interior start)
    push = 1e-3 * (problem.params.u_hi - problem.params.u_lo)
    U0, _ = problem.unpack(w)
    w[: problem.nu] = np.clip(U0, problem.params.u_lo + push,
                              problem.params.u_hi - push).ravel()
    phi, grad, H = problem.objective_terms(w)
    c = problem.constraints(w)
    A = problem.constraint_jac(w)
    nc = c.size

    s = np.where(c > 0.0, c, 1e-6)
    # dual estimate for warm points: at a KKT point multipliers live on the
    # active set, so fit grad by least squares over the small-slack rows of
    # the signed pair basis (negative halves map to the opposite pair side)
    base_rows, pair_rows = problem.signed_row_basis()
    has_pair = pair_rows >= 0
    s_min_pair = s[base_rows].copy()
    s_min_pair[has_pair] = np.minimum(s_min_pair[has_pair], s[pair_rows[has_pair]])
    active = s_min_pair <= max(1e-6, np.sqrt(opts.tol))
    lam_floor = 0.1 * opts.tol / np.maximum(s, 1.0)
    lam_ls = lam_floor.copy()
    if np.any(active):
        d_act, *_ = np.linalg.lstsq(A[base_rows[active]].T, grad, rcond=None)
        d_ls = np.zeros(base_rows.shape[0])
        d_ls[active] = d_act
        lam_ls[base_rows] = np.maximum(d_ls, lam_floor[base_rows])
        pr = pair_rows[has_pair]
        lam_ls[pr] = np.maximum(-d_ls[has_pair], lam_floor[pr])
        lam_ls = np.minimum(lam_ls, 1e8)
    E_warm = _kkt_error(grad, A, lam_ls, c, s, 0.0)
    if E_warm <= 1e3 * opts.tol:
        lam = lam_ls
        mu = max(opts.tol / 10.0, E_warm / 10.0)
    else:
        # starting the barrier far above the tightest constraint band inflates
        # its multipliers to mu0/rho and can stall the line search on curvature
        if opts.mu_cap == "auto":
            mu = min(opts.mu0, max(10.0 * opts.tol, problem.params.rho))
        elif opts.mu_cap is None:
            mu = opts.mu0
        else:
            mu = min(opts.mu0, float(opts.mu_cap))
        lam = np.minimum(mu / s, 1e8)

    nu_merit = 1.0
    best = (np.inf, w.copy(), phi, c)
    status = "max_iter"
    iters = 0
    trace: list = []
    mu_floor = opts.tol / 10.0

    for iters in range(1, opts.max_iter + 1):
        E0 = _kkt_error(grad, A, lam, c, s, 0.0)
        if E0 < best[0]:
            best = (E0, w.copy(), phi, c)
        if E0 <= opts.tol:
            status = "converged"
            iters -= 1
            break
        E_mu = _kkt_error(grad, A, lam, c, s, mu)
        while E_mu <= 10.0 * mu and mu > mu_floor:
            mu = max(0.1 * mu, mu_floor)
            E_mu = _kkt_error(grad, A, lam, c, s, mu)

        # Newton step on the symmetric augmented KKT system:
        #   [H + dI   -A^T ] [dw  ]   [-rd        ]
        #   [-A       -S/L ] [dlam] = [ rp + rc/L ]
        # then ds = A dw + rp.  LU plus one refinement pass copes with the
        # wide scale spread the tight continuity band induces.
        rd = grad - A.T @ lam
        rp = c - s
        rc = s * lam - mu
        nw = problem.nw
        i_force = slice(2 * problem.n_act * problem.nxi,
                        2 * problem.n_act * problem.nxi + problem.n_act * problem.h)
        H_lag = H + problem.force_curvature(w, lam[i_force])
        delta = 1e-11 * max(1.0, float(np.abs(H_lag.diagonal()).max()))
        dw = None
        for _ in range(10):
            KKT = np.zeros((nw + nc, nw + nc))
            KKT[:nw, :nw] = H_lag + delta * np.eye(nw)
            KKT[:nw, nw:] = -A.T
            KKT[nw:, :nw] = -A
            KKT[nw:, nw:] = -np.diag(s / lam + 1e-14)
            rhs = np.concatenate([-rd, rp + rc / lam])
            try:
                sol = np.linalg.solve(KKT, rhs)
                resid = rhs - KKT @ sol
                sol = sol + np.linalg.solve(KKT, resid)
            except np.linalg.LinAlgError:
                delta = max(delta * 100.0, 1e-10)
                continue
            if np.all(np.isfinite(sol)):
                dw = sol[:nw]
                dlam = sol[nw:]
                break
            delta = max(delta * 100.0, 1e-10)
        if dw is None:
            status = "line_search_failure"
            break
        ds = A @ dw + rp

        neg = ds < 0
        alpha_s = min(1.0, float(np.min(-tau_fb * s[neg] / ds[neg])) if np.any(neg) else 1.0)
        negl = dlam < 0
        alpha_lam = min(1.0, float(np.min(-tau_fb * lam[negl] / dlam[negl])) if np.any(negl) else 1.0)

        # one-sided l1 merit: charge only slack exceeding the constraint, so
        # harmless curvature of strictly interior rows never blocks a step
        nu_merit = max(nu_merit, 1.1 * float(np.abs(lam + dlam).max()) + 1.0)
        theta0 = float(np.maximum(-rp, 0.0).sum())     # sum of (s - c)+
        merit0 = phi - mu * float(np.log(s).sum()) + nu_merit * theta0
        dmerit = float(grad @ dw) - mu * float(np.sum(ds / s)) - nu_merit * theta0

        def try_point(w_try, s_try):
            phi_try, c_try = problem.eval_fc(w_try)
            # slack reset: strictly feasible rows carry their constraint value,
            # so interior curvature can never masquerade as infeasibility
            s_try = np.where(c_try > 0.0, c_try, s_try)
            if np.any(s_try <= 0.0):
                return None
            merit_try = phi_try - mu * float(np.log(s_try).sum()) \
                + nu_merit * float(np.maximum(s_try - c_try, 0.0).sum())
            return w_try, s_try, phi_try, c_try, merit_try

        alpha = alpha_s
        accepted = False
        soc_tried = False
        merit_slack = 1e-12 * max(1.0, abs(merit0))  # float noise near a solution
        for _ in range(40):
            trial = try_point(w + alpha * dw, s + alpha * ds)
            if trial is not None and np.isfinite(trial[4]) and \
                    trial[4] <= merit0 + 1e-4 * alpha * min(dmerit, 0.0) + merit_slack:
                accepted = True
                break
            if trial is not None and not soc_tried:
                # second-order correction: cancel the constraints' nonlinear
                # drift at the trial point with one extra KKT resolve
                soc_tried = True
                drift = trial[3] - (c + alpha * (A @ dw))
                sol_c = np.linalg.solve(KKT, np.concatenate([np.zeros(nw), drift]))
                dw_c = sol_c[:nw]
                ds_c = A @ dw_c
                trial_c = try_point(w + alpha * dw + dw_c, s + alpha * ds + ds_c)
                if trial_c is not None and np.isfinite(trial_c[4]) and \
                        trial_c[4] <= merit0 + 1e-4 * alpha * min(dmerit, 0.0) + merit_slack:
                    trial = trial_c
                    accepted = True
                    break
            alpha *= 0.5
            if alpha < 1e-14:
                break
        if not accepted:
            status = "line_search_failure"
            break
        w_try, s_try, phi_try, c_try, merit_try = trial

        w, s = w_try, s_try
        lam = lam + alpha_lam * dlam   # stays > 0 by the fraction-to-boundary rule
        phi = phi_try
        c = c_try
        _, grad, H = problem.objective_terms(w)
        A = problem.constraint_jac(w)
        if opts.trace:
            trace.append({"iter": iters, "mu": mu, "kkt": E0, "alpha": alpha,
                          "cost": phi, "merit": merit_try})

    E_final = _kkt_error(grad, A, lam, c, s, 0.0)
    if E_final < best[0]:
        best = (E_final, w.copy(), phi, c)
    if status != "converged" and best[0] <= opts.tol:
        status = "converged"
    E_best, w_best, phi_best, c_best = best
    viol = max(0.0, float(-np.min(c_best)))
    if status == "converged" and viol > opts.tol:
        status = "max_iter"
    stats = SolveStats(iterations=iters, wall_time=time.perf_counter() - t_start,
                       cost=phi_best, kkt_residual=E_best, max_violation=viol,
                       status=status, trace=trace)
    solution = problem.solution_from(w_best, stats)
    return solution.U, solution.states, stats
