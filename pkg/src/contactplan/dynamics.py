"""Robot dynamics with switched stiffness contacts under Cartesian impedance control.

Two robot kinds are supported: a planar serial arm (n revolute joints, 2-D
task space) and a point mass (joint space == task space), the latter mostly
useful as an analytically checkable stand-in.  The environment is modeled as
sets of 1-DOF linear springs; a discrete contact mode selects which springs
act.  Springs are bilateral: engagement and release are represented purely by
mode switching, which keeps every mode's dynamics smooth.

All core functions broadcast over leading batch axes and are safe to evaluate
with complex inputs, which is how the exact linearizations in
``dynamics_jacobians`` are obtained (complex-step differentiation, a
forward-mode AD equivalent with no subtractive cancellation).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

POINT_MASS = "point-mass"
PLANAR_ARM = "planar-arm"

# Complex-step size. Far below sqrt(eps) is fine: no cancellation occurs.
_CS_H = 1e-100


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RobotModel:
    """Kinematic/dynamic description of the robot.

    ``link_masses`` are point masses at the link tips (planar arm) or the
    translating mass per axis (point mass).  ``rotor_inertia`` adds a constant
    diagonal to the mass matrix so it stays positive definite in folded
    configurations.
    """

    kind: str
    link_lengths: np.ndarray
    link_masses: np.ndarray
    damping: np.ndarray          # diagonal of B, (n,)
    gravity: np.ndarray          # (m,)
    m: int
    rotor_inertia: np.ndarray = field(default=None)  # (n,), planar arm only

    def __post_init__(self):
        object.__setattr__(self, "link_lengths", np.asarray(self.link_lengths, dtype=float))
        object.__setattr__(self, "link_masses", np.asarray(self.link_masses, dtype=float))
        object.__setattr__(self, "damping", np.asarray(self.damping, dtype=float))
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))
        if self.kind not in (POINT_MASS, PLANAR_ARM):
            raise ValueError(f"unknown robot kind {self.kind!r}")
        n = self.link_lengths.shape[0]
        if n < 1:
            raise ValueError("need at least one joint")
        if self.kind == PLANAR_ARM and self.m != 2:
            raise ValueError("planar arm task space is 2-D")
        if self.kind == POINT_MASS and self.m != n:
            raise ValueError("point mass requires n == m")
        if self.m not in (1, 2, 3):
            raise ValueError("task dimension must be 1, 2 or 3")
        if np.any(self.link_lengths <= 0) or np.any(self.link_masses <= 0):
            raise ValueError("link lengths and masses must be positive")
        if self.link_masses.shape[0] != n or self.damping.shape[0] != n:
            raise ValueError("inconsistent joint counts")
        if self.gravity.shape[0] != self.m:
            raise ValueError("gravity vector must live in task space")
        if self.rotor_inertia is None:
            rot = 0.05 * self.link_masses * self.link_lengths ** 2 if self.kind == PLANAR_ARM else np.zeros(n)
            object.__setattr__(self, "rotor_inertia", rot)
        else:
            object.__setattr__(self, "rotor_inertia", np.asarray(self.rotor_inertia, dtype=float))

    @property
    def n(self) -> int:
        return self.link_lengths.shape[0]

    @staticmethod
    def point_mass(mass=1.0, dim=2, damping=0.0, gravity=None):
        g = np.zeros(dim) if gravity is None else np.asarray(gravity, dtype=float)
        return RobotModel(
            kind=POINT_MASS,
            link_lengths=np.ones(dim),
            link_masses=np.full(dim, float(mass)),
            damping=np.full(dim, float(damping)),
            gravity=g,
            m=dim,
        )

    @staticmethod
    def planar_arm(link_lengths=(1.0, 1.0, 1.0), link_masses=None, damping=0.5, gravity=(0.0, -9.81)):
        lengths = np.asarray(link_lengths, dtype=float)
        masses = np.ones_like(lengths) if link_masses is None else np.asarray(link_masses, dtype=float)
        damp = np.full(lengths.shape[0], float(damping)) if np.isscalar(damping) else np.asarray(damping, dtype=float)
        return RobotModel(
            kind=PLANAR_ARM,
            link_lengths=lengths,
            link_masses=masses,
            damping=damp,
            gravity=np.asarray(gravity, dtype=float),
            m=2,
        )


@dataclass
class JointState:
    """Continuous robot state (q, qd)."""

    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        self.q = np.atleast_1d(np.asarray(self.q, dtype=float))
        self.qd = np.atleast_1d(np.asarray(self.qd, dtype=float))
        if self.q.shape != self.qd.shape:
            raise ValueError("q and qd must match")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qd))):
            raise ValueError("state entries must be finite")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qd])

    @staticmethod
    def from_vector(xi: np.ndarray) -> "JointState":
        xi = np.asarray(xi, dtype=float)
        n = xi.shape[-1] // 2
        return JointState(xi[..., :n], xi[..., n:])


@dataclass(frozen=True)
class ContactPoint:
    """1-DOF stiffness contact: spring along n = K/|K| with rest pose in world frame."""

    K: np.ndarray       # stiffness vector, N/m; direction is the contact normal
    rest: np.ndarray    # rest pose in world frame, m
    attach: np.ndarray  # attachment point in TCP frame, m

    def __post_init__(self):
        object.__setattr__(self, "K", np.asarray(self.K, dtype=float))
        object.__setattr__(self, "rest", np.asarray(self.rest, dtype=float))
        object.__setattr__(self, "attach", np.asarray(self.attach, dtype=float))
        if np.linalg.norm(self.K) <= 0.0:
            raise ValueError("contact stiffness vector must be nonzero")

    @property
    def normal(self) -> np.ndarray:
        return self.K / np.linalg.norm(self.K)

    @property
    def stiffness(self) -> float:
        return float(np.linalg.norm(self.K))


@dataclass(frozen=True)
class ContactMode:
    """Discrete mode: a (possibly empty) set of active stiffness contacts."""

    id: int
    label: str
    contacts: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "contacts", tuple(self.contacts))
        if self.id < 0:
            raise ValueError("mode ids are non-negative")


def validate_mode_set(modes) -> None:
    ids = [m.id for m in modes]
    if ids != list(range(len(modes))):
        raise ValueError(f"mode ids must be contiguous from 0, got {ids}")


@dataclass(frozen=True)
class ImpedanceGains:
    """Diagonal Cartesian impedance stiffness/damping."""

    K_imp: np.ndarray  # (m,), N/m
    D_imp: np.ndarray  # (m,), N s/m

    def __post_init__(self):
        object.__setattr__(self, "K_imp", np.asarray(self.K_imp, dtype=float))
        object.__setattr__(self, "D_imp", np.asarray(self.D_imp, dtype=float))
        if np.any(self.K_imp < 0) or np.any(self.D_imp < 0):
            raise ValueError("impedance gains must be non-negative")
        if not np.any(self.K_imp > 0):
            raise ValueError("need at least one stiff impedance axis")


@dataclass(frozen=True)
class NoiseModel:
    """Process covariance Q (on xi) and measurement covariance R_y (on [q; tau_e])."""

    Q: np.ndarray
    R_y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "R_y", np.asarray(self.R_y, dtype=float))
        for name, mat in (("Q", self.Q), ("R_y", self.R_y)):
            if not np.allclose(mat, mat.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
        if np.any(np.linalg.eigvalsh(self.Q) < -1e-12):
            raise ValueError("Q must be PSD")
        if np.any(np.linalg.eigvalsh(self.R_y) <= 0):
            raise ValueError("R_y must be positive definite")

    @staticmethod
    def diagonal(process_std, measurement_std):
        p = np.asarray(process_std, dtype=float)
        r = np.asarray(measurement_std, dtype=float)
        return NoiseModel(Q=np.diag(p ** 2), R_y=np.diag(r ** 2))


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------

def _arm_chain(q, model):
    """Per-link tip terms for the planar arm.

    Returns cumulative angles s (..., n) and the cumulative tangent sums
    C (..., n, 2) with C[..., k, :] = sum_{j<=k} L_j (-sin s_j, cos s_j).
    """
    s = np.cumsum(q, axis=-1)
    L = model.link_lengths
    tang = np.stack([-np.sin(s), np.cos(s)], axis=-1) * L[..., :, None]
    return s, np.cumsum(tang, axis=-2)


def forward_kinematics(q, model):
    """TCP world position x(q) and orientation R(q).

    Point mass: x = q, R = I.  Planar arm: tip of the last link, R the
    rotation by the summed joint angle.
    """
    q = np.asarray(q)
    if q.shape[-1] != model.n:
        raise ValueError(f"expected {model.n} joints, got {q.shape[-1]}")
    if model.kind == POINT_MASS:
        eye = np.eye(model.m, dtype=q.dtype)
        return q, np.broadcast_to(eye, q.shape[:-1] + (model.m, model.m))
    s = np.cumsum(q, axis=-1)
    L = model.link_lengths
    x = np.stack([(L * np.cos(s)).sum(axis=-1), (L * np.sin(s)).sum(axis=-1)], axis=-1)
    c, sn = np.cos(s[..., -1]), np.sin(s[..., -1])
    R = np.stack([np.stack([c, -sn], axis=-1), np.stack([sn, c], axis=-1)], axis=-2)
    return x, R


def jacobian(q, model, attach=None):
    """Analytic task Jacobian d(R(q) attach + x(q))/dq, shape (..., m, n).

    ``attach`` (TCP-frame offset) defaults to the TCP origin.
    """
    q = np.asarray(q)
    if q.shape[-1] != model.n:
        raise ValueError(f"expected {model.n} joints, got {q.shape[-1]}")
    if model.kind == POINT_MASS:
        eye = np.eye(model.m, dtype=q.dtype)
        return np.broadcast_to(eye, q.shape[:-1] + (model.m, model.m)).copy()
    s, C = _arm_chain(q, model)
    total = C[..., -1, :]
    # column i: sum_{j>=i} L_j e'(s_j) = C_{n-1} - C_{i-1}
    Cprev = np.concatenate([np.zeros_like(C[..., :1, :]), C[..., :-1, :]], axis=-2)
    J = (total[..., None, :] - Cprev).swapaxes(-1, -2)  # (..., 2, n)
    if attach is not None:
        attach = np.asarray(attach)
        th = s[..., -1]
        c, sn = np.cos(th), np.sin(th)
        dR = np.stack([np.stack([-sn, -c], axis=-1), np.stack([c, -sn], axis=-1)], axis=-2)
        J = J + dR @ attach[..., :, None]  # same extra column for every joint
    return J


def _arm_link_jacobians(q, model):
    """Stacked tip Jacobians J_k, shape (..., n, 2, n)."""
    _, C = _arm_chain(q, model)
    n = model.n
    Cprev = np.concatenate([np.zeros_like(C[..., :1, :]), C[..., :-1, :]], axis=-2)
    # Jks[..., k, :, i] = (C_k - C_{i-1}) for i <= k else 0
    diff = C[..., :, None, :] - Cprev[..., None, :, :]          # (..., k, i, 2)
    mask = (np.arange(n)[:, None] >= np.arange(n)[None, :])     # k >= i
    Jks = np.where(mask[..., :, :, None], diff, np.zeros_like(diff))
    return Jks.swapaxes(-1, -2)                                  # (..., k, 2, i)


def mass_matrix(q, model):
    """Joint-space inertia M(q), symmetric positive definite."""
    q = np.asarray(q)
    if model.kind == POINT_MASS:
        M = np.diag(model.link_masses).astype(q.dtype, copy=False)
        return np.broadcast_to(M, q.shape[:-1] + M.shape).copy()
    Jks = _arm_link_jacobians(q, model)
    M = np.einsum("...kdi,...kdj,k->...ij", Jks, Jks, model.link_masses)
    idx = np.arange(model.n)
    M[..., idx, idx] += model.rotor_inertia
    return M


def _arm_mass_matrix_grad(q, model):
    """dM/dq_l, shape (..., n, n, n) indexed [l, i, j].  Closed form."""
    s = np.cumsum(q, axis=-1)
    L = model.link_lengths
    n = model.n
    tang = np.stack([-np.sin(s), np.cos(s)], axis=-1) * L[..., :, None]
    curv = np.stack([-np.cos(s), -np.sin(s)], axis=-1) * L[..., :, None]
    C = np.cumsum(tang, axis=-2)
    D = np.cumsum(curv, axis=-2)
    Cprev = np.concatenate([np.zeros_like(C[..., :1, :]), C[..., :-1, :]], axis=-2)
    Dprev = np.concatenate([np.zeros_like(D[..., :1, :]), D[..., :-1, :]], axis=-2)
    # J_k[:, i] = C_k - C_{i-1} (i <= k); dJ_k[:, i]/dq_l = D_k - D_{max(i,l)-1} (max(i,l) <= k)
    ki = np.arange(n)
    Jks = np.where((ki[:, None] >= ki[None, :])[..., None],
                   C[..., :, None, :] - Cprev[..., None, :, :], 0.0)      # (..., k, i, 2)
    mx = np.maximum(ki[:, None], ki[None, :])                              # (i, l)
    dJ = D[..., :, None, None, :] - Dprev[..., None, mx, :]                # (..., k, i, l, 2)
    dJ = np.where((ki[:, None, None] >= mx[None, :, :])[..., None], dJ, 0.0)
    mk = model.link_masses
    # dM_ij/dq_l = sum_k m_k (dJ_k[:,i,l] . J_k[:,j] + J_k[:,i] . dJ_k[:,j,l])
    t = np.einsum("...kild,...kjd,k->...lij", dJ, Jks, mk)
    return t + t.swapaxes(-1, -2)


def gravity_torque(q, model):
    """G(q) with the convention M qdd + C + B qd + G = tau."""
    q = np.asarray(q)
    if model.kind == POINT_MASS:
        G = -(model.link_masses * model.gravity).astype(q.dtype, copy=False)
        return np.broadcast_to(G, q.shape).copy()
    Jks = _arm_link_jacobians(q, model)
    return -np.einsum("...kdi,k,d->...i", Jks, model.link_masses, model.gravity)


def coriolis_torque(q, qd, model):
    """Coriolis/centrifugal torque vector C(q, qd) from Christoffel symbols."""
    q = np.asarray(q)
    qd = np.asarray(qd)
    if model.kind == POINT_MASS:
        return np.zeros_like(qd)
    dM = _arm_mass_matrix_grad(q, model)  # [l, i, j]
    # c_i = sum_{j,l} 0.5 (dM_ij/dq_l + dM_il/dq_j - dM_jl/dq_i) qd_j qd_l
    term = dM.swapaxes(-3, -2) + dM.transpose(*range(dM.ndim - 3), -1, -2, -3) - dM
    return 0.5 * np.einsum("...ijl,...j,...l->...i", term, qd, qd)


# ---------------------------------------------------------------------------
# forces and torques
# ---------------------------------------------------------------------------

def contact_force(q, cp: ContactPoint, model):
    """World-frame spring force of one contact at configuration q.

    Scalar load f = K^T (rest - (R attach + x)); returned as f * n with
    n = K/|K| so that J^T F is the induced joint torque.
    """
    x, R = forward_kinematics(q, model)
    world_pt = (R @ cp.attach[..., :, None])[..., 0] + x
    f = np.einsum("d,...d->...", cp.K, cp.rest - world_pt)
    return f[..., None] * (cp.normal.astype(world_pt.dtype, copy=False))


def external_torque(q, mode: ContactMode, model):
    """Total contact joint torque tau_e = sum_i J_i^T F_i for the mode."""
    q = np.asarray(q)
    tau = np.zeros(q.shape, dtype=q.dtype)
    for cp in mode.contacts:
        F = contact_force(q, cp, model)
        J = jacobian(q, model, attach=cp.attach if np.any(cp.attach) else None)
        tau = tau + np.einsum("...dn,...d->...n", J, F)
    return tau


def impedance_torque(state: JointState, x0, gains: ImpedanceGains, model):
    """Cartesian impedance control torque with gravity/Coriolis compensation.

    tau_m = J^T (-D xd - K (x - x0)) + G(q) + C(q, qd), negative feedback.
    """
    return _impedance_task_torque(state.q, state.qd, np.asarray(x0, dtype=float), gains, model) \
        + gravity_torque(state.q, model) + coriolis_torque(state.q, state.qd, model)


def _impedance_task_torque(q, qd, x0, gains, model):
    """J^T (-D xd - K (x - x0)), without the compensation terms."""
    x, _ = forward_kinematics(q, model)
    J = jacobian(q, model)
    xd = np.einsum("...dn,...n->...d", J, qd)
    F = -gains.D_imp * xd - gains.K_imp * (x - x0)
    return np.einsum("...dn,...d->...n", J, F)


# ---------------------------------------------------------------------------
# integration and observation
# ---------------------------------------------------------------------------

def step_xi(xi, mode, x0, dt, model, gains):
    """Semi-implicit Euler step on stacked states xi = [q; qd], batched.

    Contact and impedance torques are explicit (evaluated at the previous
    state); only the viscous joint damping is implicit:
        (M + dt B) qd' = M qd + dt (tau_task + tau_e)
        q' = q + dt qd'
    The gravity/Coriolis compensation inside the impedance law cancels the
    plant's G and C exactly, so neither appears here.
    """
    return _step_xi_task(xi, mode, x0, dt, model, gains)[0]


def _step_xi_task(xi, mode, x0, dt, model, gains):
    """Step plus the TCP position/velocity at the pre-step state.

    The planar-arm branch computes the kinematic chain once and shares it
    between the impedance force, contact torques and mass matrix; rollout
    loops reuse the returned (x, xd) for their stage costs (hot path).
    """
    xi = np.asarray(xi)
    n = model.n
    if xi.shape[-1] != 2 * n:
        raise ValueError(f"state dimension {xi.shape[-1]} != 2n = {2 * n}")
    q, qd = xi[..., :n], xi[..., n:]
    x0 = np.asarray(x0)
    idx = np.arange(n)

    if model.kind == POINT_MASS:
        xd = qd
        F = -gains.D_imp * xd - gains.K_imp * (q - x0)
        tau = F
        for cp in mode.contacts:
            defl = np.einsum("d,...d->...", cp.K, cp.rest - q)
            tau = tau + defl[..., None] * (cp.K / np.linalg.norm(cp.K))
        mass = model.link_masses
        qd_new = (mass * qd + dt * tau) / (mass + dt * model.damping)
        return np.concatenate([q + dt * qd_new, qd_new], axis=-1), q, xd

    L = model.link_lengths
    s = np.cumsum(q, axis=-1)
    cs, sn = np.cos(s), np.sin(s)
    x = np.stack([(L * cs).sum(axis=-1), (L * sn).sum(axis=-1)], axis=-1)
    tang = np.stack([-sn, cs], axis=-1) * L[:, None]
    C = np.cumsum(tang, axis=-2)
    Cprev = np.concatenate([np.zeros_like(C[..., :1, :]), C[..., :-1, :]], axis=-2)
    J = (C[..., -1, :][..., None, :] - Cprev).swapaxes(-1, -2)   # (..., 2, n)

    xd = np.einsum("...dn,...n->...d", J, qd)
    F = -gains.D_imp * xd - gains.K_imp * (x - x0)
    tau = np.einsum("...dn,...d->...n", J, F)
    for cp in mode.contacts:
        if np.any(cp.attach):
            th = s[..., -1]
            c2, s2 = np.cos(th), np.sin(th)
            R = np.stack([np.stack([c2, -s2], axis=-1), np.stack([s2, c2], axis=-1)], axis=-2)
            world = (R @ cp.attach[:, None])[..., 0] + x
            dR = np.stack([np.stack([-s2, -c2], axis=-1), np.stack([c2, -s2], axis=-1)], axis=-2)
            Jc = J + dR @ cp.attach[:, None]
        else:
            world = x
            Jc = J
        f = np.einsum("d,...d->...", cp.K, cp.rest - world)
        tau = tau + np.einsum("...dn,...d->...n", Jc, f[..., None] * (cp.K / np.linalg.norm(cp.K)))

    diff = C[..., :, None, :] - Cprev[..., None, :, :]
    mask = idx[:, None] >= idx[None, :]
    Jks = np.where(mask[..., :, :, None], diff, np.zeros_like(diff)).swapaxes(-1, -2)
    M = np.einsum("...kdi,...kdj,k->...ij", Jks, Jks, model.link_masses)
    M[..., idx, idx] += model.rotor_inertia
    lhs = M.copy()
    lhs[..., idx, idx] += dt * model.damping
    rhs = np.einsum("...ij,...j->...i", M, qd) + dt * tau
    qd_new = np.linalg.solve(lhs, rhs[..., :, None])[..., 0]
    return np.concatenate([q + dt * qd_new, qd_new], axis=-1), x, xd


def step(state: JointState, mode: ContactMode, x0, dt, model, gains) -> JointState:
    """Advance one control step of the impedance-controlled hybrid dynamics."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    xi = step_xi(state.vector, mode, np.asarray(x0, dtype=float), dt, model, gains)
    return JointState.from_vector(xi)


def observe(state: JointState, mode: ContactMode, model, noise: NoiseModel | None = None, rng=None):
    """Measurement y = [q; tau_e(q, mode)], optionally with Gaussian noise."""
    y = np.concatenate([state.q, external_torque(state.q, mode, model)])
    if noise is not None:
        if rng is None:
            raise ValueError("need an rng to draw measurement noise")
        y = y + np.linalg.cholesky(noise.R_y) @ rng.standard_normal(y.shape[0])
    return y


def dynamics_jacobians(state, mode, x0, dt, model, gains):
    """Exact linearization of ``step``: A = df/dxi, B_u = df/dx0.

    Complex-step differentiation over the step computation graph; agrees with
    central finite differences to ~machine precision.  Accepts a JointState or
    a batched xi array (..., 2n); returns (..., 2n, 2n) and (..., 2n, m).
    """
    xi = state.vector if isinstance(state, JointState) else np.asarray(state, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    two_n, m = 2 * model.n, model.m
    nin = two_n + m
    XI = np.repeat(xi[..., None, :].astype(complex), nin, axis=-2)
    X0 = np.repeat(np.broadcast_to(x0, xi.shape[:-1] + (m,))[..., None, :].astype(complex), nin, axis=-2)
    ii = np.arange(two_n)
    XI[..., ii, ii] += 1j * _CS_H
    jj = np.arange(m)
    X0[..., two_n + jj, jj] += 1j * _CS_H
    out = step_xi(XI, mode, X0, dt, model, gains)      # (..., nin, 2n)
    D = out.imag / _CS_H
    A = D[..., :two_n, :].swapaxes(-1, -2)
    B = D[..., two_n:, :].swapaxes(-1, -2)
    return A, B


def observation_jacobian(state, mode, model):
    """C_z = d[q; tau_e]/dxi: top block [I 0], bottom [d tau_e/dq, 0]."""
    xi = state.vector if isinstance(state, JointState) else np.asarray(state, dtype=float)
    n = model.n
    q = xi[..., :n]
    Q = np.repeat(q[..., None, :].astype(complex), n, axis=-2)
    ii = np.arange(n)
    Q[..., ii, ii] += 1j * _CS_H
    dtau = external_torque(Q, mode, model).imag / _CS_H   # (..., n_in, n_out)
    C = np.zeros(xi.shape[:-1] + (2 * n, 2 * n))
    C[..., :n, :n] = np.eye(n)
    C[..., n:, :n] = dtau.swapaxes(-1, -2)
    return C


# ---------------------------------------------------------------------------
# contact parameter identification
# ---------------------------------------------------------------------------

@dataclass
class CalibrationResult:
    contacts: list
    residual: float
    converged: bool
    identifiable: bool
    iterations: int


def _stacked_torque_residual(theta, qs, taus, n_contacts, model, m, with_attach=False):
    """Residual tau_meas - tau_e(q; theta), theta = [K_1, rest_1, (attach_1,) ...]."""
    ppc = (3 if with_attach else 2) * m
    pred = np.zeros(taus.shape, dtype=theta.dtype)
    x, R = forward_kinematics(qs, model)
    for i in range(n_contacts):
        K = theta[ppc * i: ppc * i + m]
        rest = theta[ppc * i + m: ppc * i + 2 * m]
        Kn = np.sqrt(np.sum(K * K) + 1e-300)
        if with_attach:
            attach = theta[ppc * i + 2 * m: ppc * i + 3 * m]
            world_pt = (R @ attach[:, None])[..., 0] + x
            J = jacobian(qs, model, attach=attach)
        else:
            world_pt = x
            J = jacobian(qs, model)
        f = np.einsum("d,...d->...", K, rest - world_pt)
        F = f[..., None] * (K / Kn)
        pred = pred + np.einsum("...dn,...d->...n", J, F)
    return (taus - pred).ravel()


def calibrate_contact(dataset, n_contacts, model, max_iter=100, tol=1e-10, full_attach=False):
    """Least-squares fit of contact stiffness vectors and rest poses.

    ``dataset`` is a sequence of (q, tau_measured) pairs.  The fit first
    solves a linear relaxation (symmetric force map W = sum K n n^T and offset
    w0 = W x_o, exact for attach at the TCP origin), extracts rank-one spring
    factors by eigendecomposition, then polishes with Levenberg-Marquardt on
    the native (K, rest) parameters.  ``full_attach`` additionally fits the
    attachment offsets; that problem is rank-deficient without orientation
    excitation and is off by default.
    """
    qs = np.asarray([d[0] for d in dataset], dtype=float)
    taus = np.asarray([d[1] for d in dataset], dtype=float)
    m = model.m
    ppc = (3 if full_attach else 2) * m
    n_par = ppc * n_contacts
    if len(dataset) < 10 * n_par:
        raise ValueError(f"need at least {10 * n_par} samples for {n_par} parameters")

    x, _ = forward_kinematics(qs, model)
    J = jacobian(qs, model)
    # linear relaxation: tau = J^T (w0 - W x), W symmetric PSD of rank <= n_contacts
    pairs = [(a, b) for a in range(m) for b in range(a, m)]
    cols = []
    for (a, b) in pairs:
        E = np.zeros((m, m))
        E[a, b] = E[b, a] = 1.0
        cols.append(-np.einsum("tdn,de,te->tn", J, E, x).ravel())
    for a in range(m):
        cols.append(J[:, a, :].ravel())
    A_lin = np.stack(cols, axis=1)
    b_lin = taus.ravel()
    sol, _, rank, sv = np.linalg.lstsq(A_lin, b_lin, rcond=None)
    torque_scale = float(np.linalg.norm(taus))
    identifiable = (rank == A_lin.shape[1]
                    and torque_scale > 1e-9 * max(1.0, float(np.linalg.norm(A_lin)))
                    and np.linalg.norm(sol) > 1e-12)
    W = np.zeros((m, m))
    for (a, b), v in zip(pairs, sol[: len(pairs)]):
        W[a, b] = W[b, a] = v
    w0 = sol[len(pairs):]
    evals, evecs = np.linalg.eigh(W)
    order = np.argsort(evals)[::-1][:n_contacts]
    xbar = x.mean(axis=0)
    theta = np.zeros(n_par)
    for slot, j in enumerate(order):
        lam = max(float(evals[j]), 1e-9)
        nvec = evecs[:, j]
        rest = nvec * float(nvec @ w0) / lam + (xbar - nvec * float(nvec @ xbar))
        theta[ppc * slot: ppc * slot + m] = lam * nvec
        theta[ppc * slot + m: ppc * slot + 2 * m] = rest

    # Levenberg-Marquardt polish on the native parameters
    lam_lm = 1e-3
    scale2 = max(1.0, torque_scale ** 2)
    r = _stacked_torque_residual(theta, qs, taus, n_contacts, model, m, full_attach)
    cost = float(r @ r)
    it = 0
    converged = cost <= 1e-18 * scale2
    while not converged and it < max_iter:
        it += 1
        Jr = np.empty((r.shape[0], n_par))
        for p in range(n_par):
            th = theta.astype(complex)
            th[p] += 1j * _CS_H
            Jr[:, p] = _stacked_torque_residual(th, qs, taus, n_contacts, model, m, full_attach).imag / _CS_H
        g = Jr.T @ r
        gnorm = float(np.linalg.norm(g, np.inf))
        grad_scale = 1.0 + float(np.linalg.norm(Jr)) * math.sqrt(cost)
        if gnorm <= 1e-9 * grad_scale:
            converged = True
            break
        H = Jr.T @ Jr
        accepted = False
        for _ in range(20):
            try:
                dth = -np.linalg.solve(H + lam_lm * np.diag(np.maximum(np.diag(H), 1e-12)), g)
            except np.linalg.LinAlgError:
                lam_lm *= 10
                continue
            r_new = _stacked_torque_residual(theta + dth, qs, taus, n_contacts, model, m, full_attach)
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                improvement = cost - cost_new
                theta = theta + dth
                r, cost = r_new, cost_new
                lam_lm = max(lam_lm * 0.3, 1e-12)
                accepted = True
                if cost <= 1e-18 * scale2 or improvement <= 1e-12 * max(cost, 1e-30):
                    converged = True
                break
            lam_lm *= 10
        if not accepted:
            # no descent direction left: at a numerical stationary point
            converged = gnorm <= 1e-6 * grad_scale
            break

    contacts = []
    for i in range(n_contacts):
        K = theta[ppc * i: ppc * i + m]
        rest = theta[ppc * i + m: ppc * i + 2 * m]
        attach = theta[ppc * i + 2 * m: ppc * i + 3 * m] if full_attach else np.zeros(m)
        if np.linalg.norm(K) <= 0:
            K = np.full(m, 1e-9)
            identifiable = False
        contacts.append(ContactPoint(K=K, rest=rest, attach=attach))
    rms = math.sqrt(cost / taus.size)
    return CalibrationResult(contacts=contacts, residual=rms,
                             converged=converged and identifiable,
                             identifiable=identifiable, iterations=it)
