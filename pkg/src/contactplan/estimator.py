"""Hybrid particle filter: a bank of mode-conditioned EKFs carried by particles.

Each particle is the tuple (mu, Sigma, mode_probs, sampled_mode, weight): an
EKF mean/covariance over the continuous state, the predicted discrete-mode
distribution it sampled from, the mode it sampled, and an importance weight.
Per step every particle propagates its mode through the transition matrix
(one-hot row selection, i.e. the vector-matrix product for a sampled previous
mode), draws a fresh mode, runs an EKF predict/update under that mode's
dynamics and observation model, and is weighted by the measurement likelihood.
Systematic resampling then equalizes the weights and the discrete-mode belief
is read off the weighted sampled modes.

The filter is written against a small "hybrid system" duck type so the same
machinery runs on the robot dynamics and on scalar benchmark systems:

    system.n_modes          -> int
    system.state_dim        -> int
    system.Q, system.R      -> process / measurement covariance
    system.predict(xi, z, u)      batched mean propagation under mode z
    system.jac_dynamics(xi, z, u) batched A = df/dxi
    system.predict_obs(xi, z)     batched predicted measurement
    system.jac_obs(xi, z)         batched C = dh/dxi
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    ContactMode,
    ImpedanceGains,
    NoiseModel,
    RobotModel,
    dynamics_jacobians,
    external_torque,
    observation_jacobian,
    step_xi,
    validate_mode_set,
)

_S_REG = 1e-9


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic, diagonal-dominant discrete transition prior."""

    T: np.ndarray

    def __post_init__(self):
        T = np.asarray(self.T, dtype=float)
        object.__setattr__(self, "T", T)
        if T.ndim != 2 or T.shape[0] != T.shape[1]:
            raise ValueError("transition matrix must be square")
        if np.any(T < 0) or not np.allclose(T.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("rows must be probability distributions")
        for i in range(T.shape[0]):
            if np.any(T[i, i] < T[i]):
                raise ValueError("diagonal must dominate every row")

    @property
    def n_modes(self) -> int:
        return self.T.shape[0]

    @staticmethod
    def chain(n_modes, stay=0.95):
        """Default prior: mass leaves the diagonal only to adjacent modes."""
        T = np.zeros((n_modes, n_modes))
        for i in range(n_modes):
            T[i, i] = stay
            nbrs = [j for j in (i - 1, i + 1) if 0 <= j < n_modes]
            for j in nbrs:
                T[i, j] = (1.0 - stay) / len(nbrs)
            T[i, i] += 1.0 - T[i].sum()
        return TransitionMatrix(T)


@dataclass
class Particle:
    mu: np.ndarray
    Sigma: np.ndarray
    mode_probs: np.ndarray
    sampled_mode: int
    weight: float


@dataclass
class HybridBelief:
    """Particle set stored as stacked arrays, plus the aggregated mode belief."""

    mus: np.ndarray          # (N, dim)
    Sigmas: np.ndarray       # (N, dim, dim)
    mode_probs: np.ndarray   # (N, n_modes), predicted prior each particle sampled from
    sampled_modes: np.ndarray  # (N,), int
    weights: np.ndarray      # (N,), normalized
    mode_belief_: np.ndarray  # (n_modes,)
    diverged: bool = False

    @property
    def n_particles(self) -> int:
        return self.mus.shape[0]

    def particle(self, i: int) -> Particle:
        return Particle(self.mus[i], self.Sigmas[i], self.mode_probs[i],
                        int(self.sampled_modes[i]), float(self.weights[i]))

    @property
    def particles(self):
        return [self.particle(i) for i in range(self.n_particles)]

    def validate(self, atol=1e-9):
        assert abs(self.weights.sum() - 1.0) < atol
        assert np.all(np.abs(self.mode_probs.sum(axis=1) - 1.0) < atol)
        assert abs(self.mode_belief_.sum() - 1.0) < atol
        for S in self.Sigmas:
            assert np.allclose(S, S.T, atol=1e-8)
            assert np.linalg.eigvalsh(S).min() > -1e-8

    @staticmethod
    def initialize(mu0, Sigma0, mode_prior, n_particles, rng):
        mu0 = np.asarray(mu0, dtype=float)
        Sigma0 = np.asarray(Sigma0, dtype=float)
        prior = np.asarray(mode_prior, dtype=float)
        prior = prior / prior.sum()
        mus = np.repeat(mu0[None, :], n_particles, axis=0)
        Sigmas = np.repeat(Sigma0[None, :, :], n_particles, axis=0)
        probs = np.repeat(prior[None, :], n_particles, axis=0)
        modes = _categorical_rows(probs, rng)
        w = np.full(n_particles, 1.0 / n_particles)
        belief = np.bincount(modes, weights=w, minlength=prior.shape[0])
        return HybridBelief(mus, Sigmas, probs, modes, w, belief / belief.sum())


def _categorical_rows(probs, rng):
    """One categorical draw per row of a stacked probability table."""
    c = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * c[:, -1]
    return (u[:, None] >= c).sum(axis=1).astype(np.intp)


def _symmetrize_psd(Sigmas):
    """Symmetrize and clamp negative eigenvalues at zero (batched)."""
    Sigmas = 0.5 * (Sigmas + np.swapaxes(Sigmas, -1, -2))
    w, V = np.linalg.eigh(Sigmas)
    if np.all(w >= 0):
        return Sigmas
    w = np.maximum(w, 0.0)
    return np.einsum("...ij,...j,...kj->...ik", V, w, V)


def _ekf_batch(system, mus, Sigmas, z, u, y):
    """EKF predict + Joseph-form update for a batch of particles in one mode."""
    A = system.jac_dynamics(mus, z, u)
    mu_pred = system.predict(mus, z, u)
    P = A @ Sigmas @ np.swapaxes(A, -1, -2) + system.Q
    C = system.jac_obs(mu_pred, z)
    y_hat = system.predict_obs(mu_pred, z)
    S = C @ P @ np.swapaxes(C, -1, -2) + system.R
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    regularized = False
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        S = S + _S_REG * np.eye(S.shape[-1])
        L = np.linalg.cholesky(S)
        regularized = True
    innov = y - y_hat
    # K = P C' S^-1 via the factorization; also reuse L for the log-likelihood
    PCt = P @ np.swapaxes(C, -1, -2)
    K = np.swapaxes(np.linalg.solve(S, np.swapaxes(PCt, -1, -2)), -1, -2)
    mu_new = mu_pred + (K @ innov[..., :, None])[..., 0]
    I = np.eye(P.shape[-1])
    IKC = I - K @ C
    Sigma_new = IKC @ P @ np.swapaxes(IKC, -1, -2) + K @ system.R @ np.swapaxes(K, -1, -2)
    Sigma_new = _symmetrize_psd(Sigma_new)
    alpha = np.linalg.solve(L, innov[..., :, None])[..., 0]
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
    k = S.shape[-1]
    loglik = -0.5 * (np.sum(alpha ** 2, axis=-1) + logdet + k * np.log(2 * np.pi))
    return mu_new, Sigma_new, y_hat, S, loglik, regularized


def ekf_step(mu, Sigma, system, mode, u, y):
    """Single EKF predict/update under one mode.

    Returns (mu', Sigma', predicted measurement, innovation covariance).
    A non-invertible innovation covariance is regularized with 1e-9 I.
    """
    mu = np.asarray(mu, dtype=float)[None, :]
    Sigma = np.asarray(Sigma, dtype=float)[None, :, :]
    mu_new, Sigma_new, y_hat, S, _, _ = _ekf_batch(system, mu, Sigma, mode, u, np.asarray(y, dtype=float))
    return mu_new[0], Sigma_new[0], y_hat[0], S[0]


def systematic_resample(weights, rng):
    """Low-variance systematic resampling; expected copy count is N w_i."""
    w = np.asarray(weights, dtype=float)
    N = w.shape[0]
    positions = (rng.random() + np.arange(N)) / N
    cumsum = np.cumsum(w)
    cumsum[-1] = 1.0
    return np.searchsorted(cumsum, positions).astype(np.intp)


def pf_step(belief: HybridBelief, system, T: TransitionMatrix, u, y, rng,
            ess_threshold: float | None = None) -> HybridBelief:
    """One step of the hybrid particle filter.

    Per particle: propagate the sampled mode through T, draw a new mode, run
    the mode-conditioned EKF, weight by the measurement likelihood.  Then
    normalize, aggregate the discrete-mode belief from the weighted sampled
    modes, and resample (always, unless an effective-sample-size gate is
    configured).  If every weight underflows the filter resets to uniform
    weights and flags divergence.
    """
    y = np.asarray(y, dtype=float)
    N = belief.n_particles
    prior = T.T[belief.sampled_modes]              # one-hot(mode) @ T, row per particle
    z_new = _categorical_rows(prior, rng)

    mus = np.empty_like(belief.mus)
    Sigmas = np.empty_like(belief.Sigmas)
    loglik = np.empty(N)
    for z in np.unique(z_new):
        sel = z_new == z
        mus[sel], Sigmas[sel], _, _, loglik[sel], _ = _ekf_batch(
            system, belief.mus[sel], belief.Sigmas[sel], int(z), u, y)

    logw = np.log(np.maximum(belief.weights, 1e-300)) + loglik
    diverged = False
    finite = np.isfinite(logw)
    if not np.any(finite):
        w = np.full(N, 1.0 / N)
        diverged = True
    else:
        logw[~finite] = -np.inf
        logw -= logw[finite].max()
        w = np.exp(logw)
        tot = w.sum()
        if not np.isfinite(tot) or tot <= 0.0:
            w = np.full(N, 1.0 / N)
            diverged = True
        else:
            w = w / tot

    mode_belief = np.bincount(z_new, weights=w, minlength=T.n_modes)
    mode_belief = mode_belief / mode_belief.sum()

    ess = 1.0 / float(np.sum(w ** 2))
    if ess_threshold is None or ess < ess_threshold * N:
        idx = systematic_resample(w, rng)
        return HybridBelief(mus[idx], Sigmas[idx], prior[idx], z_new[idx],
                            np.full(N, 1.0 / N), mode_belief, diverged)
    return HybridBelief(mus, Sigmas, prior, z_new, w, mode_belief, diverged)


def mode_belief(belief: HybridBelief) -> np.ndarray:
    """Normalized weight mass per sampled mode of the current particle set."""
    n_modes = belief.mode_probs.shape[1]
    b = np.bincount(belief.sampled_modes, weights=belief.weights, minlength=n_modes)
    return b / b.sum()


def mode_conditioned_state(belief: HybridBelief, z: int):
    """Weighted mean state of the particles that sampled mode z.

    Falls back to the overall weighted mean (found=False) when no particle
    carries the mode.
    """
    sel = belief.sampled_modes == z
    if not np.any(sel) or belief.weights[sel].sum() <= 0.0:
        return np.average(belief.mus, axis=0, weights=belief.weights), False
    return np.average(belief.mus[sel], axis=0, weights=belief.weights[sel]), True


class RobotHybridSystem:
    """Binds the contact dynamics to the hybrid-system interface of the filter."""

    def __init__(self, model: RobotModel, modes, gains: ImpedanceGains,
                 noise: NoiseModel, dt: float):
        validate_mode_set(modes)
        self.model = model
        self.modes = list(modes)
        self.gains = gains
        self.noise = noise
        self.dt = float(dt)

    @property
    def n_modes(self):
        return len(self.modes)

    @property
    def state_dim(self):
        return 2 * self.model.n

    @property
    def Q(self):
        return self.noise.Q

    @property
    def R(self):
        return self.noise.R_y

    def predict(self, xi, z, u):
        return step_xi(xi, self.modes[z], u, self.dt, self.model, self.gains)

    def jac_dynamics(self, xi, z, u):
        A, _ = dynamics_jacobians(xi, self.modes[z], u, self.dt, self.model, self.gains)
        return A

    def predict_obs(self, xi, z):
        n = self.model.n
        q = xi[..., :n]
        return np.concatenate([q, external_torque(q, self.modes[z], self.model)], axis=-1)

    def jac_obs(self, xi, z):
        return observation_jacobian(xi, self.modes[z], self.model)


class HybridParticleFilter:
    """Stateful convenience wrapper around ``pf_step`` with CSV-friendly dumps."""

    def __init__(self, system, T: TransitionMatrix, mu0, Sigma0, mode_prior,
                 n_particles, rng, ess_threshold=None):
        if T.n_modes != system.n_modes:
            raise ValueError("transition matrix size must match the mode set")
        self.system = system
        self.T = T
        self.ess_threshold = ess_threshold
        self.belief = HybridBelief.initialize(mu0, Sigma0, mode_prior, n_particles, rng)
        self.history: list = []

    def step(self, u, y, rng) -> HybridBelief:
        self.belief = pf_step(self.belief, self.system, self.T, u, y, rng,
                              ess_threshold=self.ess_threshold)
        return self.belief

    def dump_rows(self, step_idx):
        """Per-particle rows (step, particle, weight, mode, mu...) for the bench CSV."""
        b = self.belief
        rows = []
        for i in range(b.n_particles):
            rows.append([step_idx, i, float(b.weights[i]), int(b.sampled_modes[i])]
                        + [float(v) for v in b.mus[i]])
        return rows
