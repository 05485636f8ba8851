"""Weighted improved Cross-Entropy Method over hybrid contact dynamics.

Actions are impedance rest-position sequences sampled with temporally
correlated (colored) noise around a mean initialized from the previous MPC
optimum.  Each sample is rolled out from a filter particle's state under that
particle's sampled contact mode, and its cost is divided by the particle
weight so that actions favoring unlikely particles are penalized.  The elite
set refits the sampling distribution each iteration; the incumbent best
sample is carried into the next iteration's candidate pool, which makes the
best cost monotone.  Constraints are left to the downstream NLP stage; the
only restriction applied here is clipping to the action box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import step_xi, _step_xi_task
from .nlp import CostParams, stage_cost

STD_FLOOR = 1e-4
WEIGHT_FLOOR = 1e-3


@dataclass
class SamplingDistribution:
    mean: np.ndarray   # (d, h)
    std: np.ndarray    # (d, h)
    beta: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if np.any(self.std <= 0):
            raise ValueError("std entries must be positive")


@dataclass
class CemParams:
    n_samples: int
    n_iter: int
    elite: int
    horizon: int
    beta: float
    u_lo: np.ndarray
    u_hi: np.ndarray
    weight_floor: float = WEIGHT_FLOOR
    std_floor: float = STD_FLOOR

    def __post_init__(self):
        self.u_lo = np.asarray(self.u_lo, dtype=float)
        self.u_hi = np.asarray(self.u_hi, dtype=float)
        if self.elite > self.n_samples:
            raise ValueError("elite size cannot exceed the sample count")
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        if np.any(self.u_lo >= self.u_hi):
            raise ValueError("action bounds must satisfy lo < hi")


@dataclass
class CemResult:
    best_actions: np.ndarray       # (d, h)
    best_cost: float
    rollouts: dict                 # mode id -> (h, 2n) states of best_actions
    distribution: SamplingDistribution
    telemetry: list = field(default_factory=list)


def colored_noise(beta, d, h, count, rng):
    """Unit-variance sequences with power spectral density ~ f^-beta.

    Gaussian spectral coefficients are scaled by f^(-beta/2) and transformed
    by an inverse real FFT; every row is then renormalized to unit sample
    variance.  The zero-frequency amplitude is pinned to that of the lowest
    resolvable frequency (the flat-below-1/h convention of the usual colored
    noise generators): sequences keep a random constant component, without
    which the elite refit could never move the action mean's time average.
    beta = 0 recovers white noise.
    """
    if h < 2:
        raise ValueError("need a horizon of at least 2 to shape noise")
    freqs = np.fft.rfftfreq(h)
    scale = np.empty(freqs.shape[0])
    scale[1:] = freqs[1:] ** (-beta / 2.0)
    scale[0] = scale[1]
    # deterministic normalization to unit sample variance (DC only moves the mean)
    w = scale[1:].copy()
    w[-1] *= (1 + (h % 2)) / 2.0
    sigma = 2.0 * np.sqrt(np.sum(w ** 2)) / h
    sr = rng.standard_normal((count, d, freqs.shape[0])) * scale
    si = rng.standard_normal((count, d, freqs.shape[0])) * scale
    si[..., 0] = 0.0
    sr[..., 0] *= np.sqrt(2.0)
    if h % 2 == 0:
        si[..., -1] = 0.0
        sr[..., -1] *= np.sqrt(2.0)
    return np.fft.irfft(sr + 1j * si, n=h, axis=-1) / sigma


def rollout_cost(xi0, mode, actions, cost: CostParams, dt, model, gains):
    """Roll actions (d, h) out under one fixed mode; return (states, total cost).

    The stage cost pairs each action with the state it is applied from,
    matching the MPC objective.
    """
    actions = np.asarray(actions, dtype=float)
    h = actions.shape[-1]
    xi0 = np.asarray(xi0, dtype=float)
    costs, states = _batch_rollout_cost(xi0[None, :], mode, actions[None], cost,
                                        dt, model, gains, keep_states=True)
    return states[0], float(costs[0])


def _batch_rollout_cost(xi0s, mode, U, cost, dt, model, gains, keep_states=False):
    """Vectorized rollouts: xi0s (B, 2n), U (B, d, h) -> costs (B,)[, states].

    Stage costs reuse the TCP position/velocity already computed inside the
    integrator instead of re-deriving the kinematics.
    """
    B, _, h = U.shape
    total = np.zeros(B)
    xi = xi0s.copy()
    states = np.empty((B, h, xi0s.shape[-1])) if keep_states else None
    mask = cost.mask[mode.id]
    tgt = cost.targets_filled[mode.id]
    for t in range(h):
        u_t = U[:, :, t]
        xi, x, xd = _step_xi_task(xi, mode, u_t, dt, model, gains)
        dx = (tgt - x) * mask
        du = u_t - x
        total += (np.einsum("...d,de,...e->...", dx, cost.Q_x, dx)
                  + np.einsum("...d,de,...e->...", du, cost.Q_u, du)
                  + np.einsum("...d,de,...e->...", xd, cost.Q_xd, xd))
        if keep_states:
            states[:, t] = xi
    return (total, states) if keep_states else total


def icem_plan(filter_particles, warmstart_mean, params: CemParams, cost: CostParams,
              dt, model, gains, modes, rng, xi0_by_mode=None) -> CemResult:
    """Weighted iCEM warmstart search.

    ``filter_particles`` is a list of (state vector, weight, mode id) tuples
    straight from the hybrid filter.  Samples are assigned to particles
    round-robin; each sample's rollout cost is divided by max(weight, floor).
    The incumbent (seeded from the clipped warmstart mean, evaluated on the
    highest-weight particle) always competes in the elite selection, so the
    best cost never increases.  The returned best actions are re-rolled under
    every mode's conditioned initial state for the NLP warmstart.
    """
    d, h = params.u_lo.shape[0], params.horizon
    mean = np.asarray(warmstart_mean, dtype=float).copy()
    if mean.shape != (d, h):
        raise ValueError(f"warmstart mean must be (d, h) = {(d, h)}")
    std = np.ones((d, h))

    xis = np.asarray([p[0] for p in filter_particles], dtype=float)
    ws = np.asarray([p[1] for p in filter_particles], dtype=float)
    zs = np.asarray([p[2] for p in filter_particles], dtype=np.intp)
    if xis.shape[0] == 0:
        raise ValueError("need at least one filter particle")

    mode_by_id = {mode.id: mode for mode in modes}
    if xi0_by_mode is None:
        xi0_by_mode = {}
        for mode in modes:
            sel = zs == mode.id
            if np.any(sel) and ws[sel].sum() > 0:
                xi0_by_mode[mode.id] = np.average(xis[sel], axis=0, weights=ws[sel])
            else:
                xi0_by_mode[mode.id] = np.average(xis, axis=0, weights=ws)

    lo3 = params.u_lo[None, :, None]
    hi3 = params.u_hi[None, :, None]

    traj_cache = {}

    def normalized_costs(U_batch, part_idx):
        costs = np.empty(U_batch.shape[0])
        traj_cache.clear()
        for z in np.unique(zs[part_idx]):
            sel = np.flatnonzero(zs[part_idx] == z)
            costs[sel], states = _batch_rollout_cost(
                xis[part_idx[sel]], mode_by_id[int(z)], U_batch[sel],
                cost, dt, model, gains, keep_states=True)
            for j, i in enumerate(sel):
                traj_cache[int(i)] = (int(z), part_idx[i], states[j])
        return costs / np.maximum(ws[part_idx], params.weight_floor)

    # incumbent: the clipped warmstart mean, assigned to the strongest particle
    seed_actions = np.clip(mean, params.u_lo[:, None], params.u_hi[:, None])
    seed_idx = int(np.argmax(ws))
    best_cost = None   # evaluated with the first batch (or standalone if n_iter == 0)
    best_actions = seed_actions.copy()
    telemetry = []

    n_parts = xis.shape[0]
    best_traj = None    # (mode id, particle index, states) of the incumbent
    assign = np.concatenate([np.arange(params.n_samples, dtype=np.intp) % n_parts,
                             [seed_idx]])
    for it in range(params.n_iter):
        noise = colored_noise(params.beta, d, h, params.n_samples, rng)
        U = np.clip(mean[None] + noise * std[None], lo3, hi3)
        if best_cost is None:
            # fold the incumbent into the first evaluation batch
            U_eval = np.concatenate([U, best_actions[None]])
            costs_all = normalized_costs(U_eval, assign)
            costs, best_cost = costs_all[:-1], float(costs_all[-1])
            best_traj = traj_cache[params.n_samples]
        else:
            costs = normalized_costs(U, assign[:-1])
        # candidate pool = fresh samples + incumbent (with its stored cost)
        pool_costs = np.append(costs, best_cost)
        pool_idx = np.argsort(pool_costs, kind="stable")[: params.elite]
        elite = np.array([best_actions if i == params.n_samples else U[i]
                          for i in pool_idx])
        if pool_costs[pool_idx[0]] < best_cost:
            best_cost = float(pool_costs[pool_idx[0]])
            best_actions = elite[0].copy()
            best_traj = traj_cache[int(pool_idx[0])]
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), params.std_floor)
        telemetry.append({"iter": it, "best_cost": best_cost,
                          "elite_mean_cost": float(pool_costs[pool_idx].mean()),
                          "std_norm": float(np.linalg.norm(std))})

    rollouts = {}
    expected = 0.0
    belief = np.bincount(zs, weights=ws, minlength=max(m.id for m in modes) + 1)
    belief = belief / belief.sum()
    for mode in modes:
        if best_traj is not None and best_traj[0] == mode.id and \
                np.array_equal(xis[best_traj[1]], np.asarray(xi0_by_mode[mode.id])):
            rollouts[mode.id] = best_traj[2]   # winner's own rollout, reused
            continue
        states, total = rollout_cost(xi0_by_mode[mode.id], mode, best_actions,
                                     cost, dt, model, gains)
        rollouts[mode.id] = states
        expected += belief[mode.id] * total
    if best_cost is None:
        best_cost = expected  # pass-through: no samples were drawn
    return CemResult(best_actions=best_actions, best_cost=best_cost,
                     rollouts=rollouts,
                     distribution=SamplingDistribution(mean, std, params.beta),
                     telemetry=telemetry)
