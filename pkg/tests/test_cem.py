import numpy as np
import pytest

from contactplan.cem import (
    CemParams,
    CemResult,
    SamplingDistribution,
    colored_noise,
    icem_plan,
    rollout_cost,
)
from contactplan.dynamics import (
    ContactMode,
    ContactPoint,
    ImpedanceGains,
    RobotModel,
    external_torque,
    mass_matrix,
    step_xi,
)
from contactplan.nlp import CostParams, stage_cost

FREE = ContactMode(id=0, label="free")


def _point_setup(mass=2.0):
    model = RobotModel.point_mass(mass=mass, dim=2, damping=0.5)
    gains = ImpedanceGains(K_imp=[60.0, 60.0], D_imp=[15.0, 15.0])
    cost = CostParams.diagonal([1.0, 1.0], [0.05, 0.05], [0.01, 0.01],
                               targets=[[0.4, 0.1]])
    return model, gains, cost


# ---------------------------------------------------------------------------
# colored noise
# ---------------------------------------------------------------------------

def test_colored_noise_shape_and_normalization():
    rng = np.random.default_rng(0)
    x = colored_noise(2.0, 3, 64, 400, rng)
    assert x.shape == (400, 3, 64)
    assert abs(x.mean()) < 0.1                       # zero mean in expectation
    assert abs(x.var(axis=-1).mean() - 1.0) < 0.05   # unit sample variance on average


def test_colored_noise_white_limit_autocorrelation():
    rng = np.random.default_rng(1)
    x = colored_noise(0.0, 1, 512, 20, rng).reshape(20, 512)  # >= 1e4 samples total
    rhos = [np.corrcoef(row[:-1], row[1:])[0, 1] for row in x]
    assert abs(np.mean(rhos)) <= 0.05


def _periodogram_slope(x):
    # average periodogram over rows, least-squares line in log-log
    spec = np.abs(np.fft.rfft(x, axis=-1)) ** 2
    pxx = spec.mean(axis=0)[1:]  # drop DC
    f = np.fft.rfftfreq(x.shape[-1])[1:]
    return np.polyfit(np.log(f), np.log(pxx), 1)[0]


@pytest.mark.parametrize("beta", [0.0, 1.0, 2.0])
def test_colored_noise_psd_slope(beta):
    rng = np.random.default_rng(2)
    x = colored_noise(beta, 1, 512, 200, rng).reshape(200, 512)
    assert abs(_periodogram_slope(x) - (-beta)) <= 0.3


def test_colored_noise_rejects_short_horizon():
    with pytest.raises(ValueError):
        colored_noise(1.0, 2, 1, 4, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

def test_rollout_zero_horizon_costs_nothing():
    model, gains, cost = _point_setup()
    states, total = rollout_cost(np.zeros(4), FREE, np.zeros((2, 0)), cost, 0.02, model, gains)
    assert total == 0.0
    assert states.shape == (0, 4)


def test_rollout_matches_hand_unroll():
    model, gains, cost = _point_setup()
    rng = np.random.default_rng(3)
    xi0 = rng.uniform(-0.3, 0.3, 4)
    U = rng.uniform(-0.2, 0.5, (2, 5))
    states, total = rollout_cost(xi0, FREE, U, cost, 0.02, model, gains)
    xi = xi0.copy()
    acc = 0.0
    for t in range(5):
        acc += float(stage_cost(xi, U[:, t], 0, cost, model))
        xi = step_xi(xi, FREE, U[:, t], 0.02, model, gains)
        assert np.allclose(states[t], xi)
    assert np.isclose(total, acc)


def test_rollout_modes_differ_only_through_contact_torque():
    model, gains, _ = _point_setup()
    cost = CostParams.diagonal([1.0, 1.0], [0.05, 0.05], [0.01, 0.01],
                               targets=[[0.4, 0.1], [0.4, 0.1]])
    cp = ContactPoint(K=[0.0, 3e3], rest=[0.0, 0.05], attach=[0.0, 0.0])
    contact = ContactMode(id=1, label="c", contacts=(cp,))
    xi0 = np.array([0.1, 0.0, 0.0, 0.0])
    u = np.array([[0.1], [0.2]])
    dt = 0.02
    s_free, _ = rollout_cost(xi0, FREE, u, cost, dt, model, gains)
    s_contact, _ = rollout_cost(xi0, contact, u, cost, dt, model, gains)
    tau_e = external_torque(xi0[:2], contact, model)
    M = mass_matrix(xi0[:2], model)
    lhs = M + dt * np.diag(model.damping)
    dv_expected = dt * np.linalg.solve(lhs, tau_e)
    assert np.allclose(s_contact[0][2:] - s_free[0][2:], dv_expected, atol=1e-12)


# ---------------------------------------------------------------------------
# iCEM
# ---------------------------------------------------------------------------

def _params(**kw):
    base = dict(n_samples=32, n_iter=4, elite=6, horizon=6, beta=2.0,
                u_lo=np.array([-1.0, -1.0]), u_hi=np.array([1.0, 1.0]))
    base.update(kw)
    return CemParams(**base)


def test_icem_finds_static_optimum():
    # effectively static dynamics: enormous mass, so cost reduces to sum_t |u_t - x0|^2
    model = RobotModel.point_mass(mass=1e9, dim=2, damping=0.0)
    gains = ImpedanceGains(K_imp=[1.0, 1.0], D_imp=[0.0, 0.0])
    x_start = np.array([0.3, -0.4])
    cost = CostParams.diagonal([0.0, 0.0], [1.0, 1.0], [0.0, 0.0], targets=[[0.0, 0.0]])
    params = _params(n_samples=128, n_iter=10, elite=10, horizon=5)
    parts = [(np.concatenate([x_start, np.zeros(2)]), 1.0, 0)]
    rng = np.random.default_rng(4)
    res = icem_plan(parts, np.zeros((2, 5)), params, cost, 0.02, model, gains, [FREE], rng)
    assert np.all(np.abs(res.distribution.mean - x_start[:, None]) < 0.05)


def test_icem_uniform_weights_match_unweighted():
    model, gains, cost = _point_setup()
    params = _params(n_iter=3)
    xi = np.array([0.1, 0.0, 0.0, 0.0])
    parts_uniform = [(xi + 0.01 * k, 0.25, 0) for k in range(4)]
    parts_unit = [(xi + 0.01 * k, 1.0, 0) for k in range(4)]
    r1 = icem_plan(parts_uniform, np.zeros((2, 6)), params, cost, 0.02, model, gains,
                   [FREE], np.random.default_rng(7))
    r2 = icem_plan(parts_unit, np.zeros((2, 6)), params, cost, 0.02, model, gains,
                   [FREE], np.random.default_rng(7))
    assert np.array_equal(r1.best_actions, r2.best_actions)
    assert np.array_equal(r1.distribution.mean, r2.distribution.mean)
    # normalized costs scale exactly by the weight ratio
    assert np.isclose(r1.best_cost, 4.0 * r2.best_cost)


def test_icem_weight_division_contract():
    model, gains, cost = _point_setup()
    params = _params(n_samples=4, n_iter=1, elite=2)
    xi = np.array([0.1, 0.0, 0.0, 0.0])
    r_half = icem_plan([(xi, 0.5, 0)], np.zeros((2, 6)), params, cost, 0.02, model,
                       gains, [FREE], np.random.default_rng(8))
    r_full = icem_plan([(xi, 1.0, 0)], np.zeros((2, 6)), params, cost, 0.02, model,
                       gains, [FREE], np.random.default_rng(8))
    assert np.isclose(r_half.best_cost, 2.0 * r_full.best_cost)


def test_icem_paper_scale_parameters_run():
    # N_iter = 150, N = 128, elite 10 on a 20-step horizon
    model, gains, cost = _point_setup()
    params = _params(n_samples=128, n_iter=150, elite=10, horizon=20)
    parts = [(np.array([0.1, 0.0, 0.0, 0.0]), 1.0, 0)]
    rng = np.random.default_rng(9)
    res = icem_plan(parts, np.zeros((2, 20)), params, cost, 0.02, model, gains, [FREE], rng)
    assert len(res.telemetry) == 150
    bests = [row["best_cost"] for row in res.telemetry]
    assert all(b2 <= b1 + 1e-12 for b1, b2 in zip(bests, bests[1:]))
    assert np.all(res.best_actions >= params.u_lo[:, None] - 1e-12)
    assert np.all(res.best_actions <= params.u_hi[:, None] + 1e-12)


def test_icem_passthrough_when_no_iterations():
    model, gains, cost = _point_setup()
    params = _params(n_iter=0)
    warm = np.full((2, 6), 0.3)
    parts = [(np.array([0.1, 0.0, 0.0, 0.0]), 1.0, 0)]
    res = icem_plan(parts, warm, params, cost, 0.02, model, gains, [FREE],
                    np.random.default_rng(10))
    assert np.array_equal(res.best_actions, warm)
    assert 0 in res.rollouts and res.rollouts[0].shape == (6, 4)
    _, expected = rollout_cost(parts[0][0], FREE, warm, cost, 0.02, model, gains)
    assert np.isclose(res.best_cost, expected)


def test_icem_deterministic_given_seed():
    model, gains, cost = _point_setup()
    params = _params()
    parts = [(np.array([0.1, 0.0, 0.0, 0.0]), 1.0, 0)]

    def run():
        return icem_plan(parts, np.zeros((2, 6)), params, cost, 0.02, model, gains,
                         [FREE], np.random.default_rng(11))

    r1, r2 = run(), run()
    assert np.array_equal(r1.best_actions, r2.best_actions)
    assert r1.best_cost == r2.best_cost
    assert np.array_equal(r1.distribution.std, r2.distribution.std)


def test_icem_elite_refit_contract():
    # replicate the first iteration by hand: mean/std must equal the elite stats
    model, gains, cost = _point_setup()
    params = _params(n_samples=16, n_iter=1, elite=4)
    xi = np.array([0.1, 0.0, 0.0, 0.0])
    parts = [(xi, 1.0, 0)]
    warm = np.zeros((2, 6))
    res = icem_plan(parts, warm, params, cost, 0.02, model, gains, [FREE],
                    np.random.default_rng(12))

    rng = np.random.default_rng(12)
    noise = colored_noise(params.beta, 2, 6, 16, rng)
    U = np.clip(warm[None] + noise, params.u_lo[None, :, None], params.u_hi[None, :, None])
    costs = np.array([rollout_cost(xi, FREE, U[i], cost, 0.02, model, gains)[1]
                      for i in range(16)])
    _, seed_cost = rollout_cost(xi, FREE, np.clip(warm, -1, 1), cost, 0.02, model, gains)
    pool = np.append(costs, seed_cost)
    order = np.argsort(pool, kind="stable")[:4]
    elite = np.array([np.clip(warm, -1, 1) if i == 16 else U[i] for i in order])
    assert np.allclose(res.distribution.mean, elite.mean(axis=0))
    assert np.allclose(res.distribution.std,
                       np.maximum(elite.std(axis=0), params.std_floor))


def test_icem_monotone_even_with_adversarial_seed_cost():
    # incumbent must keep the best cost from rising across iterations
    model, gains, cost = _point_setup()
    params = _params(n_samples=8, n_iter=6, elite=2)
    parts = [(np.array([0.5, 0.5, 0.0, 0.0]), 1.0, 0)]
    res = icem_plan(parts, np.full((2, 6), 0.9), params, cost, 0.02, model, gains,
                    [FREE], np.random.default_rng(13))
    bests = [row["best_cost"] for row in res.telemetry]
    assert all(b2 <= b1 + 1e-12 for b1, b2 in zip(bests, bests[1:]))


def test_cem_params_validation():
    with pytest.raises(ValueError):
        _params(elite=64, n_samples=8)
    with pytest.raises(ValueError):
        _params(n_iter=-1)
    with pytest.raises(ValueError):
        CemParams(n_samples=8, n_iter=1, elite=2, horizon=4, beta=1.0,
                  u_lo=np.array([1.0]), u_hi=np.array([-1.0]))
    with pytest.raises(ValueError):
        SamplingDistribution(np.zeros((2, 3)), np.zeros((2, 3)), 1.0)
