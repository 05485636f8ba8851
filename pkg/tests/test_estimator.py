import numpy as np
import pytest

from contactplan.dynamics import (
    ContactMode,
    ContactPoint,
    ImpedanceGains,
    NoiseModel,
    RobotModel,
)
from contactplan.estimator import (
    HybridBelief,
    HybridParticleFilter,
    Particle,
    RobotHybridSystem,
    TransitionMatrix,
    ekf_step,
    mode_belief,
    mode_conditioned_state,
    pf_step,
    systematic_resample,
)

from oracles import (
    AffineHybridSystem,
    Gpb2Filter,
    make_spring_hybrid_1d,
    simulate_hybrid,
)


def _belief_from_particles(parts):
    mus = np.array([p.mu for p in parts], dtype=float)
    Sigmas = np.array([p.Sigma for p in parts], dtype=float)
    probs = np.array([p.mode_probs for p in parts], dtype=float)
    modes = np.array([p.sampled_mode for p in parts], dtype=np.intp)
    w = np.array([p.weight for p in parts], dtype=float)
    w = w / w.sum()
    nz = probs.shape[1]
    mb = np.bincount(modes, weights=w, minlength=nz)
    return HybridBelief(mus, Sigmas, probs, modes, w, mb / mb.sum())


# ---------------------------------------------------------------------------
# transition matrix
# ---------------------------------------------------------------------------

def test_transition_matrix_validation():
    TransitionMatrix(np.eye(3))
    TransitionMatrix.chain(3, stay=0.95)
    with pytest.raises(ValueError):
        TransitionMatrix(np.array([[0.4, 0.6], [0.5, 0.5]]))  # off-diagonal dominates
    with pytest.raises(ValueError):
        TransitionMatrix(np.array([[0.9, 0.2], [0.1, 0.9]]))  # rows not stochastic


def test_transition_chain_structure():
    T = TransitionMatrix.chain(4, stay=0.9).T
    assert np.allclose(T.sum(axis=1), 1.0)
    assert T[0, 2] == 0.0 and T[1, 3] == 0.0  # mass only to adjacent modes


# ---------------------------------------------------------------------------
# EKF
# ---------------------------------------------------------------------------

def test_ekf_no_information_update():
    # Q = 0, R huge: the update is pure prediction
    sys = AffineHybridSystem(
        As=[np.array([[1.0, 0.1], [0.0, 0.95]])], Bs=[np.zeros((2, 1))],
        cs=[np.zeros(2)], Cs=[np.eye(2)], ds=[np.zeros(2)],
        Q=np.zeros((2, 2)), R=1e14 * np.eye(2))
    mu = np.array([0.3, -0.2])
    Sigma = np.array([[0.04, 0.01], [0.01, 0.09]])
    mu2, Sigma2, y_pred, S = ekf_step(mu, Sigma, sys, 0, np.zeros(1), np.array([5.0, 5.0]))
    A = sys.As[0]
    assert np.allclose(mu2, A @ mu, atol=1e-9)
    assert np.allclose(Sigma2, A @ Sigma @ A.T, atol=1e-6)
    assert np.allclose(y_pred, A @ mu)


def test_ekf_matches_scalar_kalman_recursion():
    a, c, q, r = 0.9, 1.3, 0.02, 0.5
    sys = AffineHybridSystem(
        As=[np.array([[a]])], Bs=[np.zeros((1, 1))], cs=[np.zeros(1)],
        Cs=[np.array([[c]])], ds=[np.zeros(1)],
        Q=np.array([[q]]), R=np.array([[r]]))
    rng = np.random.default_rng(0)
    mu, P = np.array([0.7]), np.array([[1.0]])
    m_s, p_s = 0.7, 1.0
    for _ in range(40):
        y = rng.standard_normal(1)
        mu, P, y_pred, S = ekf_step(mu, P, sys, 0, np.zeros(1), y)
        # hand-written scalar recursion
        m_pred = a * m_s
        p_pred = a * a * p_s + q
        s = c * c * p_pred + r
        k = p_pred * c / s
        m_s = m_pred + k * (y[0] - c * m_pred)
        p_s = (1 - k * c) ** 2 * p_pred + k * k * r
        assert abs(mu[0] - m_s) < 1e-12
        assert abs(P[0, 0] - p_s) < 1e-12
        assert abs(y_pred[0] - c * m_pred) < 1e-12
        assert abs(S[0, 0] - s) < 1e-12


def test_ekf_covariance_contracts_under_repeated_measurements():
    sys = AffineHybridSystem(
        As=[np.eye(2)], Bs=[np.zeros((2, 1))], cs=[np.zeros(2)],
        Cs=[np.eye(2)], ds=[np.zeros(2)],
        Q=np.zeros((2, 2)), R=0.1 * np.eye(2))
    mu, P = np.zeros(2), np.eye(2)
    prev = np.trace(P)
    for _ in range(20):
        mu, P, _, _ = ekf_step(mu, P, sys, 0, np.zeros(1), np.array([0.1, -0.1]))
        assert np.trace(P) <= prev + 1e-12
        prev = np.trace(P)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def test_systematic_resample_uniform_is_identity_multiset():
    rng = np.random.default_rng(1)
    idx = systematic_resample(np.full(8, 1 / 8), rng)
    assert sorted(idx.tolist()) == list(range(8))


def test_systematic_resample_degenerate():
    rng = np.random.default_rng(2)
    idx = systematic_resample(np.array([0.0, 1.0, 0.0]), rng)
    assert np.all(idx == 1)


def test_systematic_resample_copy_fractions():
    w = np.array([0.5, 0.3, 0.2])
    rng = np.random.default_rng(3)
    counts = np.zeros(3)
    reps = 20000
    for _ in range(reps):
        counts += np.bincount(systematic_resample(w, rng), minlength=3)
    frac = counts / (3 * reps)
    assert np.all(np.abs(frac - w) < 0.01)


# ---------------------------------------------------------------------------
# mode belief helpers
# ---------------------------------------------------------------------------

def _dummy_particle(mu, z, w, nz=2):
    return Particle(np.atleast_1d(np.asarray(mu, dtype=float)), np.eye(len(np.atleast_1d(mu))),
                    np.full(nz, 1.0 / nz), z, w)


def test_mode_belief_one_hot_and_split():
    b = _belief_from_particles([_dummy_particle([0.0], 1, 0.25) for _ in range(4)])
    assert np.allclose(mode_belief(b), [0.0, 1.0])
    b = _belief_from_particles([_dummy_particle([0.0], 0, 0.25), _dummy_particle([0.0], 0, 0.25),
                                _dummy_particle([0.0], 1, 0.25), _dummy_particle([0.0], 1, 0.25)])
    assert np.allclose(mode_belief(b), [0.5, 0.5])


def test_mode_belief_hand_sum():
    parts = [_dummy_particle([0.0], 0, 0.1), _dummy_particle([0.0], 1, 0.3),
             _dummy_particle([0.0], 0, 0.2), _dummy_particle([0.0], 1, 0.15),
             _dummy_particle([0.0], 0, 0.25)]
    b = _belief_from_particles(parts)
    assert np.allclose(mode_belief(b), [0.55, 0.45])


def test_mode_conditioned_state():
    p = _dummy_particle([1.5, 0.2], 0, 1.0)
    b = _belief_from_particles([p])
    xi, found = mode_conditioned_state(b, 0)
    assert found and np.allclose(xi, [1.5, 0.2])
    xi, found = mode_conditioned_state(b, 1)
    assert not found and np.allclose(xi, [1.5, 0.2])  # overall mean fallback

    parts = [_dummy_particle([1.0, 0.0], 0, 0.2), _dummy_particle([2.0, 0.0], 0, 0.6),
             _dummy_particle([9.0, 9.0], 1, 0.2)]
    b = _belief_from_particles(parts)
    xi, found = mode_conditioned_state(b, 0)
    assert found
    assert np.allclose(xi, [(0.2 * 1.0 + 0.6 * 2.0) / 0.8, 0.0])


# ---------------------------------------------------------------------------
# particle filter
# ---------------------------------------------------------------------------

def _spring_setup(seed=0, n_particles=200):
    sys = make_spring_hybrid_1d()
    T = TransitionMatrix(np.array([[0.95, 0.05], [0.05, 0.95]]))
    rng = np.random.default_rng(seed)
    belief = HybridBelief.initialize(np.array([0.5, 0.0]), 0.01 * np.eye(2),
                                     np.array([0.9, 0.1]), n_particles, rng)
    return sys, T, belief, rng


def test_pf_identity_transition_keeps_degenerate_mode():
    sys, _, _, rng = _spring_setup()
    T = TransitionMatrix(np.eye(2))
    belief = HybridBelief.initialize(np.array([0.5, 0.0]), 0.01 * np.eye(2),
                                     np.array([1.0, 0.0]), 100, rng)
    us, _ = np.zeros((30, 1)), None
    zs, ys = simulate_hybrid(sys, np.eye(2), np.array([0.5, 0.0]), us, 30, rng, z0=0)
    for y in ys:
        belief = pf_step(belief, sys, T, np.zeros(1), y, rng)
        assert np.allclose(belief.mode_belief_, [1.0, 0.0])
        belief.validate()


def test_pf_tracks_gpb2_enumeration_posterior():
    # module-scale version of the benchmark; the acceptance suite runs the full one
    tvs = []
    for seed in range(5):
        sys, T, belief, rng = _spring_setup(seed=seed, n_particles=500)
        us = 0.2 * np.ones((40, 1))
        zs, ys = simulate_hybrid(sys, T.T, np.array([0.5, 0.0]), us, 40, rng, z0=0)
        oracle = Gpb2Filter(sys, T.T, np.array([0.5, 0.0]), 0.01 * np.eye(2), np.array([0.9, 0.1]))
        for t, y in enumerate(ys):
            belief = pf_step(belief, sys, T, us[t], y, rng)
            pi = oracle.step(us[t], y)
            tvs.append(0.5 * np.abs(belief.mode_belief_ - pi).sum())
    assert np.mean(tvs) < 0.06


def test_pf_detects_contact_transition():
    # stiff contact: argmax of the belief flips within 10 steps of the true switch
    model = RobotModel.point_mass(mass=10.0, dim=2, damping=1.0)
    gains = ImpedanceGains(K_imp=[80.0, 80.0], D_imp=[30.0, 30.0])
    surface = ContactPoint(K=[0.0, 1e4], rest=[0.0, 0.0], attach=[0.0, 0.0])
    modes = [ContactMode(id=0, label="free"), ContactMode(id=1, label="contact", contacts=(surface,))]
    noise = NoiseModel.diagonal(process_std=[1e-4] * 4, measurement_std=[1e-3, 1e-3, 0.05, 0.05])
    dt = 0.01
    sys = RobotHybridSystem(model, modes, gains, noise, dt)
    T = TransitionMatrix(np.array([[0.95, 0.05], [0.05, 0.95]]))

    from contactplan.dynamics import JointState, observe, step

    rng = np.random.default_rng(11)
    st = JointState(np.array([0.0, 0.05]), np.zeros(2))
    belief = HybridBelief.initialize(st.vector, 1e-6 * np.eye(4), np.array([0.95, 0.05]), 300, rng)
    x0 = np.array([0.0, -0.05])  # push down through the surface
    switch_step = None
    detect_step = None
    for t in range(60):
        true_mode = modes[1] if st.q[1] <= 0.0 else modes[0]
        if switch_step is None and true_mode.id == 1:
            switch_step = t
        st = step(st, true_mode, x0, dt, model, gains)
        y = observe(st, true_mode, model, noise=noise, rng=rng)
        belief = pf_step(belief, sys, T, x0, y, rng)
        if switch_step is not None and detect_step is None and np.argmax(belief.mode_belief_) == 1:
            detect_step = t
    assert switch_step is not None
    assert detect_step is not None
    assert detect_step - switch_step <= 10


def test_pf_deterministic_given_seed():
    sys, T, _, _ = _spring_setup()
    rng_data = np.random.default_rng(5)
    us = np.zeros((10, 1))
    _, ys = simulate_hybrid(sys, T.T, np.array([0.5, 0.0]), us, 10, rng_data, z0=0)

    def run():
        rng = np.random.default_rng(42)
        b = HybridBelief.initialize(np.array([0.5, 0.0]), 0.01 * np.eye(2),
                                    np.array([0.9, 0.1]), 64, rng)
        for t in range(10):
            b = pf_step(b, sys, T, us[t], ys[t], rng)
        return b

    b1, b2 = run(), run()
    assert np.array_equal(b1.mus, b2.mus)
    assert np.array_equal(b1.mode_belief_, b2.mode_belief_)
    assert np.array_equal(b1.sampled_modes, b2.sampled_modes)


def test_pf_divergence_flag_on_bad_measurement():
    sys, T, belief, rng = _spring_setup()
    y_bad = np.array([np.nan, np.nan])
    out = pf_step(belief, sys, T, np.zeros(1), y_bad, rng)
    assert out.diverged
    assert np.allclose(out.weights, 1.0 / belief.n_particles)


def test_pf_invariants_after_step():
    sys, T, belief, rng = _spring_setup(n_particles=150)
    us = 0.1 * np.ones((5, 1))
    _, ys = simulate_hybrid(sys, T.T, np.array([0.5, 0.0]), us, 5, rng, z0=0)
    for t in range(5):
        belief = pf_step(belief, sys, T, us[t], ys[t], rng)
        belief.validate()


def test_filter_wrapper_and_dump():
    sys, T, _, rng = _spring_setup()
    f = HybridParticleFilter(sys, T, np.array([0.5, 0.0]), 0.01 * np.eye(2),
                             np.array([0.9, 0.1]), 32, rng)
    us = np.zeros((3, 1))
    _, ys = simulate_hybrid(sys, T.T, np.array([0.5, 0.0]), us, 3, rng, z0=0)
    for t in range(3):
        f.step(us[t], ys[t], rng)
    rows = f.dump_rows(2)
    assert len(rows) == 32
    assert len(rows[0]) == 4 + 2  # step, particle, weight, mode, mu (2-dim)
