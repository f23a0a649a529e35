import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskcbf.dynamics import DynamicsModel
from riskcbf.errors import ConfigurationError, FilterDivergenceError
from riskcbf.estimator import (EkfConfig, EstimatorState, calibrate_epsilon, ekf_init, ekf_step, ekf_step_batch,
                               error_bound_epsilon, kalman_gain, summarize_errors, tolerance_order_statistic)
from riskcbf.scenario import ScenarioConfig, Simulation


def linear_model(A, G):
    A = np.atleast_2d(np.asarray(A, float))
    n = A.shape[0]
    return DynamicsModel(n, 0, drift=lambda x: A @ x, input_map=lambda x: np.zeros((n, 0)), diffusion=G,
                         jacobian=lambda x, u: A)


def test_init_basic_and_rejects_indefinite():
    st0 = ekf_init(np.zeros(2), np.eye(2))
    assert np.array_equal(st0.x_hat, np.zeros(2)) and np.array_equal(st0.P, np.eye(2)) and st0.t == 0.0
    with pytest.raises(ConfigurationError):
        ekf_init(np.zeros(2), np.diag([1.0, -0.1]))


def test_first_observation_init_of_traffic_agents():
    cfg = ScenarioConfig(init_mode="first_observation")
    sim = Simulation(cfg, seed=0)
    R = cfg.D_matrix @ cfg.D_matrix.T
    assert np.allclose(sim.P0[:2, :2], R / cfg.dt)
    assert sim.P0[2, 2] == pytest.approx(0.1)
    assert np.allclose(sim.x_hat[:, 2], cfg.v_d)
    for P in sim.P:
        ekf_init(np.zeros(3), P)


@pytest.mark.parametrize("P,C,R,K", [
    (np.eye(2), np.eye(2), np.eye(2), np.eye(2)),
    (np.eye(2), np.zeros((1, 2)), np.eye(1), np.zeros((2, 1))),
    ([[0.4142]], [[1.0]], [[1.0]], [[0.4142]]),
])
def test_kalman_gain(P, C, R, K):
    assert np.allclose(kalman_gain(P, C, R), K)


def test_kalman_gain_singular_R():
    with pytest.raises(ConfigurationError):
        kalman_gain(np.eye(2), np.eye(2), np.zeros((2, 2)))


def test_open_loop_consistency_without_correction():
    A = np.array([[0.0, 1.0], [-1.0, -0.2]])
    model = linear_model(A, np.zeros((2, 2)))
    cfg = EkfConfig(model, C=[[1.0, 0.0]], Q=np.zeros((2, 2)), R=[[1e12]])
    x = np.array([1.0, 0.0])
    st_ = ekf_init(x, 1e-9 * np.eye(2))
    dt = 0.001
    for _ in range(2000):
        z = np.array([x[0]])
        st_ = ekf_step(st_, cfg, np.zeros(0), z, dt)
        x = x + A @ x * dt
    assert np.allclose(st_.x_hat, x, atol=1e-9)


def test_scalar_riccati_steady_state():
    # dP/dt = -2P + 1 - P^2 has the positive root sqrt(2) - 1
    cfg = EkfConfig(linear_model([[-1.0]], np.eye(1)), C=[[1.0]], Q=[[1.0]], R=[[1.0]])
    st_ = ekf_init([0.0], [[1.0]])
    for _ in range(4000):
        st_ = ekf_step(st_, cfg, np.zeros(0), [0.0], 0.005)
    assert st_.P[0, 0] == pytest.approx(math.sqrt(2) - 1, abs=1e-4)


def kalman_bucy_reference(x, P, A, C, Q, R, z, dt):
    """Plain-loop Euler step of the Kalman-Bucy equations (independent oracle)."""
    n, m = len(x), len(z)
    Rinv = np.linalg.inv(R).tolist()
    K = [[sum(P[i][k] * C[j][k] for k in range(n)) for j in range(m)] for i in range(n)]
    K = [[sum(K[i][k] * Rinv[k][j] for k in range(m)) for j in range(m)] for i in range(n)]
    innov = [z[j] - sum(C[j][k] * x[k] for k in range(n)) for j in range(m)]
    x_new = [x[i] + dt * (sum(A[i][k] * x[k] for k in range(n)) + sum(K[i][j] * innov[j] for j in range(m)))
             for i in range(n)]
    P_new = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            ap = sum(A[i][k] * P[k][j] for k in range(n))
            pa = sum(P[i][k] * A[j][k] for k in range(n))
            kck = sum(K[i][a] * R[a][b] * K[j][b] for a in range(m) for b in range(m))
            P_new[i][j] = P[i][j] + dt * (ap + pa + Q[i][j] - kck)
    P_sym = [[0.5 * (P_new[i][j] + P_new[j][i]) for j in range(n)] for i in range(n)]
    return x_new, P_sym


def test_linear_ekf_matches_kalman_bucy_reference():
    rng = np.random.default_rng(11)
    A = np.array([[0.0, 1.0, 0.0], [-0.5, -0.3, 0.2], [0.0, 0.0, -1.0]])
    G = 0.3 * np.eye(3)
    C = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    D = np.diag([0.2, 0.4])
    Q, R = G @ G.T, D @ D.T
    cfg = EkfConfig(linear_model(A, G), C=C, Q=Q, R=R)
    st_ = ekf_init(rng.normal(size=3), np.eye(3))
    x_ref, P_ref = st_.x_hat.tolist(), st_.P.tolist()
    dt = 0.01
    for _ in range(300):
        z = rng.normal(size=2)
        st_ = ekf_step(st_, cfg, np.zeros(0), z, dt)
        x_ref, P_ref = kalman_bucy_reference(x_ref, P_ref, A.tolist(), C.tolist(), Q.tolist(), R.tolist(),
                                             z.tolist(), dt)
        assert np.max(np.abs(st_.x_hat - x_ref)) <= 1e-10
        assert np.max(np.abs(st_.P - np.array(P_ref))) <= 1e-10


def test_batch_step_matches_single_step():
    rng = np.random.default_rng(2)
    A = np.array([[0.0, 1.0], [-1.0, -0.1]])
    C = np.array([[1.0, 0.0]])
    Q, R = 0.01 * np.eye(2), np.array([[0.04]])
    cfg = EkfConfig(linear_model(A, 0.1 * np.eye(2)), C=C, Q=Q, R=R)
    xs = rng.normal(size=(4, 2))
    Ps = np.stack([np.eye(2) * (i + 1) for i in range(4)])
    z = rng.normal(size=(4, 1))
    xb, Pb, _, ok = ekf_step_batch(xs, Ps, xs @ A.T, np.repeat(A[None], 4, 0), C, np.linalg.inv(R), Q, z, 0.01)
    assert ok.all()
    for i in range(4):
        s = ekf_step(EstimatorState(xs[i], Ps[i]), cfg, np.zeros(0), z[i], 0.01)
        assert np.allclose(s.x_hat, xb[i], atol=1e-14) and np.allclose(s.P, Pb[i], atol=1e-14)


def test_divergence_raises():
    cfg = EkfConfig(linear_model([[-1.0]], np.eye(1)), C=[[1.0]], Q=[[0.0]], R=[[1e-6]])
    with pytest.raises(FilterDivergenceError):
        # huge correction over a large step overshoots P below zero
        ekf_step(ekf_init([0.0], [[1.0]]), cfg, np.zeros(0), [0.0], 0.5)


@pytest.mark.parametrize("args,expected", [((2.0, 2.0, 1.0, 1.0), 1.0), ((4.0, 1.0, 0.1, 0.04), 1.0)])
def test_error_bound_epsilon(args, expected):
    assert error_bound_epsilon(*args) == pytest.approx(expected)


@settings(max_examples=60, deadline=None)
@given(ru=st.floats(1.0, 10.0), rl=st.floats(0.1, 1.0), e0=st.floats(0.01, 1.0),
       p1=st.floats(0.001, 0.5), dp=st.floats(0.01, 0.49))
def test_error_bound_decreases_in_pe(ru, rl, e0, p1, dp):
    assert error_bound_epsilon(ru, rl, e0, p1 + dp) < error_bound_epsilon(ru, rl, e0, p1)


def _tolerance_rank_oracle(n, level, confidence):
    p = Fraction(level).limit_denominator(10 ** 6)
    cdf = Fraction(0)
    for k in range(1, n + 1):
        # X_(k) >= q  iff  fewer than k samples fall below q
        cdf += math.comb(n, k - 1) * p ** (k - 1) * (1 - p) ** (n - k + 1)
        if cdf >= Fraction(confidence).limit_denominator(10 ** 6):
            return k
    return n


@pytest.mark.parametrize("n,level,conf", [(100, 0.9, 0.95), (1500, 0.99, 0.95), (300, 0.5, 0.99), (20, 0.99, 0.95)])
def test_tolerance_order_statistic(n, level, conf):
    assert tolerance_order_statistic(n, level, conf) == _tolerance_rank_oracle(n, level, conf)


def test_summarize_errors_methods():
    sup = np.arange(1, 1001) / 1000.0
    q = summarize_errors(sup, sup, 0.01, method="quantile")
    t = summarize_errors(sup, sup, 0.01, method="tolerance")
    assert q["epsilon"] == pytest.approx(0.991)
    assert t["epsilon"] >= q["epsilon"]
    with pytest.raises(ConfigurationError):
        summarize_errors(sup, sup, 0.01, method="bogus")


def _short(**kw):
    base = dict(duration=0.5, with_ego=False)
    base.update(kw)
    return ScenarioConfig(**base)


def test_calibrate_noiseless_exact_init_is_zero():
    cfg = _short(process_noise_scale=0.0, measurement_noise_scale=0.0, init_noise_scale=0.0)
    rep = calibrate_epsilon(cfg, 0.01, 100)
    assert rep.epsilon <= 1e-12
    assert rep.n_samples == 100 * cfg.n_agents


def test_calibrate_needs_enough_runs():
    with pytest.raises(ConfigurationError):
        calibrate_epsilon(_short(), 0.01, 50)


def test_calibrated_radius_grows_with_measurement_noise():
    base = _short(duration=2.0)
    eps1 = calibrate_epsilon(base, 0.01, 100).epsilon
    eps2 = calibrate_epsilon(base.replace(D=((0.5, 0.0), (0.0, 0.4))), 0.01, 100).epsilon
    assert eps2 > eps1
