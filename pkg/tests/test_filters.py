import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from boosted_ukf.dynamics import TorqueProfile
from boosted_ukf.filters import (
    QUAT,
    THETA,
    EnsembleCollapse,
    FilterBelief,
    RigidBodyProcess,
    UtParams,
    ekf_step,
    enkf_step,
    measure_state,
    numerical_jacobian,
    prior_to_theta,
    sigma_points,
    theta_map,
    theta_unmap,
    ukf_predict,
    ukf_update,
    unscented_moments,
)
from boosted_ukf.dynamics import InertiaTriple
from boosted_ukf.numerics import DecompositionError, NumericalDivergence, RngStream
from kalman_oracle import LinearSystem, kf_predict, kf_update


def random_belief(seed, n):
    r = RngStream(seed)
    A = r.normal((n, n))
    return FilterBelief(r.spawn(1).normal(n), A @ A.T / n + 0.1 * np.eye(n))


# -- unscented transform -----------------------------------------------------

@given(st.integers(1, 12), st.floats(1e-4, 2.0), st.floats(0.0, 3.0), st.floats(0.0, 2.0))
def test_ut_weight_identities(n, alpha, beta, kappa):
    ut = UtParams(n, alpha, beta, kappa)
    assert abs(ut.Wm.sum() - 1.0) < 1e-12 * max(1.0, abs(ut.Wm[0]))
    assert np.array_equal(ut.Wm[1:], ut.Wc[1:])
    assert np.all(ut.Wm[1:] == 1.0 / (2 * (n + ut.lam)))
    assert np.isclose(ut.Wc[0], ut.Wm[0] + 1 - alpha ** 2 + beta, rtol=1e-14, atol=1e-12)


def test_sigma_points_hand_example():
    ut = UtParams(1, alpha=1.0, beta=0.0, kappa=0.0)
    X = sigma_points(FilterBelief(np.zeros(1), np.array([[4.0]])), ut)
    assert np.array_equal(X[:, 0], [0.0, 2.0, -2.0])
    assert np.array_equal(ut.Wm, [0.0, 0.5, 0.5])


@given(st.integers(0, 2**32), st.integers(1, 8), st.sampled_from([1e-3, 0.5, 1.0]))
def test_sigma_point_moments(seed, n, alpha):
    b = random_belief(seed, n)
    ut = UtParams(n, alpha, beta=0.0)
    X = sigma_points(b, ut)
    assert X.shape == (2 * n + 1, n)
    assert np.array_equal(X[0], b.mean)
    mean, cov = unscented_moments(X, ut)
    scale = np.abs(b.mean).max() + 1
    assert np.allclose(mean, b.mean, atol=1e-14 * scale / alpha ** 2)
    if alpha == 1.0:
        assert np.allclose(cov, b.cov, atol=1e-10)


def test_sigma_points_jitter_retry_then_error():
    ut = UtParams(2)
    # PSD but singular: rescued by the jitter retry
    X = sigma_points(FilterBelief(np.zeros(2), np.array([[1.0, 1.0], [1.0, 1.0]])), ut)
    assert np.all(np.isfinite(X))
    with pytest.raises(DecompositionError):
        sigma_points(FilterBelief(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]])), ut)


# -- UKF predict / update ----------------------------------------------------

def test_predict_identity_process():
    b = random_belief(1, 5)
    ident = lambda X, t, dt: X.copy()
    for alpha in (1.0, 1e-3):
        pred = ukf_predict(b, UtParams(5, alpha), ident, 0.0, 0.1, np.zeros((5, 5)))
        assert np.allclose(pred.belief.mean, b.mean, rtol=0, atol=1e-12)
        assert np.allclose(pred.belief.cov, b.cov, atol=1e-10)


@given(st.integers(0, 2**32))
def test_predict_linear_matches_kalman(seed):
    sysm = LinearSystem(seed, steps=1)
    b = FilterBelief(sysm.m0, sysm.P0 + 0.1 * np.eye(4))
    pred = ukf_predict(b, UtParams(4), sysm.process, 0.0, 1.0, sysm.Q)
    m, P = kf_predict(b.mean, b.cov, sysm.A, sysm.Q)
    assert np.allclose(pred.belief.mean, m, atol=1e-8)
    assert np.allclose(pred.belief.cov, P, atol=1e-8)


def test_predict_zero_torque_rest_keeps_parameters():
    ut = UtParams(10)
    mean = np.concatenate([[1.0, 0, 0, 0], np.zeros(3), np.log([100.0, 80.0, 70.0])])
    cov = np.diag([1e-3] * 4 + [1e-2] * 3 + [0.05] * 3)
    pred = ukf_predict(FilterBelief(mean, cov), ut, RigidBodyProcess(TorqueProfile("zero")),
                       0.0, 0.01, np.zeros((10, 10)), quat=QUAT)
    assert np.allclose(pred.belief.mean[THETA], mean[THETA], rtol=0, atol=1e-12)
    assert abs(np.linalg.norm(pred.belief.mean[QUAT]) - 1) < 1e-15


def test_predict_divergence():
    b = random_belief(2, 3)
    bad = lambda X, t, dt: X * np.nan
    with pytest.raises(NumericalDivergence):
        ukf_predict(b, UtParams(3), bad, 0.0, 0.1, np.zeros((3, 3)))


def test_update_zero_innovation():
    sysm = LinearSystem(3, steps=1)
    b = FilterBelief(sysm.m0, sysm.P0)
    ut = UtParams(4)
    pred = ukf_predict(b, ut, sysm.process, 0.0, 1.0, sysm.Q)
    zhat = unscented_moments(sysm.h(pred.sigmas), ut)[0]
    post, innov = ukf_update(pred, zhat, sysm.h, sysm.R, ut)
    assert np.array_equal(post.mean, pred.belief.mean)
    assert np.trace(post.cov) < np.trace(pred.belief.cov)
    assert np.array_equal(innov, np.zeros(3))


def test_update_uninformative_measurement():
    sysm = LinearSystem(4, steps=1)
    ut = UtParams(4)
    pred = ukf_predict(FilterBelief(sysm.m0, sysm.P0), ut, sysm.process, 0.0, 1.0, sysm.Q)
    post, _ = ukf_update(pred, sysm.z[0], sysm.h, 1e12 * np.eye(3), ut)
    assert np.allclose(post.mean, pred.belief.mean, rtol=1e-6, atol=1e-6 * np.abs(pred.belief.mean).max())
    assert np.allclose(post.cov, pred.belief.cov, rtol=1e-6, atol=1e-6 * np.abs(pred.belief.cov).max())


@given(st.integers(0, 2**32), st.booleans())
def test_update_linear_matches_kalman(seed, with_q):
    sysm = LinearSystem(seed, steps=1)
    ut = UtParams(4)
    # the propagated points carry no Q, so exactness needs Q = 0 or a redraw
    Q = sysm.Q if with_q else np.zeros((4, 4))
    pred = ukf_predict(FilterBelief(sysm.m0, sysm.P0), ut, sysm.process, 0.0, 1.0, Q)
    post, _ = ukf_update(pred, sysm.z[0], sysm.h, sysm.R, ut, redraw=with_q)
    m, P = kf_update(pred.belief.mean, pred.belief.cov, sysm.z[0], sysm.H, sysm.R)
    assert np.allclose(post.mean, m, atol=1e-8)
    assert np.allclose(post.cov, P, atol=1e-8)
    assert np.array_equal(post.cov, post.cov.T)


@given(st.integers(0, 2**32))
def test_zero_innovation_full_rank_trace_never_increases(seed):
    r = RngStream(seed)
    n = 4
    b = random_belief(seed, n)
    H = r.normal((n, n)) + 3 * np.eye(n)
    R = np.diag(0.1 + r.spawn(1).uniform(n))
    ut = UtParams(n)
    pred = ukf_predict(b, ut, lambda X, t, dt: X.copy(), 0, 1, np.zeros((n, n)))
    h = lambda X: np.atleast_2d(X) @ H.T
    zhat = unscented_moments(h(pred.sigmas), ut)[0]
    post, _ = ukf_update(pred, zhat, h, R, ut)
    assert np.trace(post.cov) <= np.trace(pred.belief.cov)


def run_linear(sysm, kind, rng=None, N=5000, redraw=True):
    ut = UtParams(4)
    b = FilterBelief(sysm.m0.copy(), sysm.P0.copy())
    if kind == "enkf":
        from boosted_ukf.numerics import gaussian_sample
        E = gaussian_sample(rng.spawn(0), b.mean, b.cov, N)
    out = []
    for k, z in enumerate(sysm.z):
        if kind == "ukf":
            pred = ukf_predict(b, ut, sysm.process, 0, 1, sysm.Q)
            b, _ = ukf_update(pred, z, sysm.h, sysm.R, ut, redraw=redraw)
        elif kind == "ekf":
            b, _ = ekf_step(b, z, sysm.process, sysm.h, 0, 1, sysm.Q, sysm.R)
        else:
            E, _ = enkf_step(E, z, sysm.process, sysm.h, 0, 1, sysm.Q, sysm.R, rng.spawn(1, k))
            b = FilterBelief(E.mean(axis=0), np.cov(E, rowvar=False))
        out.append((b.mean, b.cov))
    return out


def test_ukf_without_redraw_is_kalman_with_zero_q():
    sysm = LinearSystem(22)
    sysm.Q = np.zeros((4, 4))
    ref = sysm.kalman()
    got = run_linear(sysm, "ukf", redraw=False)
    err = max(max(np.abs(m - mr).max(), np.abs(P - Pr).max()) for (m, P), (mr, Pr) in zip(got, ref))
    assert err < 1e-6


def test_enkf_approaches_kalman():
    sysm = LinearSystem(23, steps=10)
    N = 5000
    (m, P), (mr, Pr) = run_linear(sysm, "enkf", RngStream(1), N=N)[-1], sysm.kalman()[-1]
    sd = np.sqrt(np.diag(Pr))
    assert np.all(np.abs(m - mr) < 5 * sd / np.sqrt(N) + 1e-12)
    assert np.all(np.abs(P - Pr) < 5 * np.sqrt(2) * np.outer(sd, sd) / np.sqrt(N))


@pytest.mark.parametrize("kind", ["ukf", "ekf"])
def test_linear_equivalence_100_steps(kind):
    sysm = LinearSystem(21)
    ref = sysm.kalman()
    got = run_linear(sysm, kind)
    err = max(max(np.abs(m - mr).max(), np.abs(P - Pr).max()) for (m, P), (mr, Pr) in zip(got, ref))
    assert err < 1e-6


def test_ekf_zero_innovation_and_jacobian_richardson():
    sysm = LinearSystem(5, steps=1)
    b = FilterBelief(sysm.m0, sysm.P0)
    from boosted_ukf.filters import ekf_predict, ekf_update
    pred = ekf_predict(b, sysm.process, 0, 1, sysm.Q)
    post, innov = ekf_update(pred, sysm.h(pred.mean)[0], sysm.h, sysm.R)
    assert np.array_equal(post.mean, pred.mean)
    # Jacobian of the nonlinear RK4 rigid-body map with steps h and 2h
    proc = RigidBodyProcess(TorqueProfile("full"))
    x = np.concatenate([[0.9, 0.1, -0.3, 0.2], [0.1, -0.2, 0.15], np.log([100.0, 80.0, 70.0])])
    x[QUAT] /= np.linalg.norm(x[QUAT])
    f = lambda X: proc(X, 3.0, 0.01)
    J1 = numerical_jacobian(f, x, 1e-6)
    J2 = numerical_jacobian(f, x, 2e-6)
    assert np.max(np.abs(J1 - J2)) < 1e-6 * max(1.0, np.abs(J1).max())
    assert np.allclose(J1[THETA, THETA], np.eye(3), atol=1e-9)


def test_enkf_identical_members_stay_identical():
    sysm = LinearSystem(6, steps=3)
    E = np.tile(sysm.m0, (10, 1))
    for k, z in enumerate(sysm.z):
        E, _ = enkf_step(E, z, sysm.process, sysm.h, 0, 1, np.zeros((4, 4)), np.zeros((3, 3)),
                         RngStream(k), min_spread=0.0)
    assert np.all(E == E[0])
    with pytest.raises(EnsembleCollapse):
        enkf_step(np.tile(sysm.m0, (10, 1)), sysm.z[0], sysm.process, sysm.h, 0, 1,
                  np.zeros((4, 4)), sysm.R, RngStream(0))
    with pytest.raises(ValueError):
        enkf_step(sysm.m0[None], sysm.z[0], sysm.process, sysm.h, 0, 1, sysm.Q, sysm.R, RngStream(0))


def test_enkf_deterministic():
    sysm = LinearSystem(7, steps=5)
    a = run_linear(sysm, "enkf", RngStream(3), N=50)
    b = run_linear(sysm, "enkf", RngStream(3), N=50)
    assert np.array_equal(a[-1][0], b[-1][0]) and np.array_equal(a[-1][1], b[-1][1])


def test_enkf_quaternion_members_renormalized():
    proc = RigidBodyProcess(TorqueProfile("full"))
    r = RngStream(8)
    E = np.concatenate([np.tile([1.0, 0, 0, 0, 0.1, 0.1, 0.1], (20, 1)),
                        np.tile(np.log([100.0, 80.0, 70.0]), (20, 1))], axis=1)
    E = E + 0.01 * r.normal(E.shape)
    z = np.array([1.0, 0, 0, 0, 0.1, 0.1, 0.1])
    E2, _ = enkf_step(E, z, proc, measure_state, 0.0, 0.01, 1e-7 * np.eye(10), 2.5e-5 * np.eye(7),
                      r.spawn(1), quat=QUAT)
    assert np.allclose(np.linalg.norm(E2[:, QUAT], axis=1), 1.0, atol=1e-15)


# -- theta mapping -----------------------------------------------------------

def test_theta_map_examples():
    assert np.array_equal(theta_map(InertiaTriple(1.0, 1.0, 1.0)), np.zeros(3))
    with pytest.raises(ValueError):
        theta_map([1.0, -1.0, 1.0])
    with pytest.raises(ValueError):
        theta_unmap([np.inf, 0, 0])


@given(st.lists(st.floats(1e-3, 1e6), min_size=3, max_size=3))
def test_theta_round_trip(J):
    J = np.array(J)
    assert np.allclose(theta_unmap(theta_map(J)), J, rtol=1e-12, atol=0)


def test_prior_to_theta_mean_shift():
    mu = np.array([140.0, 20.0, 36.0])
    prior = prior_to_theta(mu, np.diag([1700.0, 20.0, 120.0]), UtParams(10))
    back = theta_unmap(prior.mean)
    assert np.all(np.abs(back / mu - 1) < 0.10)
    # second-order lognormal shift: E[ln J] ~ ln mu - var / (2 mu^2)
    approx = np.log(mu) - np.array([1700.0, 20.0, 120.0]) / (2 * mu ** 2)
    assert np.allclose(prior.mean, approx, atol=2e-3)
    assert np.all(np.linalg.eigvalsh(prior.cov) > 0)
