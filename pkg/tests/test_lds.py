import numpy as np
import pytest

from sire.config import EPS_R_REL
from sire.errors import InsufficientHistory
from sire.lds import (
    A,
    C,
    STATE_DIM,
    ModelParams,
    SmoothPass,
    backward_smooth,
    expected_log_likelihood,
    expected_log_likelihood_terms,
    fit_em,
    forward_filter,
    init_params,
    m_step,
    project_psd,
)

N = STATE_DIM


def _prior(params, T):
    """Mean and covariance of x_1..x_T stacked, before any observation."""
    means, covs = [np.asarray(params.mu)], [np.asarray(params.Omega)]
    for _ in range(1, T):
        means.append(A @ means[-1])
        covs.append(A @ covs[-1] @ A.T + params.Q)
    cov = np.zeros((N * T, N * T))
    for t in range(T):
        for s in range(t + 1):
            block = np.linalg.matrix_power(A, t - s) @ covs[s]
            cov[t * N:(t + 1) * N, s * N:(s + 1) * N] = block
            cov[s * N:(s + 1) * N, t * N:(t + 1) * N] = block.T
    return np.concatenate(means), cov


def _posterior(params, y, rows):
    """Condition the stacked prior on the observations listed in `rows`."""
    T = len(y)
    mean, cov = _prior(params, T)
    H = np.kron(np.eye(T), C[None, :])[rows]
    S = H @ cov @ H.T + params.R * np.eye(len(rows))
    gain = np.linalg.solve(S, H @ cov).T
    return mean + gain @ (y[rows] - H @ mean), cov - gain @ H @ cov


def _block(m, t, s=None):
    s = t if s is None else s
    return m[t * N:(t + 1) * N, s * N:(s + 1) * N]


def _simulate(params, T, rng):
    x = rng.multivariate_normal(params.mu, params.Omega)
    ys = []
    for t in range(T):
        if t:
            x = A @ x + rng.multivariate_normal(np.zeros(N), params.Q)
        ys.append(x[0] + rng.normal(0.0, np.sqrt(params.R)))
    return np.array(ys)


def test_system_constants_are_fixed():
    assert A[0].tolist() == [0.0, 1.0, 1.0, 0.5, 1.0]
    assert A[2].tolist() == [0.0, 0.0, 1.0, 1.0, 0.0]
    x = np.arange(5.0)
    assert C @ x == x[0]
    with pytest.raises(ValueError):
        A[0, 0] = 1.0


def test_filter_and_smoother_match_dense_conditioning(random_params):
    rng = np.random.default_rng(0)
    for _ in range(100):
        T = int(rng.integers(2, 6))
        params = random_params(rng)
        y = rng.normal(10.0, 3.0, size=T)
        fp = forward_filter(params, y)
        sp = backward_smooth(fp, params)
        for t in range(T):
            mean, cov = _posterior(params, y, list(range(t + 1)))
            np.testing.assert_allclose(fp.x_filt[t], mean[t * N:(t + 1) * N], rtol=1e-8, atol=1e-8)
            np.testing.assert_allclose(fp.P_filt[t], _block(cov, t), rtol=1e-8, atol=1e-8)
        mean, cov = _posterior(params, y, list(range(T)))
        for t in range(T):
            np.testing.assert_allclose(sp.x_smooth[t], mean[t * N:(t + 1) * N], rtol=1e-8, atol=1e-8)
            np.testing.assert_allclose(sp.P_smooth[t], _block(cov, t), rtol=1e-8, atol=1e-8)
            if t:
                np.testing.assert_allclose(sp.P_cross[t], _block(cov, t, t - 1), rtol=1e-8, atol=1e-8)


def test_cross_covariance_recursion_matches_gain_identity(random_params):
    rng = np.random.default_rng(1)
    params = random_params(rng)
    sp = backward_smooth(forward_filter(params, rng.normal(10.0, 3.0, size=8)))
    for t in range(1, 8):
        np.testing.assert_allclose(sp.P_cross[t], sp.P_smooth[t] @ sp.J[t - 1].T, rtol=1e-8, atol=1e-10)


def test_missing_observation_only_predicts(random_params):
    rng = np.random.default_rng(2)
    params = random_params(rng)
    y = np.array([9.0, np.nan, 11.0, 12.5])
    fp = forward_filter(params, y)
    assert not fp.K[1].any()
    np.testing.assert_array_equal(fp.x_filt[1], fp.x_pred[1])
    assert fp.observed.tolist() == [True, False, True, True]
    mean, _ = _posterior(params, y, [0, 2, 3])
    np.testing.assert_allclose(backward_smooth(fp).x_smooth[1], mean[N:2 * N], rtol=1e-8, atol=1e-8)


def test_gain_limits(random_params):
    rng = np.random.default_rng(3)
    base = random_params(rng)
    y = np.array([15.0, 16.0, 18.0])
    deaf = forward_filter(ModelParams(base.Q, 1e12, base.mu, base.Omega), y)
    np.testing.assert_allclose(deaf.x_filt, deaf.x_pred, atol=1e-8)
    sharp = forward_filter(ModelParams(base.Q, 1e-12, base.mu, base.Omega), y)
    assert sharp.x_filt[0, 0] == pytest.approx(y[0], abs=1e-8)


def test_smoother_anchor_and_contraction(random_params):
    rng = np.random.default_rng(4)
    for _ in range(100):
        params = random_params(rng)
        fp = forward_filter(params, rng.normal(10.0, 3.0, size=int(rng.integers(1, 7))))
        sp = backward_smooth(fp)
        np.testing.assert_array_equal(sp.x_smooth[-1], fp.x_filt[-1])
        np.testing.assert_array_equal(sp.P_smooth[-1], fp.P_filt[-1])
        for t in range(len(fp)):
            assert np.linalg.eigvalsh(fp.P_filt[t] - sp.P_smooth[t]).min() >= -1e-8
            np.testing.assert_allclose(sp.P_smooth[t], sp.P_smooth[t].T, atol=1e-10)


def test_second_moments_add_the_mean_outer_product(random_params):
    rng = np.random.default_rng(5)
    sp = backward_smooth(forward_filter(random_params(rng), rng.normal(10.0, 3.0, size=4)))
    t = 2
    np.testing.assert_allclose(sp.second_moment[t], sp.P_smooth[t] + np.outer(sp.x_smooth[t], sp.x_smooth[t]))
    np.testing.assert_allclose(
        sp.cross_moment[t], sp.P_cross[t] + np.outer(sp.x_smooth[t], sp.x_smooth[t - 1])
    )


def test_init_params_example():
    params = init_params([10.0, 12.0, 15.0], [12.5, 15.5])
    np.testing.assert_allclose(params.mu, [10.5, 10.0, 2.0, 0.5, 0.5])
    np.testing.assert_array_equal(params.Q, np.eye(N))
    np.testing.assert_array_equal(params.Omega, np.eye(N))
    assert params.R == 1.0


def test_init_params_zero_error_and_missing_measurements():
    params = init_params([10.0, 12.0, 15.0], [12.0, 15.0])
    assert params.mu[0] == 10.0 and params.mu[4] == 0.0
    params = init_params([10.0, 12.0, 15.0], [np.nan, np.nan])
    assert params.mu[4] == 0.0


def test_init_params_needs_three_points():
    with pytest.raises(InsufficientHistory):
        init_params([10.0, 12.0], [12.0])


def test_m_step_initial_covariance_is_the_smoothed_one(random_params):
    rng = np.random.default_rng(6)
    params = random_params(rng)
    y = rng.normal(10.0, 3.0, size=6)
    sp = backward_smooth(forward_filter(params, y))
    new = m_step(sp, y, params)
    np.testing.assert_allclose(new.Omega, sp.P_smooth[0], rtol=1e-9, atol=1e-12)
    np.testing.assert_array_equal(new.mu, sp.x_smooth[0])
    np.testing.assert_allclose(new.Q, new.Q.T, atol=1e-12)
    assert np.linalg.eigvalsh(new.Q).min() >= -1e-8


def test_m_step_floors_r_on_zero_residuals():
    rng = np.random.default_rng(7)
    y = np.array([10.0, 11.0, 12.0])
    x = rng.normal(size=(3, N))
    x[:, 0] = y
    sp = SmoothPass(
        J=np.zeros((2, N, N)), x_smooth=x, P_smooth=np.zeros((3, N, N)), P_cross=np.zeros((3, N, N))
    )
    assert m_step(sp, y).R == pytest.approx(EPS_R_REL * 11.0 ** 2)


def test_m_step_keeps_q_for_a_single_step(random_params):
    rng = np.random.default_rng(8)
    params = random_params(rng)
    y = np.array([10.0])
    new = m_step(backward_smooth(forward_filter(params, y)), y, params)
    np.testing.assert_array_equal(new.Q, params.Q)


def _dense_expected_log_likelihood(params, y, mean, cov):
    """Expected complete-data log-likelihood from the joint posterior of all states."""
    T = len(y)
    m = [mean[t * N:(t + 1) * N] for t in range(T)]
    meas = sum((y[t] - m[t][0]) ** 2 + _block(cov, t)[0, 0] for t in range(T))
    total = -0.5 * meas / params.R - 0.5 * T * np.log(params.R)
    Q_inv = np.linalg.inv(params.Q)
    D = np.hstack([np.eye(N), -A])
    for t in range(1, T):
        pair_mean = np.concatenate([m[t], m[t - 1]])
        pair_cov = np.block([[_block(cov, t), _block(cov, t, t - 1)], [_block(cov, t - 1, t), _block(cov, t - 1)]])
        second = D @ (pair_cov + np.outer(pair_mean, pair_mean)) @ D.T
        total += -0.5 * np.trace(Q_inv @ second)
    total -= 0.5 * (T - 1) * np.linalg.slogdet(params.Q)[1]
    dx = m[0] - params.mu
    total += -0.5 * np.trace(np.linalg.inv(params.Omega) @ (_block(cov, 0) + np.outer(dx, dx)))
    total -= 0.5 * np.linalg.slogdet(params.Omega)[1]
    return total


def _moments_as_joint(sp):
    """Pack smoother moments into the block layout the dense evaluator reads."""
    T = len(sp)
    cov = np.zeros((N * T, N * T))
    for t in range(T):
        cov[t * N:(t + 1) * N, t * N:(t + 1) * N] = sp.P_smooth[t]
        if t:
            cov[t * N:(t + 1) * N, (t - 1) * N:t * N] = sp.P_cross[t]
            cov[(t - 1) * N:t * N, t * N:(t + 1) * N] = sp.P_cross[t].T
    return sp.x_smooth.reshape(-1), cov


def test_expected_log_likelihood_matches_dense_evaluation(random_params):
    rng = np.random.default_rng(9)
    for _ in range(10):
        params = random_params(rng)
        y = rng.normal(10.0, 3.0, size=4)
        sp = backward_smooth(forward_filter(params, y))
        value = expected_log_likelihood(params, sp, y)
        mean, cov = _moments_as_joint(sp)
        assert value == pytest.approx(_dense_expected_log_likelihood(params, y, mean, cov), rel=1e-10)
        mean, cov = _posterior(params, y, list(range(4)))
        assert value == pytest.approx(_dense_expected_log_likelihood(params, y, mean, cov), rel=1e-8)


def test_doubling_r_shifts_the_measurement_term(random_params):
    rng = np.random.default_rng(10)
    params = random_params(rng)
    y = rng.normal(10.0, 3.0, size=5)
    sp = backward_smooth(forward_filter(params, y))
    doubled = ModelParams(params.Q, 2 * params.R, params.mu, params.Omega)
    before = expected_log_likelihood_terms(params, sp, y)
    after = expected_log_likelihood_terms(doubled, sp, y)
    s = np.sum((y - sp.x_smooth[:, 0]) ** 2 + sp.P_smooth[:, 0, 0])
    expected = 0.25 * s / params.R - 0.5 * len(y) * np.log(2.0)
    assert after["measurement"] - before["measurement"] == pytest.approx(expected, rel=1e-10)
    assert after["state"] == before["state"]
    assert after["initial"] == before["initial"]


def test_single_step_has_no_state_term(random_params):
    rng = np.random.default_rng(11)
    params = random_params(rng)
    y = np.array([10.0])
    terms = expected_log_likelihood_terms(params, backward_smooth(forward_filter(params, y)), y)
    assert terms["state"] == 0.0


def test_em_log_likelihood_never_decreases(random_params):
    rng = np.random.default_rng(12)
    for _ in range(20):
        truth = random_params(rng)
        y = _simulate(truth, 24, rng)
        start = ModelParams(np.eye(N), 1.0, np.array([y[0], y[0], 0.0, 0.0, 0.0]), 10.0 * np.eye(N))
        fit = fit_em(y, start, iterations=10)
        assert len(fit.loglik_history) == 11
        assert np.diff(fit.loglik_history).min() >= -1e-6


def test_zero_iterations_return_init(random_params):
    rng = np.random.default_rng(13)
    params = random_params(rng)
    y = rng.normal(10.0, 3.0, size=6)
    fit = fit_em(y, params, iterations=0)
    assert fit.params is params
    assert len(fit.loglik_history) == 1
    np.testing.assert_array_equal(fit.filtered.x_filt, forward_filter(params, y).x_filt)


def test_em_is_deterministic(random_params):
    rng = np.random.default_rng(14)
    params = random_params(rng)
    y = rng.normal(10.0, 3.0, size=12)
    a, b = fit_em(y, params, 5), fit_em(y, params, 5)
    np.testing.assert_array_equal(a.params.Q, b.params.Q)
    assert a.loglik_history == b.loglik_history


def test_all_missing_skips_em(random_params):
    params = random_params(np.random.default_rng(15))
    fit = fit_em(np.full(4, np.nan), params, iterations=10)
    assert fit.params is params
    assert fit.filtered.loglik == 0.0


@pytest.mark.slow
def test_em_recovers_white_noise_level():
    # Q[0, 0] and R both enter y as white noise; only their sum is identified.
    rng = np.random.default_rng(16)
    truth = ModelParams(
        Q=np.diag([0.5, 0.05, 0.001, 1e-5, 1e-4]),
        R=0.5,
        mu=np.array([100.0, 100.0, 1.0, 0.0, 0.0]),
        Omega=0.01 * np.eye(N),
    )
    y = _simulate(truth, 200, rng)
    start = ModelParams(0.1 * np.eye(N), 1.0, np.array([y[0], y[0], 0.0, 0.0, 0.0]), np.eye(N))
    fit = fit_em(y, start, iterations=25)
    recovered = fit.params.R + fit.params.Q[0, 0]
    assert recovered == pytest.approx(truth.R + truth.Q[0, 0], rel=0.3)


def test_project_psd_and_params_serialization():
    m = np.array([[1.0, 2.0], [2.0, 1.0]])
    assert np.linalg.eigvalsh(project_psd(m)).min() >= 0
    params = ModelParams(np.eye(N), 2.0, np.arange(5.0), 3 * np.eye(N))
    back = ModelParams.from_dict(params.to_dict())
    np.testing.assert_array_equal(back.Q, params.Q)
    assert back.R == 2.0
