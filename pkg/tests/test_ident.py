"""Tests for Kalman smoothing and EM identification of the bHMM."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from evbhmm.bhmm import ModelParams, augment, bhmm_step, mean_rollout, output, template_params
from evbhmm.essm import NOMINAL_STATS, build_essm
from evbhmm.ident import (
    AggregateLog,
    FitAbortedError,
    InsufficientHistoryError,
    LiveFilter,
    PersistentExcitationError,
    TrajectoryDataset,
    build_dataset,
    c1_template,
    e_step,
    elbo,
    em_fit,
    fit_best_of,
    init_params,
    kalman_forward,
    log_likelihood,
    m_step,
    pe_check,
    rts_smoother,
    sufficient_stats,
)
from evbhmm.metrics import compute_metrics


def random_params(n=3, n_input=1, seed=0):
    """Generic well-conditioned LTV model (no eSSM structure)."""
    rng = np.random.default_rng(seed)

    def spd(scale):
        B = rng.normal(size=(n, n))
        return scale * (B @ B.T / n + 0.5 * np.eye(n))

    return ModelParams(
        A=0.5 * rng.normal(size=(n, n)) / np.sqrt(n),
        V=0.2 * rng.normal(size=(n_input, n, n)),
        c1=rng.normal(size=n),
        c0=0.3,
        sigma_w=spd(0.2),
        sigma_v=0.4,
        mu0=rng.normal(size=n),
        sigma0=spd(1.0),
        drift=0.1 * rng.normal(size=(n_input + 1, n)),
    )


def joint_gaussian_posterior(params, u, y):
    """Smoothed moments and marginal likelihood from the stacked Gaussian of (x_0..x_K, y_0..y_K)."""
    n = params.n_state
    K1 = len(y)
    means = [params.mu0]
    covs = [params.sigma0]
    maps = []
    for k in range(K1 - 1):
        a, b = augment(params, u[k])
        maps.append(a)
        means.append(a @ means[-1] + b)
        covs.append(a @ covs[-1] @ a.T + params.sigma_w)

    Sx = np.zeros((n * K1, n * K1))
    for i in range(K1):
        Phi = np.eye(n)
        for j in range(i, K1):
            block = Phi @ covs[i]
            Sx[j * n:(j + 1) * n, i * n:(i + 1) * n] = block
            Sx[i * n:(i + 1) * n, j * n:(j + 1) * n] = block.T
            if j < K1 - 1:
                Phi = maps[j] @ Phi
    m = np.concatenate(means)
    C = np.kron(np.eye(K1), params.c1[None, :])
    Syy = C @ Sx @ C.T + params.sigma_v * np.eye(K1)
    y_mean = params.c0 + C @ m
    gain = Sx @ C.T @ np.linalg.inv(Syy)
    post_mean = m + gain @ (y - y_mean)
    post_cov = Sx - gain @ C @ Sx
    loglik = multivariate_normal(mean=y_mean, cov=Syy).logpdf(y)
    return post_mean.reshape(K1, n), post_cov, loglik


def simulate_dataset(params, n_traj, window, seed=0, cap=0.5, constant=None):
    rng = np.random.default_rng(seed)
    n = params.n_state
    if constant is None:
        inputs = rng.uniform(0.0, cap, size=(n_traj, window, params.n_input))
    else:
        inputs = np.full((n_traj, window, params.n_input), constant)
    outputs = np.empty((n_traj, window + 1))
    chol_w = np.linalg.cholesky(params.sigma_w)
    for i in range(n_traj):
        x = params.mu0 + np.linalg.cholesky(params.sigma0) @ rng.normal(size=n)
        for k in range(window + 1):
            outputs[i, k] = output(params, x) + np.sqrt(params.sigma_v) * rng.normal()
            if k < window:
                x = bhmm_step(params, x, inputs[i, k], chol_w @ rng.normal(size=n))
    return TrajectoryDataset(inputs=inputs, outputs=outputs)


def fleet_params():
    mu0 = np.array([0.4, 0.2, 0.1, 0.05, 0.05, 0.2])
    model = build_essm(NOMINAL_STATS._replace(n_online=100), 1, 15.0)
    return template_params(model, sigma_w=1e-3, sigma_v=1.0, mu0=mu0, sigma0=1e-3)


def test_smoother_matches_joint_gaussian():
    params = random_params(n=3, n_input=1, seed=4)
    dataset = simulate_dataset(params, 1, 5, seed=5)
    u, y = dataset.inputs[0], dataset.outputs[0]
    posterior = rts_smoother(kalman_forward(params, u, y))
    mean, cov, loglik = joint_gaussian_posterior(params, u, y)
    n = 3
    np.testing.assert_allclose(posterior.mu_hat[0], mean, atol=1e-8)
    for k in range(6):
        np.testing.assert_allclose(posterior.sigma_hat[0, k], cov[k * n:(k + 1) * n, k * n:(k + 1) * n], atol=1e-8)
    for k in range(5):
        np.testing.assert_allclose(posterior.cross[0, k], cov[k * n:(k + 1) * n, (k + 1) * n:(k + 2) * n], atol=1e-8)
    assert posterior.loglik[0] == pytest.approx(loglik, abs=1e-8)


def test_log_likelihood_sums_trajectories():
    params = random_params(seed=6)
    dataset = simulate_dataset(params, 4, 6, seed=7)
    expected = sum(joint_gaussian_posterior(params, dataset.inputs[i], dataset.outputs[i])[2] for i in range(4))
    assert log_likelihood(params, dataset) == pytest.approx(expected, abs=1e-7)


def test_threaded_e_step_is_identical():
    params = random_params(seed=8)
    dataset = simulate_dataset(params, 40, 6, seed=9)
    serial = e_step(params, dataset, workers=1)
    threaded = e_step(params, dataset, workers=3)
    np.testing.assert_array_equal(serial.mu_hat, threaded.mu_hat)
    np.testing.assert_array_equal(serial.sigma_hat, threaded.sigma_hat)
    np.testing.assert_array_equal(serial.cross, threaded.cross)
    np.testing.assert_array_equal(serial.loglik, threaded.loglik)


def test_m_step_maximizes_expected_log_likelihood():
    truth = fleet_params()
    dataset = simulate_dataset(truth, 10, 25, seed=10)
    params0 = init_params(dataset, 1, 100, np.random.default_rng(11))
    posteriors = e_step(params0, dataset)
    updated = m_step(posteriors, dataset, params0.c1)
    best = elbo(updated, posteriors, dataset)
    assert best >= elbo(params0, posteriors, dataset)

    rng = np.random.default_rng(12)
    tol = 1e-8 * max(1.0, abs(best))
    scale = 1e-3
    for _ in range(100):
        W = updated.blocks()
        trial = updated.with_blocks(W + scale * np.abs(W).max() * rng.normal(size=W.shape))
        trial.c0 = updated.c0 + scale * max(1.0, abs(updated.c0)) * rng.normal()
        trial.sigma_v = updated.sigma_v * np.exp(scale * rng.normal())
        root = np.linalg.cholesky(updated.sigma_w)
        E = scale * rng.normal(size=root.shape)
        trial.sigma_w = root @ (np.eye(len(root)) + 0.5 * (E + E.T)) @ root.T
        trial.mu0 = updated.mu0 + scale * rng.normal(size=updated.mu0.shape)
        trial.sigma0 = updated.sigma0 * np.exp(scale * rng.normal())
        assert elbo(trial, posteriors, dataset) <= best + tol


def symmetric_from_upper(values, n):
    S = np.zeros((n, n))
    S[np.triu_indices(n)] = values
    return S + S.T - np.diag(np.diag(S))


def pack(params):
    """Flat vector of every parameter the M-step updates."""
    upper = np.triu_indices(params.n_state)
    return np.concatenate([params.blocks().ravel(), [params.c0, params.sigma_v], params.mu0,
                           params.sigma_w[upper], params.sigma0[upper]])


def unpack(base, theta):
    n = base.n_state
    n_w = base.blocks().size
    n_sym = n * (n + 1) // 2
    params = base.with_blocks(theta[:n_w].reshape(n, -1))
    params.c0, params.sigma_v = theta[n_w], theta[n_w + 1]
    rest = theta[n_w + 2:]
    params.mu0 = rest[:n].copy()
    params.sigma_w = symmetric_from_upper(rest[n:n + n_sym], n)
    params.sigma0 = symmetric_from_upper(rest[n + n_sym:], n)
    return params


def test_m_step_output_is_stationary():
    truth = random_params(n=2, n_input=1, seed=23)
    dataset = simulate_dataset(truth, 8, 6, seed=24)
    posteriors = e_step(truth, dataset)
    stats = sufficient_stats(posteriors, dataset)
    updated = m_step(posteriors, dataset, truth.c1)
    theta = pack(updated)
    h = 1e-6
    grad = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        forward = elbo(unpack(updated, theta + step), posteriors, dataset, stats)
        backward = elbo(unpack(updated, theta - step), posteriors, dataset, stats)
        grad[i] = (forward - backward) / (2 * h)
    assert np.linalg.norm(grad) <= 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_em_likelihood_is_nondecreasing(seed):
    truth = fleet_params()
    dataset = simulate_dataset(truth, 20, 30, seed=13 + 100 * seed)
    params0 = init_params(dataset, 1, 100, np.random.default_rng(14 + 100 * seed))
    fitted, report = em_fit(dataset, params0, eps_min=1e-12, n_iter_max=8, pe_threshold=None)
    ll = np.array(report.loglik)
    assert len(ll) == report.iterations + 1
    assert np.all(np.diff(ll) >= -1e-8 * np.maximum(1.0, np.abs(ll[:-1])))
    np.testing.assert_array_equal(fitted.c1, params0.c1)
    assert ll[-1] > ll[0]


def recovery_truth():
    """Stable four-state model with an output offset well away from zero."""
    rng = np.random.default_rng(30)
    Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    return ModelParams(
        A=0.6 * Q,
        V=0.1 * rng.normal(size=(2, 4, 4)),
        c1=rng.normal(size=4),
        c0=20.0,
        sigma_w=0.01 * np.eye(4),
        sigma_v=0.01,
        mu0=rng.normal(size=4),
        sigma0=0.01 * np.eye(4),
        drift=0.1 * rng.normal(size=(3, 4)),
    )


def test_em_recovers_synthetic_model():
    truth = recovery_truth()
    dataset = simulate_dataset(truth, 50, 40, seed=31)
    rng = np.random.default_rng(32)
    params0 = truth.copy()
    params0.A = truth.A + 0.02 * rng.normal(size=truth.A.shape)
    params0.V = truth.V + 0.02 * rng.normal(size=truth.V.shape)
    params0.drift = np.zeros_like(truth.drift)
    params0.sigma_w = 0.1 * np.eye(4)
    params0.sigma_v = 0.1
    params0.mu0 = truth.mu0 + 0.1 * rng.normal(size=4)
    params0.sigma0 = 0.1 * np.eye(4)

    fitted, report = em_fit(dataset, params0, eps_min=1e-6, n_iter_max=200)
    ll = np.array(report.loglik)
    assert np.all(np.diff(ll) >= -1e-8 * np.maximum(1.0, np.abs(ll[:-1])))

    held_out = np.random.default_rng(33).uniform(0.0, 0.5, size=(10, 40, 2))
    actual = np.concatenate([mean_rollout(truth, truth.mu0, u) for u in held_out])
    predicted = np.concatenate([mean_rollout(fitted, fitted.mu0, u) for u in held_out])
    assert compute_metrics(actual, predicted).mape_pct <= 2.0


def test_log_likelihood_invariant_under_similarity_transform():
    params = random_params(n=3, n_input=2, seed=25)
    dataset = simulate_dataset(params, 5, 10, seed=26)
    rng = np.random.default_rng(27)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    T = Q @ np.diag([1.0, 1.5, 2.0])
    assert np.linalg.cond(T) < 3.0
    expected = log_likelihood(params, dataset)
    assert log_likelihood(params.transformed(T), dataset) == pytest.approx(expected, abs=1e-8)


def test_excited_data_passes_persistent_excitation_check():
    truth = fleet_params()
    dataset = simulate_dataset(truth, 20, 30, seed=15)
    assert pe_check(e_step(truth, dataset), dataset) > 1e-8


def test_constant_input_is_not_persistently_exciting():
    truth = fleet_params()
    dataset = simulate_dataset(truth, 20, 30, seed=16, constant=0.2)
    params0 = init_params(dataset, 1, 100, np.random.default_rng(17))
    with pytest.raises(PersistentExcitationError, match="not persistently exciting"):
        em_fit(dataset, params0, n_iter_max=3, pe_threshold=1e-8)


def test_filter_breakdown_aborts_fit_with_partial_report():
    truth = fleet_params()
    dataset = simulate_dataset(truth, 3, 10, seed=18)
    broken = truth.copy()
    broken.sigma_v = 0.0
    broken.sigma0 = np.zeros_like(truth.sigma0)
    with pytest.raises(FitAbortedError, match="E-step failed") as excinfo:
        em_fit(dataset, broken, n_iter_max=3)
    assert excinfo.value.report.loglik == []


def test_init_params_structure():
    truth = fleet_params()
    dataset = simulate_dataset(truth, 5, 10, seed=19)
    params = init_params(dataset, 1, 100, np.random.default_rng(20))
    eta = params.c1[2]
    np.testing.assert_allclose(params.c1, eta * c1_template(1))
    magnitude = np.abs(dataset.outputs)
    assert magnitude.min() - 1e-9 <= eta <= magnitude.max() + 1e-9
    np.testing.assert_allclose(params.A.sum(axis=0), 1.0, atol=1e-12)
    assert params.n_bins == 1


def test_init_params_rejects_wrong_input_dimension():
    dataset = simulate_dataset(random_params(), 2, 4)
    with pytest.raises(ValueError, match="expected 6"):
        init_params(dataset, 1, 100, np.random.default_rng(0))


def test_fit_best_of_keeps_highest_likelihood():
    truth = fleet_params()
    dataset = simulate_dataset(truth, 10, 20, seed=21)
    seeds = np.random.SeedSequence(0).spawn(3)
    _, report = fit_best_of(dataset, 1, 100, seeds, n_iter_max=3, pe_threshold=None)
    assert len(report.restart_logliks) == 3
    assert report.loglik[-1] == pytest.approx(np.nanmax(report.restart_logliks))


def make_logs(n_days, n_steps, seed=0):
    rng = np.random.default_rng(seed)
    return [AggregateLog(inputs=rng.uniform(size=(n_steps, 6)), power=rng.normal(size=n_steps)) for _ in range(n_days)]


def test_build_dataset_uses_latest_days_and_live_window():
    history = make_logs(4, 30, seed=1)
    live = make_logs(1, 25, seed=2)[0]
    dataset = build_dataset(history, live, 20, 10, 3)
    assert dataset.inputs.shape == (3, 10, 6)
    assert dataset.outputs.shape == (3, 11)
    np.testing.assert_array_equal(dataset.outputs[0], history[2].power[10:21])
    np.testing.assert_array_equal(dataset.inputs[-1], live.inputs[10:20])
    np.testing.assert_array_equal(dataset.outputs[-1], live.power[10:21])


def test_build_dataset_errors():
    history = make_logs(2, 30)
    live = make_logs(1, 30, seed=3)[0]
    with pytest.raises(InsufficientHistoryError, match="precedes a full window"):
        build_dataset(history, live, 5, 10, 2)
    with pytest.raises(InsufficientHistoryError, match="historical days"):
        build_dataset(history, live, 20, 10, 5)
    with pytest.raises(InsufficientHistoryError, match="window needs"):
        build_dataset(history, AggregateLog(live.inputs[:15], live.power[:15]), 20, 10, 2)


def test_live_filter_matches_batch_filter():
    truth = fleet_params()
    dataset = simulate_dataset(truth, 1, 12, seed=22)
    u, y = dataset.inputs[0], dataset.outputs[0]
    live = LiveFilter(truth)
    mu = live.reseed(truth, u[:8], y[:9])
    np.testing.assert_allclose(mu, kalman_forward(truth, u[:8], y[:9]).mu_filt[0, -1])
    for k in range(8, 12):
        live.predict(u[k])
        mu = live.update(y[k + 1])
    np.testing.assert_allclose(mu, kalman_forward(truth, u, y).mu_filt[0, -1], rtol=1e-9, atol=1e-12)
