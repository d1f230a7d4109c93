"""Tests for the single-step MPC broadcast solver."""

import itertools

import numpy as np
import pytest

from evbhmm.bhmm import flexibility_rollout, template_params
from evbhmm.control.mpc import linearize, mpc_solve
from evbhmm.essm import NOMINAL_STATS, build_essm
from evbhmm.models import RegulationConfig

WIDE_BAND = (-1e9, 1e9)


def make_problem(seed=0, n_bins=1):
    params = template_params(build_essm(NOMINAL_STATS._replace(n_online=100), n_bins, 15.0))
    x = np.random.default_rng(seed).uniform(0.1, 1.0, size=params.n_state)
    return params, x / x.sum()


def objective(p0, g, u, p_ref, band, config):
    """Vectorized objective over rows of ``u``."""
    p = p0 + u @ g
    lower, upper = band
    violation = np.maximum(0.0, p - upper) + np.maximum(0.0, lower - p)
    return config.q_w * (p - p_ref) ** 2 + config.r_w * np.sum(u**2, axis=-1) + config.band_penalty * violation**2


def test_reference_at_free_prediction_gives_zero_input():
    params, mu = make_problem()
    p0, _ = linearize(params, mu)
    solution = mpc_solve(params, mu, p0, WIDE_BAND, RegulationConfig())
    assert np.linalg.norm(solution.u) <= 1e-3
    assert solution.kkt_residual <= 1e-6


def test_unreachable_reference_saturates():
    params, mu = make_problem(seed=1)
    p0, g = linearize(params, mu)
    p_ref = p0 + np.maximum(g, 0.0).sum() + 1000.0
    solution = mpc_solve(params, mu, p_ref, WIDE_BAND, RegulationConfig())
    assert np.all(solution.u[g > 1e-9] >= 1.0 - 1e-6)
    assert np.all(solution.u[g < -1e-9] <= 1e-6)


@pytest.mark.parametrize("fraction", [0.15, 0.5, 0.85])
def test_solution_beats_grid_search(fraction):
    config = RegulationConfig()
    params, mu = make_problem(seed=2)
    p0, g = linearize(params, mu)
    p_min, p_max = p0 + np.minimum(g, 0.0).sum(), p0 + np.maximum(g, 0.0).sum()
    p_ref = p_min + fraction * (p_max - p_min)
    upper, lower = flexibility_rollout(params, mu, 1)
    band = (float(lower[0]), float(upper[0]))
    solution = mpc_solve(params, mu, p_ref, band, config)

    levels = np.linspace(0.0, 1.0, 9)
    grid = np.array(list(itertools.product(levels, repeat=len(g))))
    samples = np.random.default_rng(3).uniform(size=(20000, len(g)))
    candidates = np.vstack([grid, samples])
    best = float(objective(p0, g, candidates, p_ref, band, config).min())
    assert solution.objective <= best + 1e-9 * max(1.0, abs(best))
    assert solution.kkt_residual <= 1e-6
    assert np.all((solution.u >= 0.0) & (solution.u <= 1.0))


def test_predicted_power_is_affine_in_input():
    params, mu = make_problem(seed=4, n_bins=3)
    p0, g = linearize(params, mu)
    u = np.random.default_rng(5).uniform(size=params.n_input)
    x_next = (params.A + np.tensordot(u, params.V, axes=1)) @ mu
    assert p0 + g @ u == pytest.approx(params.c1 @ x_next)


def test_band_violation_flagged():
    params, mu = make_problem(seed=6)
    p0, g = linearize(params, mu)
    band = (p0 - 1.0, p0 + 1.0)
    solution = mpc_solve(params, mu, p0 + 1e6, band, RegulationConfig())
    assert solution.band_violated
    assert band[1] < solution.predicted_power < band[1] + 10.0
