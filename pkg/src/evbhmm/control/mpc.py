"""Single-step MPC: pick the broadcast u in [0,1]^Nu tracking a power reference.

With one-step control horizon the predicted power is affine in u,

    P(u) = p0 + g . u,   p0 = c0 + c1 (A mu + d_0),   g_j = c1 (V_j mu + d_j),

and the objective q (P - P_ref)^2 + r |u|^2 plus a quadratic penalty outside the flexibility
band is a box-constrained convex QP whose curvature is rank one plus r I.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ..bhmm import ModelParams
from ..models import RegulationConfig

logger = logging.getLogger(__name__)


@dataclass
class MpcSolution:
    u: np.ndarray
    objective: float
    predicted_power: float
    kkt_residual: float
    band_violated: bool
    iterations: int


@dataclass
class _TrackingProblem:
    p0: float
    g: np.ndarray
    p_ref: float
    lower: float
    upper: float
    q: float
    r: float
    rho: float

    def power(self, u: np.ndarray) -> float:
        return self.p0 + float(self.g @ u)

    def dh(self, p: float) -> float:
        """Derivative of the power-dependent part of the objective."""
        excess = max(0.0, p - self.upper) - max(0.0, self.lower - p)
        return 2.0 * self.q * (p - self.p_ref) + 2.0 * self.rho * excess

    def objective(self, u: np.ndarray) -> float:
        p = self.power(u)
        violation = max(0.0, p - self.upper) + max(0.0, self.lower - p)
        return self.q * (p - self.p_ref) ** 2 + self.r * float(u @ u) + self.rho * violation ** 2

    def gradient(self, u: np.ndarray) -> np.ndarray:
        return self.dh(self.power(u)) * self.g + 2.0 * self.r * u


def linearize(params: ModelParams, mu: np.ndarray) -> Tuple[float, np.ndarray]:
    """(p0, g) of the one-step power prediction from state estimate ``mu``."""
    mu = np.asarray(mu, dtype=float)
    p0 = params.c0 + float(params.c1 @ (params.A @ mu + params.drift[0]))
    g = (params.V @ mu + params.drift[1:]) @ params.c1
    return p0, g


def _box_projection(u: np.ndarray) -> np.ndarray:
    return np.clip(u, 0.0, 1.0)


def kkt_residual(problem: _TrackingProblem, u: np.ndarray) -> float:
    """Norm of the projected-gradient step, zero exactly at box-KKT points."""
    return float(np.linalg.norm(u - _box_projection(u - problem.gradient(u))))


def _ridge_solution(problem: _TrackingProblem) -> np.ndarray:
    """Exact minimizer from the scalar optimality condition theta = h'(p0 + g . u(theta)).

    u(theta) = clip(-theta g / 2r, 0, 1) makes p nonincreasing in theta while h' is
    nondecreasing in p, so the root is unique and bracketed by h' at the box extremes.
    """
    g, r = problem.g, problem.r

    def u_of(theta: float) -> np.ndarray:
        return _box_projection(-theta * g / (2.0 * r))

    p_min = problem.p0 + float(np.minimum(g, 0.0).sum())
    p_max = problem.p0 + float(np.maximum(g, 0.0).sum())
    lo, hi = problem.dh(p_min), problem.dh(p_max)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if mid - problem.dh(problem.power(u_of(mid))) > 0:
            hi = mid
        else:
            lo = mid
    return u_of(0.5 * (lo + hi))


def _arc_search(problem: _TrackingProblem, u: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Exact minimization of the objective along the projection arc clip(u - t grad).

    The arc is piecewise linear with breakpoints where coordinates reach a bound, and the
    objective is quadratic on each piece up to band crossings, so candidates are the
    breakpoints plus the stationary point of every piece under each band regime.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        hit = np.where(grad > 0, u / grad, np.where(grad < 0, (u - 1.0) / grad, np.inf))
    breaks = np.unique(hit[np.isfinite(hit) & (hit > 0)])
    knots = np.concatenate([[0.0], breaks])
    candidates = list(knots)
    for t_a, t_b in zip(knots, np.append(knots[1:], np.inf)):
        u_a = _box_projection(u - t_a * grad)
        d = np.where(hit > t_a, -grad, 0.0)
        if not np.any(d):
            continue
        p_a = problem.power(u_a)
        slope = float(problem.g @ d)
        base = problem.r * float(d @ d)
        for rho, bound in ((0.0, 0.0), (problem.rho, problem.upper), (problem.rho, problem.lower)):
            curvature = (problem.q + rho) * slope ** 2 + base
            if curvature <= 0:
                continue
            linear = problem.q * slope * (p_a - problem.p_ref) + problem.r * float(d @ u_a) + rho * slope * (p_a - bound)
            s = -linear / curvature
            if s > 0:
                candidates.append(min(t_a + s, t_b))
    trial = [_box_projection(u - t * grad) for t in candidates if np.isfinite(t)]
    values = [problem.objective(v) for v in trial]
    return trial[int(np.argmin(values))]


def mpc_solve(
    params: ModelParams,
    mu: np.ndarray,
    p_ref: float,
    band: Tuple[float, float],
    config: RegulationConfig,
) -> MpcSolution:
    """Minimize the tracking objective over the broadcast box.

    Projected-gradient iterations with exact arc line search, started from the exact
    scalar-condition solution of the rank-one-plus-ridge problem.

    Args:
        params: Current bHMM parameters
        mu: Filtered state estimate at the current step
        p_ref: Power reference for the next step (kW)
        band: Predicted (p_lower, p_upper) flexibility (kW)
        config: Weights and solver tolerances

    Returns:
        MpcSolution; ``band_violated`` reports a reference that could not be met inside the band
    """
    p0, g = linearize(params, mu)
    lower, upper = min(band), max(band)
    problem = _TrackingProblem(p0=p0, g=g, p_ref=p_ref, lower=lower, upper=upper,
                               q=config.q_w, r=config.r_w, rho=config.band_penalty)

    u = _ridge_solution(problem)
    value = problem.objective(u)
    iterations = 0
    for iterations in range(1, config.mpc_max_iter + 1):
        grad = problem.gradient(u)
        if np.linalg.norm(u - _box_projection(u - grad)) <= config.mpc_tol:
            iterations -= 1
            break
        u_next = _arc_search(problem, u, grad)
        value_next = problem.objective(u_next)
        if value_next >= value:
            break
        u, value = u_next, value_next

    residual = kkt_residual(problem, u)
    p = problem.power(u)
    violated = p > upper + 1e-6 * max(1.0, abs(upper)) or p < lower - 1e-6 * max(1.0, abs(lower))
    if violated:
        logger.warning(f"MPC prediction {p:.1f} kW leaves the band ({lower:.1f}, {upper:.1f}) kW")
    if residual > 1e-6:
        logger.warning(f"MPC stopped with KKT residual {residual:.3e} after {iterations} iterations")
    return MpcSolution(u=u, objective=value, predicted_power=p, kkt_residual=residual,
                       band_violated=violated, iterations=iterations)
