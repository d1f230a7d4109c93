"""Frequency regulation: PI demand, bias-factor tuning, swing dynamics and EV/CG dispatch."""

import logging
import math
from typing import Protocol

from ..models import DispatchDecision, GridState, RegulationConfig

logger = logging.getLogger(__name__)


def pi_regulation(delta_f: float, lam: float, f_deadband: float) -> float:
    """Demanded regulation power (MW) for a frequency deviation (Hz); zero inside the dead band."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    if abs(delta_f) <= f_deadband:
        return 0.0
    return lam * (delta_f - math.copysign(f_deadband, delta_f))


def swing_step(grid: GridState, p_imbalance: float, dt: float, substeps: int = 1) -> GridState:
    """Explicit Euler integration of H d(delta_f)/dt = p_imbalance - D delta_f over ``dt`` seconds.

    The imbalance is held over the interval. A single substep is stable only for dt < 2H/D.
    """
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    h = dt / substeps
    delta_f = grid.delta_f
    for _ in range(substeps):
        delta_f = delta_f + (h / grid.inertia) * (p_imbalance - grid.damping * delta_f)
    return grid.model_copy(update={"delta_f": delta_f})


def predicted_deviation(grid: GridState, lam: float, config: RegulationConfig) -> float:
    """delta_f after one swing step when the demand for ``lam`` is delivered in full."""
    demand = pi_regulation(-grid.delta_f, lam, config.f_deadband)
    return swing_step(grid, grid.imbalance + demand, config.dt, config.swing_substeps).delta_f


class LambdaStrategy(Protocol):
    def __call__(self, grid: GridState, config: RegulationConfig) -> float:
        ...


def update_lambda(grid: GridState, config: RegulationConfig) -> float:
    """Bisect lambda on [0, lambda_max] so the next deviation lands on the dead-band edge.

    Returns the current lambda inside the dead band, 0 when the grid recovers unaided and
    lambda_max when even the largest gain cannot reach the band.
    """
    if abs(grid.delta_f) <= config.f_deadband:
        return grid.lam
    sign = math.copysign(1.0, grid.delta_f)

    def excess(lam: float) -> float:
        return sign * predicted_deviation(grid, lam, config) - config.f_deadband

    lo, hi = 0.0, config.lambda_max
    if excess(lo) <= 0:
        return 0.0
    if excess(hi) > 0:
        return hi
    for _ in range(config.lambda_iterations):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def dispatch(
    dp_d: float,
    p_pred: float,
    p_upper: float,
    p_lower: float,
    grid: GridState,
    config: RegulationConfig,
) -> DispatchDecision:
    """Cover the demand with EV flexibility first and conventional generation second.

    Args:
        dp_d: Demanded regulation power (MW)
        p_pred: Predicted EV power for the next step (kW)
        p_upper: Predicted upper flexibility (kW)
        p_lower: Predicted lower flexibility (kW)
        grid: Current grid state (p_cg in MW)
        config: Regulation parameters

    Returns:
        DispatchDecision with dp_ev in kW, dp_cg in MW and the MPC reference in kW
    """
    if p_upper < p_lower:
        logger.warning(f"Inverted flexibility band ({p_lower:.1f}, {p_upper:.1f}) kW; swapping")
        p_upper, p_lower = p_lower, p_upper
    if not p_lower <= p_pred <= p_upper:
        clamped = min(max(p_pred, p_lower), p_upper)
        logger.warning(f"Predicted power {p_pred:.1f} kW outside band; clamped to {clamped:.1f} kW")
        p_pred = clamped

    cg_min, cg_max = config.cg_limits
    ramp = config.ramp_per_step
    headroom_up = (p_upper - p_pred) / 1000.0
    headroom_down = (p_lower - p_pred) / 1000.0
    dp_cg = 0.0
    if dp_d > 0:
        if headroom_up > dp_d:
            dp_ev = dp_d
        else:
            dp_ev = headroom_up
            dp_cg = min(cg_max - grid.p_cg, ramp, dp_d - dp_ev)
    else:
        if headroom_down < dp_d:
            dp_ev = dp_d
        else:
            dp_ev = headroom_down
            dp_cg = max(cg_min - grid.p_cg, -ramp, dp_d - dp_ev)

    return DispatchDecision(dp_ev=dp_ev * 1000.0, dp_cg=dp_cg, p_ref=dp_ev * 1000.0 + p_pred)
