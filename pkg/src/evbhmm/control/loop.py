"""Aggregator-side closed loop: identification, regulation, dispatch and broadcast.

The loop sees the fleet only through a ``FleetPort`` (one aggregated power reading and one
broadcast per step). Baselines that need per-EV information plug in a ``StateObserver``.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from ..bhmm import ModelParams, flexibility_rollout, mean_rollout
from ..essm import input_dim
from ..ident import AggregateLog, IdentificationError, LiveFilter, build_dataset, em_fit, init_params
from ..models import ControlMethod, GridState, RegulationConfig
from .broadcast import decode_broadcast, encode_broadcast, payload_size
from .mpc import mpc_solve
from .profiles import Profiles
from .regulation import LambdaStrategy, dispatch, pi_regulation, swing_step, update_lambda

logger = logging.getLogger(__name__)

RUN_LOG_COLUMNS = ["t_s", "delta_f_hz", "p_ev_real_kw", "p_ref_kw", "dp_cg_mw", "err_p", "refit_flag"]

REFIT_NONE = 0
REFIT_OK = 1
REFIT_FAILED = 2


class RegulationError(Exception):
    """Raised when the loop cannot produce a feasible step."""
    pass


class FleetPort(Protocol):
    """Aggregated view of the fleet."""

    def measure(self, t: float) -> float:
        """Advance one step from clock hour ``t`` and return the aggregated power (kW)."""
        ...

    def broadcast(self, payload: bytes) -> None:
        ...


class StateObserver(Protocol):
    """Source of model parameters and state estimate for methods with per-EV telemetry."""

    def snapshot(self) -> Tuple[ModelParams, np.ndarray]:
        ...

    @property
    def uplink_bytes(self) -> float:
        """Mean telemetry bytes received per control cycle."""
        ...


@dataclass
class RegulationRun:
    log: pd.DataFrame
    params: Optional[ModelParams]
    fit_times_s: List[float] = field(default_factory=list)
    mpc_times_s: List[float] = field(default_factory=list)
    refit_failures: int = 0
    payload_bytes: int = 0


def random_excitation(
    n_steps: int,
    n_inputs: int,
    rng: np.random.Generator,
    cap: float = 0.3,
    hold: int = 4,
) -> np.ndarray:
    """Piecewise-constant inputs, each entry U(0, cap) and refreshed every ``hold`` steps."""
    n_blocks = -(-n_steps // hold)
    blocks = rng.uniform(0.0, cap, size=(n_blocks, n_inputs))
    return np.repeat(blocks, hold, axis=0)[:n_steps]


def collect_warmup(
    port: FleetPort,
    t0: float,
    n_steps: int,
    dt: float,
    n_bins: int,
    rng: np.random.Generator,
    cap: float = 0.3,
) -> AggregateLog:
    """Drive the port with random excitation to record the first identification window."""
    inputs = random_excitation(n_steps, input_dim(n_bins), rng, cap)
    power = np.zeros(n_steps)
    sent = np.zeros_like(inputs)
    for k in range(n_steps):
        power[k] = port.measure(t0 + k * dt / 3600.0)
        payload = encode_broadcast(inputs[k], n_bins, sequence=k)
        port.broadcast(payload)
        sent[k] = decode_broadcast(payload).u
    logger.info(f"Recorded {n_steps} excitation steps before closing the loop")
    return AggregateLog(inputs=sent, power=power, dt=dt, start_s=t0 * 3600.0)


def regulation_loop(
    port: FleetPort,
    profiles: Profiles,
    config: RegulationConfig,
    n_steps: int,
    t0: float,
    n_bins: int,
    method: ControlMethod = ControlMethod.BHMM,
    warmup: Optional[AggregateLog] = None,
    history: Sequence[AggregateLog] = (),
    params0: Optional[ModelParams] = None,
    observer: Optional[StateObserver] = None,
    window: int = 60,
    n_traj: int = 300,
    n_ev_estimate: int = 10000,
    em_options: Optional[Dict[str, Any]] = None,
    seed: int = 0,
    lambda_strategy: LambdaStrategy = update_lambda,
) -> RegulationRun:
    """Run the regulation loop for ``n_steps`` control intervals.

    Args:
        port: Aggregated fleet interface
        profiles: Wind/load series indexed by seconds since the loop started
        config: Regulation and MPC parameters
        n_steps: Control intervals to run
        t0: Clock hour of the first loop step
        n_bins: SOC bins of the broadcast
        method: bhmm, essm or none
        warmup: Live log recorded before the loop; its length offsets the live step index
        history: Earlier day logs aligned with the live day
        params0: Parameters to start from (bhmm); fitted on the first step when absent
        observer: Parameter/state source required by the essm method
        window: K
        n_traj: L
        n_ev_estimate: Fleet-size guess for the first initialization
        em_options: Keyword arguments forwarded to ``em_fit``
        seed: Seed of the EM initialization
        lambda_strategy: Bias-factor update rule

    Returns:
        RegulationRun with the RunLog table

    Raises:
        RegulationError: If the method lacks a model or dispatch leaves the CG limits
    """
    if method is ControlMethod.ESSM and observer is None:
        raise RegulationError("the essm method needs a state observer")
    em_options = dict(em_options or {})
    dt = config.dt
    n_inputs = input_dim(n_bins)
    rng = np.random.default_rng(seed)

    warm_inputs = warmup.inputs if warmup is not None else np.zeros((0, n_inputs))
    warm_power = warmup.power if warmup is not None else np.zeros(0)
    offset = len(warm_power)
    live_inputs = np.zeros((offset + n_steps, n_inputs))
    live_power = np.zeros(offset + n_steps)
    live_inputs[:offset] = warm_inputs
    live_power[:offset] = warm_power

    params = params0
    live_filter = LiveFilter(params) if params is not None else None
    if live_filter is not None and offset > 0:
        live_filter.reseed(params, warm_inputs[:-1], warm_power)
        live_filter.predict(warm_inputs[-1])

    run = RegulationRun(log=pd.DataFrame(columns=RUN_LOG_COLUMNS), params=params,
                        payload_bytes=payload_size(n_bins))
    rows = np.zeros((n_steps, len(RUN_LOG_COLUMNS)))
    grid: Optional[GridState] = None
    p_ref_prev: Optional[float] = None
    cg_min, cg_max = config.cg_limits

    for i in range(n_steps):
        k = offset + i
        t = t0 + i * dt / 3600.0
        t_s = i * dt
        p_real = port.measure(t)
        live_power[k] = p_real

        if p_ref_prev is not None and abs(p_ref_prev) > 1e-6:
            err = abs((p_ref_prev - p_real) / p_ref_prev)
        else:
            err = 0.0

        refit_flag = REFIT_NONE
        mu = None
        if method is ControlMethod.BHMM:
            due = params is None or i % config.n_p == 0 or err > config.refit_error
            if due and k >= window:
                live = AggregateLog(inputs=live_inputs[:k + 1], power=live_power[:k + 1], dt=dt)
                try:
                    dataset = build_dataset(history, live, k, window, n_traj)
                    start = params if params is not None else init_params(dataset, n_bins, n_ev_estimate, rng)
                    fitted, report = em_fit(dataset, start, **em_options)
                    run.fit_times_s.append(report.wall_time_s)
                    params = fitted
                    live_filter = LiveFilter(params)
                    mu = live_filter.reseed(params, live_inputs[k - window:k], live_power[k - window:k + 1])
                    refit_flag = REFIT_OK
                except IdentificationError as e:
                    run.refit_failures += 1
                    refit_flag = REFIT_FAILED
                    logger.warning(f"Refit at step {k} failed, keeping previous parameters: {e}")
            if params is None:
                raise RegulationError(f"no bHMM parameters available at step {k}")
            if mu is None:
                mu = live_filter.update(p_real)
            model = params
        elif method is ControlMethod.ESSM:
            model, mu = observer.snapshot()
        else:
            model = None

        if grid is None:
            grid = GridState(p_cg=0.0, p_load=profiles.load(t_s), p_wind=profiles.wind(t_s),
                             p_ev=p_real / 1000.0, inertia=config.h, damping=config.d)
            balance = grid.p_load - grid.p_wind - grid.p_ev
            grid = grid.model_copy(update={"p_cg": min(max(balance, cg_min), cg_max)})
        grid = grid.model_copy(update={"p_load": profiles.load(t_s), "p_wind": profiles.wind(t_s),
                                       "p_ev": p_real / 1000.0})
        grid = swing_step(grid, grid.imbalance, dt, config.swing_substeps)
        grid = grid.model_copy(update={"lam": lambda_strategy(grid, config)})
        dp_d = pi_regulation(-grid.delta_f, grid.lam, config.f_deadband)

        if model is None:
            p_pred = p_upper = p_lower = p_real
        else:
            p_pred = float(mean_rollout(model, mu, np.zeros((1, n_inputs)))[0])
            upper, lower = flexibility_rollout(model, mu, 1)
            p_upper, p_lower = float(upper[0]), float(lower[0])
        decision = dispatch(dp_d, p_pred, p_upper, p_lower, grid, config)
        p_cg = grid.p_cg + decision.dp_cg
        if abs(decision.dp_cg) > config.ramp_per_step + 1e-9 or not cg_min - 1e-9 <= p_cg <= cg_max + 1e-9:
            raise RegulationError(f"dispatch at step {k} violates CG limits: dp_cg={decision.dp_cg:.3f} MW")
        grid = grid.model_copy(update={"p_cg": p_cg})

        if model is None:
            u = np.zeros(n_inputs)
        else:
            tic = time.perf_counter()
            solution = mpc_solve(model, mu, decision.p_ref, (p_lower, p_upper), config)
            run.mpc_times_s.append(time.perf_counter() - tic)
            u = solution.u
        payload = encode_broadcast(u, n_bins, sequence=k)
        port.broadcast(payload)
        u_sent = decode_broadcast(payload).u
        live_inputs[k] = u_sent
        if method is ControlMethod.BHMM:
            live_filter.predict(u_sent)

        p_ref_row = p_ref_prev if p_ref_prev is not None else p_real
        rows[i] = [t_s, grid.delta_f, p_real, p_ref_row, decision.dp_cg, err, refit_flag]
        p_ref_prev = decision.p_ref

    log = pd.DataFrame(rows, columns=RUN_LOG_COLUMNS)
    log["refit_flag"] = log["refit_flag"].astype(np.int64)
    run.log = log
    run.params = params
    logger.info(f"Regulation ({method.value}) ran {n_steps} steps; max |delta_f|="
                f"{float(np.max(np.abs(log['delta_f_hz']))) if n_steps else 0.0:.4f} Hz, "
                f"{len(run.fit_times_s)} refits, {run.refit_failures} failed")
    return run
