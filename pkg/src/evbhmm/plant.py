"""Simulated plant behind the aggregator's interfaces, plus the offline experiment pipelines."""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .bhmm import ModelParams, flexibility_rollout, mean_rollout, template_params
from .control.broadcast import decode_broadcast, payload_size
from .control.loop import RegulationRun, collect_warmup, random_excitation, regulation_loop
from .control.profiles import Profiles
from .essm import EssmError, build_essm, fleet_state_vector, fleet_stats, input_dim
from .fleet import (
    EXCITATION_STREAM,
    NOISE_STREAM,
    Fleet,
    apply_broadcast,
    broadcast_rng,
    fleet_log_frame,
    fleet_step,
    imm_flexibility,
    inject_soc_noise,
    log_row,
    sample_fleet,
    simulate_fleet,
    stream_rng,
)
from .ident import AggregateLog, IdentificationError, build_dataset, em_fit, init_params, kalman_forward
from .models import ControlMethod, FleetScenario, RegulationConfig

logger = logging.getLogger(__name__)

PREDICTION_COLUMNS = [
    "t_s", "p_kw", "p_pred_kw", "p_upper_pred_kw", "p_lower_pred_kw",
    "p_upper_imm_kw", "p_lower_imm_kw", "p_essm_kw",
]

# Bytes of one SOC report in the eSSM baseline's uplink
SOC_REPORT_BYTES = 4


def day_seed(seed: int, day: int) -> int:
    """Independent scenario seed of day ``day``."""
    return int(np.random.SeedSequence([seed, day]).generate_state(1, np.uint32)[0])


def excitation_inputs(seed: int, day: int, n_steps: int, n_bins: int, cap: float = 0.3) -> np.ndarray:
    return random_excitation(n_steps, input_dim(n_bins), stream_rng(seed, EXCITATION_STREAM, day), cap)


class EssmObserver:
    """Per-EV telemetry view used by the eSSM baseline.

    Captures fleet statistics and the occupancy vector (from reported SOC) at each measurement.
    """

    def __init__(self, n_bins: int, dt: float, use_reported: bool = True):
        self.n_bins = n_bins
        self.dt = dt
        self.use_reported = use_reported
        self.online_counts: List[int] = []
        self._snapshot: Optional[Tuple[ModelParams, np.ndarray]] = None

    def capture(self, fleet: Fleet) -> None:
        stats = fleet_stats(fleet)
        self.online_counts.append(stats.n_online)
        if stats.n_online == 0:
            return
        model = build_essm(stats, self.n_bins, self.dt, fleet.s_min, fleet.s_max)
        x = fleet_state_vector(fleet, self.n_bins, use_reported=self.use_reported)
        self._snapshot = (template_params(model, mu0=x), x)

    def snapshot(self) -> Tuple[ModelParams, np.ndarray]:
        if self._snapshot is None:
            raise EssmError("no online EVs observed yet")
        return self._snapshot

    @property
    def uplink_bytes(self) -> float:
        return SOC_REPORT_BYTES * float(np.mean(self.online_counts)) if self.online_counts else 0.0


@dataclass
class SimulatedFleetPort:
    """Fleet microsimulation exposed as a ``FleetPort``.

    ``measure`` runs one fleet step (arrivals, oracle flexibility, optional SOC noise, telemetry
    capture, power). ``broadcast`` decodes the payload and executes it with the step's draws.
    """
    fleet: Fleet
    n_bins: int
    dt: float
    seed: int = 0
    noise_bound: float = 0.0
    observer: Optional[EssmObserver] = None
    step: int = 0
    bytes_received: int = 0
    rows: List[List[float]] = field(default_factory=list)

    def measure(self, t: float) -> float:
        p_upper, p_lower = imm_flexibility(self.fleet, t)
        if self.noise_bound > 0:
            inject_soc_noise(self.fleet, self.noise_bound, stream_rng(self.seed, NOISE_STREAM, self.step))
        if self.observer is not None:
            self.observer.capture(self.fleet)
        counts = self.fleet.mode_counts()
        _, power = fleet_step(self.fleet, t, self.dt)
        self.rows.append(log_row(self.step * self.dt, power, p_upper, p_lower, counts, self.fleet.switch_events))
        self.step += 1
        return power

    def broadcast(self, payload: bytes) -> None:
        message = decode_broadcast(payload)
        if message.n_bins != self.n_bins:
            raise ValueError(f"broadcast for N={message.n_bins} sent to a fleet binned with N={self.n_bins}")
        self.bytes_received += len(payload)
        apply_broadcast(self.fleet, message.u, self.n_bins, broadcast_rng(self.seed, self.step))

    def fleet_log(self) -> pd.DataFrame:
        return fleet_log_frame(self.rows)


def simulate_day(
    scenario: FleetScenario,
    seed: int,
    day: int,
    t0: float,
    n_steps: int,
    n_bins: int,
    cap: float = 0.3,
    on_step=None,
) -> Tuple[AggregateLog, pd.DataFrame]:
    """One excited day: a fresh fleet draw driven by piecewise-constant random inputs."""
    fleet = sample_fleet(scenario.model_copy(update={"seed": day_seed(seed, day)}))
    inputs = excitation_inputs(seed, day, n_steps, n_bins, cap)
    run = simulate_fleet(fleet, t0, n_steps, scenario.dt, n_bins, inputs=inputs,
                         seed=day_seed(seed, day), on_step=on_step)
    log = AggregateLog(inputs=run.inputs, power=run.power, dt=scenario.dt, start_s=t0 * 3600.0)
    return log, run.log


def generate_history(
    scenario: FleetScenario,
    seed: int,
    n_days: int,
    t0: float,
    n_steps: int,
    n_bins: int,
    cap: float = 0.3,
) -> List[AggregateLog]:
    """Historical day logs; day indices start at 1 so day 0 stays free for the live day."""
    days = []
    for day in range(1, n_days + 1):
        log, _ = simulate_day(scenario, seed, day, t0, n_steps, n_bins, cap)
        days.append(log)
        if day % 50 == 0:
            logger.info(f"Simulated {day}/{n_days} history days")
    return days


@dataclass
class PredictionRun:
    frame: pd.DataFrame
    fit_times_s: List[float]
    refit_failures: int
    params: Optional[ModelParams]


def rolling_prediction(
    scenario: FleetScenario,
    history: Sequence[AggregateLog],
    seed: int,
    t0: float,
    n_steps: int,
    n_bins: int,
    window: int,
    n_traj: int,
    n_p: int,
    n_ev_estimate: int,
    cap: float = 0.3,
    em_options: Optional[Dict[str, Any]] = None,
) -> PredictionRun:
    """Refit every ``n_p`` steps on the live day and predict the next ``n_p`` steps.

    Each refit window ends at step k; the model predicts power and flexibility for k+1..k+n_p
    under the inputs actually broadcast. The oracle flexibility and an eSSM built from the
    true fleet at step k are reported alongside.

    Raises:
        IdentificationError: If the first fit fails
    """
    em_options = dict(em_options or {})
    update_steps = list(range(window, n_steps - 1, n_p))
    if not update_steps:
        raise IdentificationError(f"a live day of {n_steps} steps leaves no prediction after a {window}-step window")
    snapshots: Dict[int, Tuple[Any, np.ndarray]] = {}

    def capture(k: int, fleet: Fleet) -> None:
        if k in snapshots or k not in wanted:
            return
        stats = fleet_stats(fleet)
        if stats.n_online > 0:
            snapshots[k] = (stats, fleet_state_vector(fleet, n_bins))

    wanted = set(update_steps)
    live, fleet_log = simulate_day(scenario, seed, 0, t0, n_steps, n_bins, cap, on_step=capture)

    rng = np.random.default_rng(seed)
    params: Optional[ModelParams] = None
    fit_times: List[float] = []
    failures = 0
    rows = []
    for k in update_steps:
        dataset = build_dataset(history, live, k, window, n_traj)
        try:
            start = params if params is not None else init_params(dataset, n_bins, n_ev_estimate, rng)
            params, report = em_fit(dataset, start, **em_options)
            fit_times.append(report.wall_time_s)
        except IdentificationError as e:
            if params is None:
                raise
            failures += 1
            logger.warning(f"Refit at step {k} failed, predicting with previous parameters: {e}")
        mu = kalman_forward(params, dataset.inputs[-1], dataset.outputs[-1]).mu_filt[0, -1]
        horizon = min(n_p, n_steps - 1 - k)
        u_seq = live.inputs[k:k + horizon]
        p_pred = mean_rollout(params, mu, u_seq)
        p_upper, p_lower = flexibility_rollout(params, mu, horizon)
        if k in snapshots:
            stats, x = snapshots[k]
            essm = template_params(build_essm(stats, n_bins, scenario.dt, scenario.s_min, scenario.s_max))
            p_essm = mean_rollout(essm, x, u_seq)
        else:
            p_essm = np.zeros(horizon)
        for j in range(horizon):
            step = k + 1 + j
            rows.append([step * scenario.dt, live.power[step], p_pred[j], p_upper[j], p_lower[j],
                         fleet_log["p_upper_kw"].iloc[step], fleet_log["p_lower_kw"].iloc[step], p_essm[j]])

    frame = pd.DataFrame(rows, columns=PREDICTION_COLUMNS)
    logger.info(f"Rolling prediction produced {len(frame)} rows from {len(fit_times)} fits")
    return PredictionRun(frame=frame, fit_times_s=fit_times, refit_failures=failures, params=params)


@dataclass
class RegulationOutcome:
    run: RegulationRun
    fleet_log: pd.DataFrame
    warmup_steps: int
    bytes_per_cycle: int


def regulate_fleet(
    scenario: FleetScenario,
    history: Sequence[AggregateLog],
    profiles: Profiles,
    config: RegulationConfig,
    method: ControlMethod,
    seed: int,
    t0: float,
    n_steps: int,
    n_bins: int,
    window: int,
    n_traj: int,
    noise_bound: float = 0.0,
    cap: float = 0.3,
    em_options: Optional[Dict[str, Any]] = None,
) -> RegulationOutcome:
    """Closed-loop run on the live day (day 0) after ``window`` steps of random excitation.

    Every method sees the same fleet draw and warm-up, so runs differ only in the controller.
    """
    live_seed = day_seed(seed, 0)
    fleet = sample_fleet(scenario.model_copy(update={"seed": live_seed}))
    fleet.warm_start(t0)
    observer = EssmObserver(n_bins, config.dt) if method is ControlMethod.ESSM else None
    port = SimulatedFleetPort(fleet=fleet, n_bins=n_bins, dt=config.dt, seed=live_seed,
                              noise_bound=noise_bound, observer=observer)
    warmup = collect_warmup(port, t0, window, config.dt, n_bins,
                            stream_rng(seed, EXCITATION_STREAM, 0), cap)
    run = regulation_loop(
        port, profiles, config, n_steps, t0 + window * config.dt / 3600.0, n_bins,
        method=method, warmup=warmup, history=history, observer=observer, window=window,
        n_traj=n_traj, n_ev_estimate=max(scenario.n_ev, 1), em_options=em_options, seed=seed,
    )
    if method is ControlMethod.ESSM:
        uplink = observer.uplink_bytes
    else:
        uplink = SOC_REPORT_BYTES
    return RegulationOutcome(run=run, fleet_log=port.fleet_log(), warmup_steps=window,
                             bytes_per_cycle=int(round(payload_size(n_bins) + uplink)))
