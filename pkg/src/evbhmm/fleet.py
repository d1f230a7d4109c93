"""Individual-EV microsimulation: ground-truth power, IMM flexibility and local broadcast execution.

The fleet is stored as a struct of numpy arrays indexed by agent id. Per-agent views are
available as ``EvAgent`` records for inspection and tests.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy.stats import truncnorm

from .models import EvAgent, FleetScenario, Mode, SocDistribution, TravelDistribution

logger = logging.getLogger(__name__)

FLEET_LOG_COLUMNS = [
    "t_s", "p_kw", "p_upper_kw", "p_lower_kw", "n_cm", "n_im", "n_dm", "n_fcm", "n_off", "switch_events",
]

# Standard deviation of the reported-SOC corruption before truncation
SOC_NOISE_STD = 2.0

# Stream tags for counter-based generators
BROADCAST_STREAM = 1
NOISE_STREAM = 2
EXCITATION_STREAM = 3


class ScenarioError(Exception):
    """Raised when a fleet scenario is invalid."""
    pass


def stream_rng(seed: int, stream: int, counter: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream) and positioned at ``counter``."""
    key = np.random.SeedSequence([seed, stream]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def broadcast_rng(seed: int, step: int) -> np.random.Generator:
    """Generator for the switching draws of control step ``step``.

    One stream per (seed, step); agent i reads its i-th double, so any partition of the agents
    that reads the same positions reproduces the serial draws.
    """
    return stream_rng(seed, BROADCAST_STREAM, step)


class Fleet:
    """EV population as parallel arrays; charging and discharging ratings are equal per agent."""

    def __init__(
        self,
        p_rated: np.ndarray,
        efficiency: np.ndarray,
        capacity: np.ndarray,
        t_arrive: np.ndarray,
        t_depart: np.ndarray,
        soc_initial: np.ndarray,
        soc_demanded: np.ndarray,
        s_min: float = 0.0,
        s_max: float = 1.0,
    ):
        self.p_rated = np.asarray(p_rated, dtype=float)
        self.efficiency = np.asarray(efficiency, dtype=float)
        self.capacity = np.asarray(capacity, dtype=float)
        self.t_arrive = np.asarray(t_arrive, dtype=float)
        self.t_depart = np.asarray(t_depart, dtype=float)
        self.soc_initial = np.asarray(soc_initial, dtype=float)
        self.soc_demanded = np.asarray(soc_demanded, dtype=float)
        self.s_min = float(s_min)
        self.s_max = float(s_max)
        self.soc = self.soc_initial.copy()
        self.soc_reported = self.soc.copy()
        self.mode = np.full(len(self.p_rated), Mode.OFFLINE, dtype=np.int8)
        self.switch_events = 0

    def __len__(self) -> int:
        return len(self.p_rated)

    @property
    def overnight(self) -> np.ndarray:
        return self.t_depart < self.t_arrive

    @property
    def online(self) -> np.ndarray:
        return self.mode != Mode.OFFLINE

    def connected(self, t: float) -> np.ndarray:
        """Mask of agents whose connection interval contains clock hour ``t``."""
        t = t % 24.0
        same_day = (self.t_arrive <= t) & (t < self.t_depart)
        across_midnight = (t >= self.t_arrive) | (t < self.t_depart)
        return np.where(self.overnight, across_midnight, same_day)

    def mode_counts(self) -> Dict[Mode, int]:
        counts = np.bincount(self.mode, minlength=len(Mode))
        return {m: int(counts[m]) for m in Mode}

    def agent(self, i: int) -> EvAgent:
        """Record view of agent ``i``."""
        return EvAgent(
            id=i,
            p_charge=float(self.p_rated[i]),
            p_discharge=float(self.p_rated[i]),
            eff_charge=float(self.efficiency[i]),
            eff_discharge=float(self.efficiency[i]),
            capacity=float(self.capacity[i]),
            t_arrive=float(self.t_arrive[i]),
            t_depart=float(self.t_depart[i]),
            soc_initial=float(self.soc_initial[i]),
            soc_demanded=float(self.soc_demanded[i]),
            soc=float(self.soc[i]),
            mode=Mode(int(self.mode[i])),
            soc_reported=float(self.soc_reported[i]),
        )

    def agents(self) -> List[EvAgent]:
        return [self.agent(i) for i in range(len(self))]

    @classmethod
    def from_agents(cls, agents: List[EvAgent], s_min: float = 0.0, s_max: float = 1.0) -> "Fleet":
        """Build a fleet from records; agents are re-indexed in list order."""
        fleet = cls(
            p_rated=np.array([a.p_charge for a in agents], dtype=float),
            efficiency=np.array([a.eff_charge for a in agents], dtype=float),
            capacity=np.array([a.capacity for a in agents], dtype=float),
            t_arrive=np.array([a.t_arrive for a in agents], dtype=float),
            t_depart=np.array([a.t_depart for a in agents], dtype=float),
            soc_initial=np.array([a.soc_initial for a in agents], dtype=float),
            soc_demanded=np.array([a.soc_demanded for a in agents], dtype=float),
            s_min=s_min,
            s_max=s_max,
        )
        fleet.soc = np.array([a.soc for a in agents], dtype=float)
        fleet.soc_reported = np.array([a.soc_reported for a in agents], dtype=float)
        fleet.mode = np.array([int(a.mode) for a in agents], dtype=np.int8)
        return fleet

    def warm_start(self, t: float) -> None:
        """Place agents connected at ``t`` as if they had charged uninterrupted since arrival."""
        connected = self.connected(t)
        elapsed = (t - self.t_arrive) % 24.0
        charged = np.minimum(self.s_max, self.soc_initial + self.p_rated * self.efficiency * elapsed / self.capacity)
        self.soc = np.where(connected, charged, self.soc_initial)
        self.soc_reported = self.soc.copy()
        self.mode = np.where(connected, Mode.CM, Mode.OFFLINE).astype(np.int8)
        self.mode[connected & (self.soc >= self.s_max)] = Mode.IM
        self.mode[_fcm_mask(self, t)] = Mode.FCM


def _sample(dist: TravelDistribution, size: int, rng: np.random.Generator) -> np.ndarray:
    if dist.kind == SocDistribution.UNIFORM:
        return rng.uniform(dist.low, dist.high, size)
    a = (dist.low - dist.mean) / dist.std
    b = (dist.high - dist.mean) / dist.std
    draws = truncnorm.rvs(a, b, loc=dist.mean, scale=dist.std, size=size, random_state=rng)
    return np.clip(np.atleast_1d(draws), dist.low, dist.high)


def sample_fleet(scenario: Union[FleetScenario, Dict]) -> Fleet:
    """Sample the characteristic and traveling parameters of ``scenario.n_ev`` agents.

    Args:
        scenario: Scenario model or its dict form

    Returns:
        Fleet with every agent OFFLINE at its initial SOC

    Raises:
        ScenarioError: If the scenario fails validation
    """
    if not isinstance(scenario, FleetScenario):
        try:
            scenario = FleetScenario(**scenario)
        except ValidationError as e:
            raise ScenarioError(f"Invalid fleet scenario: {e}")

    n = scenario.n_ev
    rng = np.random.Generator(np.random.Philox(scenario.seed))
    powers = np.array([level.power_kw for level in scenario.charger_mixture])
    proportions = np.array([level.proportion for level in scenario.charger_mixture])
    p_rated = rng.choice(powers, size=n, p=proportions / proportions.sum())
    efficiency = rng.uniform(*scenario.eff_range, size=n)
    capacity = rng.uniform(*scenario.capacity_range, size=n)

    travel = scenario.travel_distributions
    soc_initial = _sample(travel.soc_initial, n, rng)
    soc_demanded = _sample(travel.soc_demanded, n, rng)
    t_arrive = _sample(travel.t_arrive, n, rng) % 24.0
    t_depart = _sample(travel.t_depart, n, rng) % 24.0

    logger.debug(f"Sampled {n} EVs (seed={scenario.seed})")
    return Fleet(p_rated, efficiency, capacity, t_arrive, t_depart, soc_initial, soc_demanded,
                 s_min=scenario.s_min, s_max=scenario.s_max)


def _soc_delta(mode: np.ndarray, p: np.ndarray, eff: np.ndarray, cap: np.ndarray, dt: float) -> np.ndarray:
    dt_h = dt / 3600.0
    charging = (mode == Mode.CM) | (mode == Mode.FCM)
    delta = np.zeros(len(mode))
    delta[charging] = p[charging] * eff[charging] * dt_h / cap[charging]
    dm = mode == Mode.DM
    delta[dm] = -p[dm] * dt_h / (eff[dm] * cap[dm])
    return delta


def soc_step(agent: EvAgent, dt: float, s_min: float = 0.0, s_max: float = 1.0) -> Tuple[EvAgent, bool]:
    """Advance one agent's SOC by ``dt`` seconds.

    Returns:
        Updated agent and whether the SOC limit was reached this step
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if agent.mode in (Mode.IM, Mode.OFFLINE):
        return agent, False
    mode = np.array([agent.mode])
    delta = _soc_delta(mode, np.array([agent.p_charge]), np.array([agent.eff_charge]), np.array([agent.capacity]), dt)
    raw = agent.soc + float(delta[0])
    soc = min(max(raw, s_min), s_max)
    hit = soc >= s_max if agent.mode != Mode.DM else soc <= s_min
    return agent.model_copy(update={"soc": soc}), bool(hit)


def _required_hours(soc, soc_demanded, capacity, p, eff):
    return (soc_demanded - soc) * capacity / (p * eff)


def fcm_check(agent: EvAgent, t: float) -> bool:
    """Whether the agent must enter forced charging at clock hour ``t`` (boundary included)."""
    if agent.soc >= agent.soc_demanded:
        return False
    remaining = (agent.t_depart - t) % 24.0
    required = _required_hours(agent.soc, agent.soc_demanded, agent.capacity, agent.p_charge, agent.eff_charge)
    return bool(required >= remaining)


def _fcm_mask(fleet: Fleet, t: float) -> np.ndarray:
    remaining = (fleet.t_depart - t) % 24.0
    required = _required_hours(fleet.soc, fleet.soc_demanded, fleet.capacity, fleet.p_rated, fleet.efficiency)
    return fleet.online & (fleet.soc < fleet.soc_demanded) & (required >= remaining)


def _bin_index(soc: np.ndarray, n_bins: int, s_min: float, s_max: float) -> np.ndarray:
    width = (s_max - s_min) / n_bins
    idx = np.floor((np.asarray(soc, dtype=float) - s_min) / width).astype(np.int64)
    return np.clip(idx, 0, n_bins - 1)


def soc_bin(soc: float, n_bins: int, s_min: float = 0.0, s_max: float = 1.0) -> int:
    """1-based SOC bin of ``soc`` over uniform bins on [s_min, s_max]; the upper edge joins bin N."""
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    if not s_min <= soc <= s_max:
        raise ValueError(f"soc={soc} outside [{s_min}, {s_max}]")
    return int(_bin_index(np.array([soc]), n_bins, s_min, s_max)[0]) + 1


def apply_broadcast(fleet: Fleet, u: np.ndarray, n_bins: int, rng: np.random.Generator) -> Fleet:
    """Execute a switching-probability broadcast locally at every online non-FCM agent.

    Each agent draws alpha in (0, 1] and follows the arrow of its (mode, SOC bin) entry when
    alpha <= u_j. Interior idle agents use one draw for both arrows: DM when alpha <= u_b,
    otherwise CM when alpha <= u_b + u_d. The CM arrow is therefore clamped when u_b + u_d > 1:
    it fires with probability 1 - u_b instead of u_d.

    Agent i takes the i-th draw of the step stream, so its alpha depends only on (seed, step, i).

    Args:
        fleet: Fleet to mutate in place
        u: Control input laid out [u_a, u_b, u_c, u_d, u_{d,N+1}, u_{b,N+1}]
        n_bins: N
        rng: Generator for this step's draws (see ``broadcast_rng``)

    Returns:
        The same fleet

    Raises:
        ValueError: If u has the wrong length or entries outside [0, 1]
    """
    N = n_bins
    u = np.asarray(u, dtype=float)
    if u.shape != (4 * N + 2,):
        raise ValueError(f"control input must have length {4 * N + 2}, got shape {u.shape}")
    if not np.all(np.isfinite(u)) or np.any(u < 0.0) or np.any(u > 1.0):
        raise ValueError("control input entries must lie in [0, 1]")

    alpha = 1.0 - rng.random(len(fleet))
    bins = _bin_index(fleet.soc, N, fleet.s_min, fleet.s_max)
    mode = fleet.mode
    at_min = fleet.soc <= fleet.s_min
    at_max = fleet.soc >= fleet.s_max
    idle = mode == Mode.IM
    idle_mid = idle & ~at_min & ~at_max
    u_b = u[N + bins]

    cm_to_im = (mode == Mode.CM) & (alpha <= u[bins])
    dm_to_im = (mode == Mode.DM) & (alpha <= u[2 * N + bins])
    im_to_dm = idle_mid & (alpha <= u_b)
    im_to_cm = idle_mid & ~im_to_dm & (alpha <= u_b + u[3 * N + bins])
    min_to_cm = idle & at_min & (alpha <= u[4 * N])
    max_to_dm = idle & at_max & ~at_min & (alpha <= u[4 * N + 1])

    mode[cm_to_im | dm_to_im] = Mode.IM
    mode[im_to_dm | max_to_dm] = Mode.DM
    mode[im_to_cm | min_to_cm] = Mode.CM
    switched = int(np.count_nonzero(cm_to_im | dm_to_im | im_to_dm | max_to_dm | im_to_cm | min_to_cm))
    fleet.switch_events += switched
    return fleet


def _connect(fleet: Fleet, t: float) -> None:
    """Process arrivals, departures and forced-charging entry/exit at clock hour ``t``."""
    connected = fleet.connected(t)
    arriving = connected & (fleet.mode == Mode.OFFLINE)
    departing = ~connected & (fleet.mode != Mode.OFFLINE)
    fleet.soc[arriving] = fleet.soc_initial[arriving]
    fleet.soc_reported[arriving] = fleet.soc_initial[arriving]
    fleet.mode[arriving] = Mode.CM
    fleet.mode[departing] = Mode.OFFLINE

    released = (fleet.mode == Mode.FCM) & (fleet.soc >= fleet.soc_demanded)
    fleet.mode[released] = Mode.CM
    fleet.mode[_fcm_mask(fleet, t)] = Mode.FCM


def fleet_power(fleet: Fleet) -> float:
    """Aggregate output in kW; discharging positive, charging negative."""
    charging = (fleet.mode == Mode.CM) | (fleet.mode == Mode.FCM)
    discharging = fleet.mode == Mode.DM
    return float(np.sum(fleet.p_rated[discharging]) - np.sum(fleet.p_rated[charging]))


def fleet_step(fleet: Fleet, t: float, dt: float) -> Tuple[Fleet, float]:
    """Advance the fleet over one interval starting at clock hour ``t``.

    Returns:
        The mutated fleet and the aggregate power over the interval (kW)
    """
    _connect(fleet, t)
    power = fleet_power(fleet)

    online = fleet.online
    delta = _soc_delta(fleet.mode, fleet.p_rated, fleet.efficiency, fleet.capacity, dt)
    advanced = np.clip(fleet.soc + delta, fleet.s_min, fleet.s_max)
    fleet.soc = np.where(online & (delta != 0.0), advanced, fleet.soc)

    charging = (fleet.mode == Mode.CM) | (fleet.mode == Mode.FCM)
    fleet.mode[charging & (fleet.soc >= fleet.s_max)] = Mode.IM
    fleet.mode[(fleet.mode == Mode.DM) & (fleet.soc <= fleet.s_min)] = Mode.IM
    return fleet, power


def imm_flexibility(fleet: Fleet, t: float) -> Tuple[float, float]:
    """Oracle flexibility (p_upper, p_lower) in kW summed over online agents at clock hour ``t``."""
    _connect(fleet, t)
    online = fleet.online
    fcm = fleet.mode == Mode.FCM
    p = fleet.p_rated
    upper = np.where(fcm, -p, np.where(fleet.soc > fleet.s_min, p, 0.0))
    lower = np.where(fcm, -p, np.where(fleet.soc < fleet.s_max, -p, 0.0))
    return float(np.sum(upper[online])), float(np.sum(lower[online]))


def inject_soc_noise(fleet: Fleet, bound_fraction: float, rng: np.random.Generator) -> Fleet:
    """Corrupt ``soc_reported`` with N(0, 2.0) noise truncated to +-bound_fraction*soc; true SOC untouched."""
    if bound_fraction < 0:
        raise ValueError(f"bound_fraction must be nonnegative, got {bound_fraction}")
    half = bound_fraction * fleet.soc
    eps = np.zeros(len(fleet))
    active = half > 0
    if np.any(active):
        h = half[active]
        draws = truncnorm.rvs(-h / SOC_NOISE_STD, h / SOC_NOISE_STD, loc=0.0, scale=SOC_NOISE_STD,
                              size=int(np.count_nonzero(active)), random_state=rng)
        eps[active] = np.clip(draws, -h, h)
    fleet.soc_reported = np.clip(fleet.soc + eps, 0.0, 1.0)
    return fleet


def log_row(
    t_s: float, power: float, p_upper: float, p_lower: float, counts: Dict[Mode, int], switch_events: int,
) -> List[float]:
    """One FleetLog row; ``counts`` are the mode counts taken before the step."""
    return [t_s, power, p_upper, p_lower, counts[Mode.CM], counts[Mode.IM], counts[Mode.DM],
            counts[Mode.FCM], counts[Mode.OFFLINE], switch_events]


def fleet_log_frame(rows) -> pd.DataFrame:
    log = pd.DataFrame(rows, columns=FLEET_LOG_COLUMNS)
    for column in FLEET_LOG_COLUMNS[4:]:
        log[column] = log[column].astype(np.int64)
    return log


@dataclass
class FleetRun:
    """Outcome of one simulated span: the FleetLog table plus aligned power/input arrays."""
    log: pd.DataFrame
    power: np.ndarray
    inputs: np.ndarray
    switch_events: int


def simulate_fleet(
    fleet: Fleet,
    t0: float,
    n_steps: int,
    dt: float,
    n_bins: int,
    inputs: Optional[np.ndarray] = None,
    seed: int = 0,
    noise_bound: float = 0.0,
    on_step: Optional[Callable[[int, Fleet], None]] = None,
    warm_start: bool = True,
) -> FleetRun:
    """Step the fleet ``n_steps`` times from clock hour ``t0``.

    Input row k is applied after the power of step k is recorded, so it shapes step k + 1.

    Args:
        fleet: Fleet to simulate (mutated)
        t0: Clock hour of the first step
        n_steps: Number of steps
        dt: Step length in seconds
        n_bins: SOC bins used to read the broadcast
        inputs: Optional (n_steps, 4N+2) broadcast sequence
        seed: Seed of the broadcast and noise streams
        noise_bound: Reported-SOC corruption bound (0 disables)
        on_step: Callback receiving (k, fleet) after arrivals are processed and before stepping
        warm_start: Initialize connected agents from their arrival history

    Returns:
        FleetRun with the log and arrays
    """
    n_inputs = 4 * n_bins + 2
    if inputs is not None:
        inputs = np.asarray(inputs, dtype=float)
        if inputs.shape != (n_steps, n_inputs):
            raise ValueError(f"inputs must have shape {(n_steps, n_inputs)}, got {inputs.shape}")
    if warm_start:
        fleet.warm_start(t0)

    rows = np.zeros((n_steps, len(FLEET_LOG_COLUMNS)))
    power = np.zeros(n_steps)
    for k in range(n_steps):
        if k > 0 and inputs is not None:
            apply_broadcast(fleet, inputs[k - 1], n_bins, broadcast_rng(seed, k))
        t = t0 + k * dt / 3600.0
        p_upper, p_lower = imm_flexibility(fleet, t)
        if noise_bound > 0:
            inject_soc_noise(fleet, noise_bound, stream_rng(seed, NOISE_STREAM, k))
        if on_step is not None:
            on_step(k, fleet)
        counts = fleet.mode_counts()
        _, power[k] = fleet_step(fleet, t, dt)
        rows[k] = log_row(k * dt, power[k], p_upper, p_lower, counts, fleet.switch_events)

    log = fleet_log_frame(rows)
    logger.info(f"Simulated {n_steps} steps of {len(fleet)} EVs; {fleet.switch_events} switching events")
    return FleetRun(
        log=log,
        power=power,
        inputs=inputs if inputs is not None else np.zeros((n_steps, n_inputs)),
        switch_events=fleet.switch_events,
    )
