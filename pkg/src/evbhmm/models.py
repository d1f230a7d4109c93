"""Pydantic models for input validation and output structuring."""

from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# Enumerations
class Mode(IntEnum):
    """Operating mode of one EV (integer valued so fleets store modes in int8 arrays)."""
    CM = 0  # Charging
    IM = 1  # Idle (including fully charged / fully discharged idle)
    DM = 2  # Discharging
    FCM = 3  # Forced charging
    OFFLINE = 4  # Not connected


class SocDistribution(str, Enum):
    """Sampling law for SOC travel parameters."""
    TRUNCNORM = "truncnorm"
    UNIFORM = "uniform"


class ControlMethod(str, Enum):
    """Controller driving the regulation loop."""
    BHMM = "bhmm"  # Identified bilinear HMM, aggregated data only
    ESSM = "essm"  # Model-based baseline built from reported SOC
    NONE = "none"  # No EV participation, CG only


class Command(str, Enum):
    """CLI subcommands."""
    SIMULATE_FLEET = "simulate-fleet"
    GEN_DATASET = "gen-dataset"
    FIT = "fit"
    PREDICT = "predict"
    REGULATE = "regulate"
    BENCH = "bench"


# Fleet scenario
class ChargerLevel(BaseModel):
    """One rated charging level and its share of the fleet."""
    power_kw: float = Field(..., gt=0, description="Rated charging/discharging power (kW)")
    proportion: float = Field(..., ge=0, le=1, description="Share of EVs at this level")


class TravelDistribution(BaseModel):
    """Truncated normal (or uniform) law over [low, high]."""
    mean: float = Field(..., description="Mean of the untruncated normal")
    std: float = Field(..., gt=0, description="Standard deviation of the untruncated normal")
    low: float = Field(..., description="Lower truncation bound")
    high: float = Field(..., description="Upper truncation bound")
    kind: SocDistribution = Field(default=SocDistribution.TRUNCNORM, description="truncnorm or uniform over [low, high]")

    @model_validator(mode="after")
    def check_bounds(self) -> "TravelDistribution":
        if not self.low < self.high:
            raise ValueError(f"inverted bounds: low={self.low} >= high={self.high}")
        return self


def _default_mixture() -> List[ChargerLevel]:
    return [
        ChargerLevel(power_kw=6.2, proportion=0.8525),
        ChargerLevel(power_kw=7.2, proportion=0.1380),
        ChargerLevel(power_kw=9.6, proportion=0.0021),
        ChargerLevel(power_kw=11.5, proportion=0.0053),
        ChargerLevel(power_kw=19.2, proportion=0.0021),
    ]


class TravelDistributions(BaseModel):
    """Traveling parameters; times in hours before the modulo-24 wrap."""
    soc_initial: TravelDistribution = Field(default_factory=lambda: TravelDistribution(mean=0.3, std=0.05, low=0.2, high=0.4))
    soc_demanded: TravelDistribution = Field(default_factory=lambda: TravelDistribution(mean=0.8, std=0.03, low=0.7, high=0.9))
    t_arrive: TravelDistribution = Field(default_factory=lambda: TravelDistribution(mean=17.5, std=3.4, low=5.5, high=29.5))
    t_depart: TravelDistribution = Field(default_factory=lambda: TravelDistribution(mean=8.9, std=3.4, low=-3.1, high=20.9))


class FleetScenario(BaseModel):
    """Population description sampled by fleet.sample_fleet."""
    model_config = ConfigDict(extra="forbid")

    n_ev: int = Field(default=10000, ge=0, description="Number of EVs (N_EV)")
    charger_mixture: List[ChargerLevel] = Field(default_factory=_default_mixture, description="(power, proportion) pairs")
    eff_range: Tuple[float, float] = Field(default=(0.88, 0.95), description="Uniform bounds of the efficiency")
    capacity_range: Tuple[float, float] = Field(default=(20.0, 30.0), description="Uniform bounds of the capacity (kWh)")
    travel_distributions: TravelDistributions = Field(default_factory=TravelDistributions)
    s_min: float = Field(default=0.0, ge=0, le=1, description="Lower SOC limit")
    s_max: float = Field(default=1.0, ge=0, le=1, description="Upper SOC limit")
    dt: float = Field(default=15.0, gt=0, description="Simulation step in seconds")
    seed: int = Field(default=0, ge=0, lt=2**64, description="64-bit sampling seed")

    @field_validator("charger_mixture")
    @classmethod
    def check_mixture(cls, v: List[ChargerLevel]) -> List[ChargerLevel]:
        if not v:
            raise ValueError("charger_mixture is empty")
        total = sum(level.proportion for level in v)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"charger_mixture proportions sum to {total}, expected 1")
        return v

    @field_validator("eff_range", "capacity_range")
    @classmethod
    def check_range(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if not 0 < v[0] <= v[1]:
            raise ValueError(f"inverted or non-positive range {v}")
        return v

    @model_validator(mode="after")
    def check_soc_limits(self) -> "FleetScenario":
        if not self.s_min < self.s_max:
            raise ValueError(f"s_min={self.s_min} must be below s_max={self.s_max}")
        if self.eff_range[1] > 1:
            raise ValueError("efficiency must lie in (0, 1]")
        travel = self.travel_distributions
        if travel.soc_initial.high > travel.soc_demanded.low:
            raise ValueError("soc_initial range must lie below the soc_demanded range")
        if travel.soc_initial.low < self.s_min or travel.soc_demanded.high > self.s_max:
            raise ValueError("SOC travel ranges must lie inside [s_min, s_max]")
        return self


class EvAgent(BaseModel):
    """One EV: physical parameters, travel window, SOC and mode."""
    id: int
    p_charge: float = Field(..., gt=0, description="P_c (kW)")
    p_discharge: float = Field(..., gt=0, description="P_d (kW)")
    eff_charge: float = Field(..., gt=0, le=1)
    eff_discharge: float = Field(..., gt=0, le=1)
    capacity: float = Field(..., gt=0, description="Q (kWh)")
    t_arrive: float = Field(..., ge=0, lt=24, description="Clock hour of arrival")
    t_depart: float = Field(..., ge=0, lt=24, description="Clock hour of departure")
    soc_initial: float = Field(..., ge=0, le=1)
    soc_demanded: float = Field(..., ge=0, le=1)
    soc: float = Field(..., ge=0, le=1)
    mode: Mode = Mode.OFFLINE
    soc_reported: float = Field(..., ge=0, le=1, description="Copy read only by baselines")

    @model_validator(mode="after")
    def check_symmetric(self) -> "EvAgent":
        if self.p_charge != self.p_discharge or self.eff_charge != self.eff_discharge:
            raise ValueError("charging and discharging ratings must be equal per agent")
        if not self.soc_initial < self.soc_demanded:
            raise ValueError("soc_initial must be below soc_demanded")
        return self

    @property
    def overnight(self) -> bool:
        """True when the connection interval crosses midnight."""
        return self.t_depart < self.t_arrive


# Regulation
class RegulationConfig(BaseModel):
    """Frequency regulation and MPC parameters."""
    model_config = ConfigDict(extra="forbid")

    f_deadband: float = Field(default=0.1, gt=0, description="Dead band (Hz)")
    h: float = Field(default=120.0, gt=0, description="Inertia constant (MW s/Hz)")
    d: float = Field(default=20.0, gt=0, description="Damping (MW/Hz)")
    ramp: float = Field(default=50.0, gt=0, description="CG ramp rate r_g (MW/min)")
    cg_limits: Tuple[float, float] = Field(default=(0.0, 500.0), description="CG output limits (MW)")
    dt: float = Field(default=15.0, gt=0, description="Control interval (s)")
    swing_substeps: int = Field(default=15, ge=1, description="Euler substeps of the swing equation per interval")
    n_p: int = Field(default=12, ge=1, description="Scheduled refit period (steps)")
    q_w: float = Field(default=1.0, gt=0, description="Tracking weight")
    r_w: float = Field(default=1e-6, gt=0, description="Input weight")
    band_penalty: float = Field(default=1e6, gt=0, description="Soft flexibility-band weight")
    mpc_tol: float = Field(default=1e-8, gt=0, description="Projected-gradient stopping norm")
    mpc_max_iter: int = Field(default=500, ge=1)
    lambda_iterations: int = Field(default=30, ge=1, description="Bisection iterations for lambda")
    refit_error: float = Field(default=0.05, gt=0, description="Err_p above which a refit is forced")

    @field_validator("cg_limits")
    @classmethod
    def check_cg_limits(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if not v[0] < v[1]:
            raise ValueError(f"inverted CG limits {v}")
        return v

    @property
    def ramp_per_step(self) -> float:
        """Ramp limit expressed in MW per control step."""
        return self.ramp * self.dt / 60.0

    @property
    def lambda_max(self) -> float:
        return 2.0 * (self.h / self.dt + self.d)


class GridState(BaseModel):
    """Single-bus grid state; powers in MW."""
    delta_f: float = Field(default=0.0, description="Frequency deviation f - f_nom (Hz)")
    p_cg: float = Field(default=0.0, description="Conventional generation (MW)")
    p_load: float = Field(default=0.0, description="Load (MW)")
    p_wind: float = Field(default=0.0, description="Wind generation (MW)")
    p_ev: float = Field(default=0.0, description="EV fleet output, discharge positive (MW)")
    lam: float = Field(default=0.0, ge=0, description="Regulation bias factor lambda (MW/Hz)")
    inertia: float = Field(default=120.0, gt=0, description="H (MW s/Hz)")
    damping: float = Field(default=20.0, gt=0, description="D (MW/Hz)")

    @property
    def imbalance(self) -> float:
        """Generation minus load (MW)."""
        return self.p_cg + self.p_wind + self.p_ev - self.p_load


class DispatchDecision(BaseModel):
    """Split of the demanded regulation power between EVs and CG."""
    dp_ev: float = Field(..., description="EV share (kW)")
    dp_cg: float = Field(..., description="CG share (MW)")
    p_ref: float = Field(..., description="MPC power reference (kW)")


# Reports
class FitReport(BaseModel):
    """Per-iteration trace of one EM fit."""
    loglik: List[float] = Field(default_factory=list)
    min_eig: List[float] = Field(default_factory=list)
    elapsed_s: List[float] = Field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    wall_time_s: float = 0.0
    restart_logliks: List[float] = Field(default_factory=list, description="Final log-likelihood of each restart")

    def to_frame(self) -> pd.DataFrame:
        """Rows `iter,loglik,min_eig,elapsed_s`; iteration 0 is the initial parameters."""
        n = len(self.loglik)
        min_eig = [float("nan")] + list(self.min_eig)
        return pd.DataFrame({
            "iter": list(range(n)),
            "loglik": self.loglik,
            "min_eig": min_eig[:n],
            "elapsed_s": self.elapsed_s[:n],
        })


class MetricsReport(BaseModel):
    """Tracking and frequency-quality summary of a run or prediction."""
    mape_pct: float = Field(..., description="Mean absolute percentage error (%)")
    mae_mw: float = Field(..., description="Mean absolute error (MW)")
    max_abs_df_hz: Optional[float] = Field(default=None, description="max |delta f| (Hz)")
    deadband_residency_pct: Optional[float] = Field(default=None, description="Steps with |delta f| inside the dead band (%)")
    fit_wall_times_s: List[float] = Field(default_factory=list)
    bytes_per_cycle: Optional[int] = Field(default=None, description="Communication per control cycle (bytes)")
    n_steps: int = 0


# CLI
class Overrides(BaseModel):
    """Hyperparameter overrides accepted by every command."""
    n_bins: Optional[int] = Field(default=None, ge=1)
    n_traj: Optional[int] = Field(default=None, ge=1)
    window: Optional[int] = Field(default=None, ge=1)
    n_ev: Optional[int] = Field(default=None, ge=0)
    noise_bound: Optional[float] = Field(default=None, ge=0)
    horizon_h: Optional[float] = Field(default=None, gt=0)


class ExperimentSpec(BaseModel):
    """One CLI invocation."""
    command: Command
    scenario: Optional[Path] = None
    config: Optional[Path] = None
    seed: int = Field(default=0, ge=0, lt=2**64)
    output_dir: Path
    overrides: Overrides = Field(default_factory=Overrides)
    options: Dict[str, Any] = Field(default_factory=dict, description="Command-specific flags")

    @model_validator(mode="after")
    def check_files(self) -> "ExperimentSpec":
        for label, path in (("scenario", self.scenario), ("config", self.config)):
            if path is not None and not path.is_file():
                raise ValueError(f"{label} file not found: {path}")
        return self


# Tool inputs
class SimulateFleetInput(BaseModel):
    """Input for running the microsimulation oracle."""
    scenario_path: Optional[str] = Field(default=None, description="Scenario JSON; defaults to the built-in fleet")
    n_ev: Optional[int] = Field(default=None, ge=0, description="Override fleet size")
    seed: int = Field(default=0, ge=0)
    start_hour: float = Field(default=17.0, ge=0, lt=24, description="Clock hour of the first step")
    horizon_h: float = Field(default=1.0, gt=0, description="Simulated duration (hours)")
    n_bins: int = Field(default=3, ge=1)
    excitation_cap: float = Field(default=0.0, ge=0, le=1, description="Random broadcast cap; 0 runs uncontrolled")
    noise_bound: float = Field(default=0.0, ge=0, description="Reported-SOC corruption bound")


class GenDatasetInput(BaseModel):
    """Input for generating excited trajectory days."""
    scenario_path: Optional[str] = None
    n_ev: Optional[int] = Field(default=None, ge=0)
    seed: int = Field(default=0, ge=0)
    n_days: int = Field(default=299, ge=1, description="Historical days to simulate (L - 1)")
    start_hour: float = Field(default=17.0, ge=0, lt=24)
    horizon_h: float = Field(default=1.25, gt=0, description="Duration of each day log (hours)")
    n_bins: int = Field(default=3, ge=1)
    excitation_cap: float = Field(default=0.3, gt=0, le=1, description="Per-entry cap of the random inputs")
    full_range: bool = Field(default=False, description="Draw inputs from U(0, 1) instead of U(0, cap)")
    dataset_name: str = Field(default="dataset")


class FitInput(BaseModel):
    """Input for fitting a bHMM on a generated dataset."""
    dataset_name: str = Field(default="dataset")
    window_end: Optional[int] = Field(default=None, ge=1, description="Step k closing the window; defaults to the last step")
    n_traj: Optional[int] = Field(default=None, ge=1, description="L; defaults to all days")
    window: int = Field(default=60, ge=1, description="K")
    n_ev_estimate: int = Field(default=10000, ge=1)
    seed: int = Field(default=0, ge=0)
    restarts: int = Field(default=1, ge=1, description="Independent initializations; best likelihood kept")
    params_name: str = Field(default="params")


class PredictInput(BaseModel):
    """Input for rolling power/flexibility prediction on a live day."""
    dataset_name: str = Field(default="dataset")
    scenario_path: Optional[str] = None
    n_ev: Optional[int] = Field(default=None, ge=1)
    seed: int = Field(default=0, ge=0)
    n_traj: Optional[int] = Field(default=None, ge=1)
    window: int = Field(default=60, ge=1)
    n_p: int = Field(default=12, ge=1, description="Steps between refits and prediction horizon")


class RegulateInput(BaseModel):
    """Input for a closed-loop frequency regulation run."""
    scenario_path: Optional[str] = None
    config_path: Optional[str] = None
    profiles_path: Optional[str] = None
    dataset_name: Optional[str] = Field(default=None, description="History days; generated when absent")
    n_ev: Optional[int] = Field(default=None, ge=1)
    seed: int = Field(default=0, ge=0)
    method: ControlMethod = ControlMethod.BHMM
    start_hour: float = Field(default=17.0, ge=0, lt=24)
    horizon_h: float = Field(default=5.0, gt=0)
    n_bins: int = Field(default=3, ge=1)
    n_traj: int = Field(default=300, ge=1)
    window: int = Field(default=60, ge=1)
    noise_bound: float = Field(default=0.0, ge=0)
    imbalance_mw: float = Field(default=10.0, ge=0, description="Peak synthetic imbalance when no profiles are given")


class BenchInput(BaseModel):
    """Input for accuracy sweeps."""
    scenario_path: Optional[str] = None
    seed: int = Field(default=0, ge=0)
    n_ev_values: List[int] = Field(default_factory=lambda: [200, 1000, 5000, 10000])
    n_bins_values: List[int] = Field(default_factory=lambda: [3])
    n_traj_values: List[int] = Field(default_factory=lambda: [300])
    window_values: List[int] = Field(default_factory=lambda: [60])
    distributions: List[SocDistribution] = Field(default_factory=lambda: [SocDistribution.TRUNCNORM])
    start_hour: float = Field(default=17.0, ge=0, lt=24)
    horizon_h: float = Field(default=1.0, gt=0, description="Prediction span after the first window")
    n_p: int = Field(default=12, ge=1)
    workers: int = Field(default=1, ge=1)


class DescribeModelInput(BaseModel):
    """Input for summarizing a saved parameter bundle."""
    params_name: str = Field(default="params")
