"""Wind and load profiles driving the regulation scenario."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PROFILE_COLUMNS = ["t_s", "p_wind_mw", "p_load_mw"]

# Component periods of the synthetic profiles (s)
SYNTHETIC_PERIODS_S = (1200.0, 3600.0, 10800.0)


class ProfileError(Exception):
    """Raised for malformed profile tables."""
    pass


@dataclass
class Profiles:
    """Time series sampled at ``t_s`` seconds from the start of regulation, linearly interpolated."""
    frame: pd.DataFrame

    def __post_init__(self):
        missing = [c for c in PROFILE_COLUMNS if c not in self.frame.columns]
        if missing:
            raise ProfileError(f"profile table lacks columns {missing}")
        if self.frame.empty:
            raise ProfileError("profile table is empty")
        t = self.frame["t_s"].to_numpy(dtype=float)
        if np.any(np.diff(t) <= 0):
            raise ProfileError("profile timestamps must be strictly increasing")
        if self.frame[PROFILE_COLUMNS].isna().any().any():
            raise ProfileError("profile table contains missing values")

    @property
    def duration_s(self) -> float:
        return float(self.frame["t_s"].iloc[-1])

    def _at(self, column: str, t_s: float) -> float:
        return float(np.interp(t_s, self.frame["t_s"].to_numpy(dtype=float), self.frame[column].to_numpy(dtype=float)))

    def wind(self, t_s: float) -> float:
        return self._at("p_wind_mw", t_s)

    def load(self, t_s: float) -> float:
        return self._at("p_load_mw", t_s)

    def imbalance(self, t_s: float) -> float:
        """Wind minus load (MW)."""
        return self.wind(t_s) - self.load(t_s)


def load_profiles(path: Union[str, Path]) -> Profiles:
    """Read a `t_s,p_wind_mw,p_load_mw` CSV."""
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise ProfileError(f"cannot read profiles {path}: {e}") from e
    profiles = Profiles(frame=frame)
    logger.info(f"Loaded {len(frame)} profile rows spanning {profiles.duration_s / 3600:.2f} h from {path}")
    return profiles


def flat_profiles(duration_s: float, wind_mw: float = 60.0, load_mw: float = 300.0) -> Profiles:
    return Profiles(frame=pd.DataFrame({"t_s": [0.0, max(duration_s, 1.0)],
                                        "p_wind_mw": [wind_mw, wind_mw],
                                        "p_load_mw": [load_mw, load_mw]}))


def synthetic_profiles(
    duration_s: float,
    peak_imbalance_mw: float = 10.0,
    seed: int = 0,
    base_wind_mw: float = 60.0,
    base_load_mw: float = 300.0,
    resolution_s: float = 60.0,
) -> Profiles:
    """Sum-of-sinusoids wind and load with seeded noise.

    The variation is scaled so the largest deviation of wind minus load from its initial
    value equals ``peak_imbalance_mw``.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(0.0, duration_s + resolution_s, resolution_s)
    components = []
    for _ in range(2):
        phases = rng.uniform(0.0, 2.0 * np.pi, size=len(SYNTHETIC_PERIODS_S))
        weights = rng.uniform(0.5, 1.0, size=len(SYNTHETIC_PERIODS_S))
        wave = sum(w * np.sin(2.0 * np.pi * t / period + phase)
                   for w, period, phase in zip(weights, SYNTHETIC_PERIODS_S, phases))
        components.append(wave + 0.1 * rng.standard_normal(len(t)))
    wind_var, load_var = components
    deviation = (wind_var - load_var) - (wind_var[0] - load_var[0])
    peak = float(np.max(np.abs(deviation)))
    scale = peak_imbalance_mw / peak if peak > 0 else 0.0
    return Profiles(frame=pd.DataFrame({
        "t_s": t,
        "p_wind_mw": base_wind_mw + scale * wind_var,
        "p_load_mw": base_load_mw + scale * load_var,
    }))
