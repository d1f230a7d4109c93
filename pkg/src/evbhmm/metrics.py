"""Tracking and frequency-quality metrics."""

import logging
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .models import MetricsReport

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["mape_pct", "mae_mw", "max_abs_df_hz", "deadband_residency_pct", "mean_fit_s", "bytes_per_cycle"]

# References at or below this magnitude (kW) are left out of the percentage error
MAPE_FLOOR_KW = 1e-6


class MetricsError(Exception):
    """Raised when metrics cannot be computed from the given series."""
    pass


def compute_metrics(
    reference: Sequence[float],
    actual: Sequence[float],
    delta_f: Optional[Sequence[float]] = None,
    f_deadband: float = 0.1,
    fit_times_s: Sequence[float] = (),
    bytes_per_cycle: Optional[int] = None,
) -> MetricsReport:
    """MAPE (%) and MAE (MW) of ``actual`` against ``reference`` (both kW), plus frequency statistics.

    Raises:
        MetricsError: On empty or misaligned series
    """
    ref = np.asarray(reference, dtype=float)
    act = np.asarray(actual, dtype=float)
    if ref.size == 0:
        raise MetricsError("no samples to score")
    if ref.shape != act.shape:
        raise MetricsError(f"reference {ref.shape} and actual {act.shape} are misaligned")

    error = np.abs(ref - act)
    scored = np.abs(ref) > MAPE_FLOOR_KW
    if np.any(scored):
        mape = 100.0 * float(np.mean(error[scored] / np.abs(ref[scored])))
    else:
        logger.warning("Every reference is zero; MAPE reported as 0")
        mape = 0.0
    report = MetricsReport(
        mape_pct=mape,
        mae_mw=float(np.mean(error)) / 1000.0,
        fit_wall_times_s=[float(t) for t in fit_times_s],
        bytes_per_cycle=bytes_per_cycle,
        n_steps=int(ref.size),
    )
    if delta_f is not None:
        df = np.abs(np.asarray(delta_f, dtype=float))
        report.max_abs_df_hz = float(df.max()) if df.size else 0.0
        report.deadband_residency_pct = 100.0 * float(np.mean(df <= f_deadband)) if df.size else 100.0
    return report


def runlog_metrics(
    log: pd.DataFrame,
    f_deadband: float = 0.1,
    fit_times_s: Sequence[float] = (),
    bytes_per_cycle: Optional[int] = None,
) -> MetricsReport:
    """Score EV tracking of a RunLog (real power against the reference set for each step)."""
    return compute_metrics(log["p_ref_kw"], log["p_ev_real_kw"], log["delta_f_hz"], f_deadband,
                           fit_times_s, bytes_per_cycle)


def prediction_metrics(frame: pd.DataFrame, column: str = "p_pred_kw", fit_times_s: Sequence[float] = ()) -> MetricsReport:
    """Score a prediction table column against the measured power."""
    return compute_metrics(frame["p_kw"], frame[column], fit_times_s=fit_times_s)


def metrics_frame(report: MetricsReport) -> pd.DataFrame:
    """One-row table with unit-suffixed columns."""
    mean_fit = float(np.mean(report.fit_wall_times_s)) if report.fit_wall_times_s else float("nan")
    return pd.DataFrame([[
        report.mape_pct,
        report.mae_mw,
        report.max_abs_df_hz if report.max_abs_df_hz is not None else float("nan"),
        report.deadband_residency_pct if report.deadband_residency_pct is not None else float("nan"),
        mean_fit,
        report.bytes_per_cycle if report.bytes_per_cycle is not None else -1,
    ]], columns=METRICS_COLUMNS)
