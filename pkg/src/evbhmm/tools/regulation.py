"""Closed-loop regulation tool for the EV bHMM server."""

import logging
from typing import Any, Dict

import numpy as np

from ..control.profiles import load_profiles, synthetic_profiles
from ..metrics import metrics_frame, runlog_metrics
from ..models import ControlMethod, RegulateInput
from ..plant import generate_history, regulate_fleet
from ..workspace import ExperimentWorkspace

logger = logging.getLogger(__name__)


def run_regulation(workspace: ExperimentWorkspace, params: Dict[str, Any]) -> Dict[str, Any]:
    """Run the frequency regulation loop on a simulated fleet.

    Args:
        workspace: Open experiment workspace
        params: Parameters matching RegulateInput

    Returns:
        Dictionary with artifact paths and the MetricsReport fields
    """
    input_data = RegulateInput(**params)
    workspace.ensure_open()

    scenario = workspace.load_scenario(input_data.scenario_path, n_ev=input_data.n_ev)
    config = workspace.load_regulation_config(input_data.config_path, dt=scenario.dt)
    n_steps = max(1, int(round(input_data.horizon_h * 3600.0 / config.dt)))
    day_steps = input_data.window + n_steps

    outputs: Dict[str, Any] = {}
    if input_data.profiles_path:
        profiles = load_profiles(input_data.profiles_path)
    else:
        profiles = synthetic_profiles(n_steps * config.dt, input_data.imbalance_mw, seed=input_data.seed)
        outputs["profiles"] = str(workspace.write_frame("profiles.csv", profiles.frame))

    history = []
    if input_data.method is ControlMethod.BHMM and input_data.n_traj > 1:
        if input_data.dataset_name:
            history = workspace.read_day_logs(input_data.dataset_name)
        else:
            history = generate_history(scenario, input_data.seed, input_data.n_traj - 1, input_data.start_hour,
                                       day_steps, input_data.n_bins)

    outcome = regulate_fleet(
        scenario, history, profiles, config, input_data.method, input_data.seed, input_data.start_hour,
        n_steps, input_data.n_bins, input_data.window, input_data.n_traj,
        noise_bound=input_data.noise_bound, em_options=workspace.em_options(),
    )
    run = outcome.run
    report = runlog_metrics(run.log, config.f_deadband, run.fit_times_s, outcome.bytes_per_cycle)

    outputs["run_log"] = str(workspace.write_frame("run_log.csv", run.log))
    outputs["fleet_log"] = str(workspace.write_frame("fleet_log.csv", outcome.fleet_log))
    outputs["metrics"] = str(workspace.write_frame("metrics.csv", metrics_frame(report)))
    if run.params is not None:
        outputs["params"] = str(workspace.save_params("params", run.params))

    logger.info(f"Regulation with {input_data.method.value}: MAPE={report.mape_pct:.3f}%, "
                f"max|df|={report.max_abs_df_hz:.4f} Hz")
    return {
        **outputs,
        "method": input_data.method.value,
        "n_steps": n_steps,
        "mape_pct": report.mape_pct,
        "mae_mw": report.mae_mw,
        "max_abs_df_hz": report.max_abs_df_hz,
        "deadband_residency_pct": report.deadband_residency_pct,
        "bytes_per_cycle": report.bytes_per_cycle,
        "refits": len(run.fit_times_s),
        "refit_failures": run.refit_failures,
        "mean_fit_s": float(np.mean(run.fit_times_s)) if run.fit_times_s else None,
        "mean_mpc_s": float(np.mean(run.mpc_times_s)) if run.mpc_times_s else None,
        "max_mpc_s": float(np.max(run.mpc_times_s)) if run.mpc_times_s else None,
    }
