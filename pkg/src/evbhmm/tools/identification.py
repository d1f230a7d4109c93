"""Identification and prediction tools for the EV bHMM server."""

import logging
from typing import Any, Dict

import numpy as np

from ..ident import FitAbortedError, build_dataset, fit_best_of
from ..metrics import metrics_frame, prediction_metrics
from ..models import DescribeModelInput, FitInput, FleetScenario, PredictInput
from ..plant import rolling_prediction
from ..workspace import ArtifactError, ExperimentWorkspace

logger = logging.getLogger(__name__)


def _dataset_scenario(workspace: ExperimentWorkspace, manifest: Dict[str, Any], scenario_path, n_ev) -> FleetScenario:
    if scenario_path:
        return workspace.load_scenario(scenario_path, n_ev=n_ev)
    data = dict(manifest.get("scenario") or {})
    if n_ev is not None:
        data["n_ev"] = n_ev
    return workspace.load_scenario(None, **data)


def fit_model(workspace: ExperimentWorkspace, params: Dict[str, Any]) -> Dict[str, Any]:
    """Fit a bHMM by EM on the trajectory window of a stored dataset.

    The last day of the dataset plays the live day; the window ends at ``window_end``.

    Args:
        workspace: Open experiment workspace
        params: Parameters matching FitInput

    Returns:
        Dictionary with the fit report, parameter bundle path and convergence summary
    """
    input_data = FitInput(**params)
    workspace.ensure_open()

    logs = workspace.read_day_logs(input_data.dataset_name)
    manifest = workspace.read_manifest(input_data.dataset_name)
    if not logs:
        raise ArtifactError(f"dataset '{input_data.dataset_name}' has no days")
    n_bins = int(manifest["n_bins"])
    n_traj = input_data.n_traj or len(logs)
    k = input_data.window_end if input_data.window_end is not None else len(logs[-1]) - 1
    dataset = build_dataset(logs[:-1], logs[-1], k, input_data.window, n_traj)

    seeds = np.random.SeedSequence(input_data.seed).spawn(input_data.restarts)
    try:
        fitted, report = fit_best_of(dataset, n_bins, input_data.n_ev_estimate, seeds, **workspace.em_options())
    except FitAbortedError as e:
        workspace.write_frame("fit_report.csv", e.report.to_frame())
        raise

    report_path = workspace.write_frame("fit_report.csv", report.to_frame())
    params_path = workspace.save_params(input_data.params_name, fitted)
    logger.info(f"Fitted {input_data.params_name}: loglik={report.loglik[-1]:.4f} "
                f"after {report.iterations} iterations")
    return {
        "fit_report": str(report_path),
        "params": str(params_path),
        "loglik": report.loglik[-1],
        "iterations": report.iterations,
        "converged": report.converged,
        "min_eig": report.min_eig[-1] if report.min_eig else None,
        "wall_time_s": report.wall_time_s,
        "restart_logliks": report.restart_logliks,
        "n_traj": dataset.n_traj,
        "window": dataset.window,
    }


def predict_power(workspace: ExperimentWorkspace, params: Dict[str, Any]) -> Dict[str, Any]:
    """Rolling refit-and-predict on a fresh live day against the oracle and the eSSM baseline.

    Args:
        workspace: Open experiment workspace
        params: Parameters matching PredictInput

    Returns:
        Dictionary with the prediction table path and MAPE of the bHMM and eSSM predictions
    """
    input_data = PredictInput(**params)
    workspace.ensure_open()

    logs = workspace.read_day_logs(input_data.dataset_name)
    manifest = workspace.read_manifest(input_data.dataset_name)
    scenario = _dataset_scenario(workspace, manifest, input_data.scenario_path, input_data.n_ev)
    n_traj = input_data.n_traj or len(logs) + 1
    run = rolling_prediction(
        scenario, logs, input_data.seed, float(manifest["start_hour"]), int(manifest["n_steps"]),
        int(manifest["n_bins"]), input_data.window, n_traj, input_data.n_p, scenario.n_ev,
        cap=float(manifest["excitation_cap"]), em_options=workspace.em_options(),
    )
    frame = run.frame
    prediction_path = workspace.write_frame("prediction.csv", frame)
    bhmm = prediction_metrics(frame, "p_pred_kw", run.fit_times_s)
    essm = prediction_metrics(frame, "p_essm_kw")
    metrics_path = workspace.write_frame("metrics.csv", metrics_frame(bhmm))

    in_band = (frame["p_lower_pred_kw"] <= frame["p_pred_kw"]) & (frame["p_pred_kw"] <= frame["p_upper_pred_kw"])
    return {
        "prediction": str(prediction_path),
        "metrics": str(metrics_path),
        "mape_pct": bhmm.mape_pct,
        "mae_mw": bhmm.mae_mw,
        "essm_mape_pct": essm.mape_pct,
        "band_ordered_pct": 100.0 * float(in_band.mean()),
        "n_fits": len(run.fit_times_s),
        "refit_failures": run.refit_failures,
        "mean_fit_s": float(np.mean(run.fit_times_s)) if run.fit_times_s else None,
    }


def describe_model(workspace: ExperimentWorkspace, params: Dict[str, Any]) -> Dict[str, Any]:
    """Summarize a saved parameter bundle.

    Args:
        workspace: Open experiment workspace
        params: Parameters matching DescribeModelInput

    Returns:
        Dictionary with dimensions, the spectrum of A and noise levels
    """
    input_data = DescribeModelInput(**params)
    workspace.ensure_open()

    model = workspace.load_params(input_data.params_name)
    eigenvalues = np.linalg.eigvals(model.A)
    order = np.argsort(-np.abs(eigenvalues))
    return {
        "n_state": model.n_state,
        "n_input": model.n_input,
        "n_bins": model.n_bins,
        "spectral_radius": float(np.max(np.abs(eigenvalues))),
        "eigenvalues_abs": [float(v) for v in np.abs(eigenvalues)[order]],
        "c0": model.c0,
        "c1": [float(v) for v in model.c1],
        "sigma_v": model.sigma_v,
        "sigma_w_trace": float(np.trace(model.sigma_w)),
        "drift_norm": float(np.linalg.norm(model.drift)),
    }
