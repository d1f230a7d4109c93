"""Accuracy sweep tool for the EV bHMM server."""

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List

import numpy as np
import pandas as pd

from ..metrics import prediction_metrics
from ..models import BenchInput, FleetScenario, SocDistribution
from ..plant import generate_history, rolling_prediction
from ..workspace import ExperimentWorkspace

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ["n_ev", "n_bins", "n_traj", "window", "distribution", "mape_pct", "fit_s"]


def _with_distribution(scenario: FleetScenario, kind: SocDistribution) -> FleetScenario:
    travel = scenario.travel_distributions.model_copy(update={
        "soc_initial": scenario.travel_distributions.soc_initial.model_copy(update={"kind": kind}),
        "soc_demanded": scenario.travel_distributions.soc_demanded.model_copy(update={"kind": kind}),
    })
    return scenario.model_copy(update={"travel_distributions": travel})


def bench_instance(task: Dict[str, Any]) -> Dict[str, Any]:
    """Score one sweep point; runs in a worker process and depends only on ``task``."""
    scenario = FleetScenario(**task["scenario"])
    scenario = _with_distribution(scenario.model_copy(update={"n_ev": task["n_ev"]}), SocDistribution(task["distribution"]))
    n_steps = task["window"] + task["horizon_steps"] + 1
    history = generate_history(scenario, task["seed"], task["n_traj"] - 1, task["start_hour"], n_steps, task["n_bins"])
    run = rolling_prediction(scenario, history, task["seed"], task["start_hour"], n_steps, task["n_bins"],
                             task["window"], task["n_traj"], task["n_p"], task["n_ev"],
                             em_options=task["em_options"])
    report = prediction_metrics(run.frame, "p_pred_kw", run.fit_times_s)
    return {
        "n_ev": task["n_ev"],
        "n_bins": task["n_bins"],
        "n_traj": task["n_traj"],
        "window": task["window"],
        "distribution": task["distribution"],
        "mape_pct": report.mape_pct,
        "fit_s": float(np.mean(run.fit_times_s)) if run.fit_times_s else float("nan"),
    }


def run_bench(workspace: ExperimentWorkspace, params: Dict[str, Any]) -> Dict[str, Any]:
    """Sweep fleet size, bins, trajectory count, window length and SOC law.

    Sweep points run in separate processes; rows keep the sweep order whatever the completion order.

    Args:
        workspace: Open experiment workspace
        params: Parameters matching BenchInput

    Returns:
        Dictionary with the sweep table path and its rows
    """
    input_data = BenchInput(**params)
    workspace.ensure_open()

    scenario = workspace.load_scenario(input_data.scenario_path)
    horizon_steps = max(1, int(round(input_data.horizon_h * 3600.0 / scenario.dt)))
    em_options = dict(workspace.em_options(), workers=1)
    tasks: List[Dict[str, Any]] = [
        {
            "scenario": scenario.model_dump(mode="json"),
            "n_ev": n_ev,
            "n_bins": n_bins,
            "n_traj": n_traj,
            "window": window,
            "distribution": distribution.value,
            "seed": input_data.seed,
            "start_hour": input_data.start_hour,
            "horizon_steps": horizon_steps,
            "n_p": input_data.n_p,
            "em_options": em_options,
        }
        for n_ev, n_bins, n_traj, window, distribution in itertools.product(
            input_data.n_ev_values, input_data.n_bins_values, input_data.n_traj_values,
            input_data.window_values, input_data.distributions,
        )
    ]
    logger.info(f"Running {len(tasks)} sweep points on {input_data.workers} workers")
    if input_data.workers > 1:
        with ProcessPoolExecutor(max_workers=input_data.workers) as pool:
            rows = list(pool.map(bench_instance, tasks))
    else:
        rows = [bench_instance(task) for task in tasks]

    frame = pd.DataFrame(rows, columns=BENCH_COLUMNS)
    path = workspace.write_frame("bench.csv", frame)
    return {
        "bench": str(path),
        "rows": frame.to_dict(orient="records"),
        "count": len(frame),
    }
