"""Dataset generation tools for the EV bHMM server."""

import logging
from typing import Any, Dict

from ..models import GenDatasetInput
from ..plant import generate_history
from ..workspace import ExperimentWorkspace

logger = logging.getLogger(__name__)


def generate_dataset(workspace: ExperimentWorkspace, params: Dict[str, Any]) -> Dict[str, Any]:
    """Simulate excited history days and write them as day logs.

    Args:
        workspace: Open experiment workspace
        params: Parameters matching GenDatasetInput

    Returns:
        Dictionary with the dataset directory and its shape
    """
    input_data = GenDatasetInput(**params)
    workspace.ensure_open()

    scenario = workspace.load_scenario(input_data.scenario_path, n_ev=input_data.n_ev)
    cap = 1.0 if input_data.full_range else input_data.excitation_cap
    n_steps = max(2, int(round(input_data.horizon_h * 3600.0 / scenario.dt)))
    logs = generate_history(scenario, input_data.seed, input_data.n_days, input_data.start_hour,
                            n_steps, input_data.n_bins, cap)
    manifest = workspace.write_day_logs(input_data.dataset_name, logs, {
        "scenario": scenario.model_dump(mode="json"),
        "seed": input_data.seed,
        "start_hour": input_data.start_hour,
        "n_steps": n_steps,
        "n_bins": input_data.n_bins,
        "excitation_cap": cap,
    })

    logger.info(f"Dataset '{input_data.dataset_name}': {len(logs)} days x {n_steps} steps")
    return {
        "dataset": str(workspace.path(input_data.dataset_name)),
        "manifest": str(manifest),
        "n_days": len(logs),
        "n_steps": n_steps,
        "n_inputs": 4 * input_data.n_bins + 2,
        "excitation_cap": cap,
    }
