"""Fleet simulation tools for the EV bHMM server."""

import logging
from typing import Any, Dict

from ..essm import build_essm, fleet_stats, matrix_frame
from ..fleet import sample_fleet, simulate_fleet
from ..models import SimulateFleetInput
from ..plant import day_seed, excitation_inputs
from ..workspace import ExperimentWorkspace

logger = logging.getLogger(__name__)


def run_simulation(workspace: ExperimentWorkspace, params: Dict[str, Any]) -> Dict[str, Any]:
    """Run the individual-EV oracle and write its FleetLog.

    The eSSM matrices of the fleet at the first step are exported alongside.

    Args:
        workspace: Open experiment workspace
        params: Parameters matching SimulateFleetInput

    Returns:
        Dictionary with artifact paths and summary statistics
    """
    input_data = SimulateFleetInput(**params)
    workspace.ensure_open()

    scenario = workspace.load_scenario(input_data.scenario_path, n_ev=input_data.n_ev, seed=input_data.seed)
    fleet = sample_fleet(scenario)
    n_steps = max(1, int(round(input_data.horizon_h * 3600.0 / scenario.dt)))
    inputs = None
    if input_data.excitation_cap > 0:
        inputs = excitation_inputs(input_data.seed, 0, n_steps, input_data.n_bins, input_data.excitation_cap)

    snapshot = {}

    def capture_first(k, fl):
        if k == 0:
            snapshot["stats"] = fleet_stats(fl)

    run = simulate_fleet(fleet, input_data.start_hour, n_steps, scenario.dt, input_data.n_bins,
                         inputs=inputs, seed=day_seed(input_data.seed, 0),
                         noise_bound=input_data.noise_bound, on_step=capture_first)
    log_path = workspace.write_frame("fleet_log.csv", run.log)

    matrices = {}
    if snapshot["stats"].n_online > 0:
        model = build_essm(snapshot["stats"], input_data.n_bins, scenario.dt, scenario.s_min, scenario.s_max)
        for name, matrix in (("A", model.A), ("B", model.B), ("C", model.C)):
            matrices[name] = str(workspace.write_frame(f"essm_{name}.csv", matrix_frame(matrix)))

    logger.info(f"Simulated {len(fleet)} EVs for {n_steps} steps from hour {input_data.start_hour}")
    return {
        "fleet_log": str(log_path),
        "essm_matrices": matrices,
        "n_ev": len(fleet),
        "n_steps": n_steps,
        "switch_events": run.switch_events,
        "mean_power_kw": float(run.power.mean()),
        "min_power_kw": float(run.power.min()),
        "max_power_kw": float(run.power.max()),
    }
