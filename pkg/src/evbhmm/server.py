"""EV bHMM MCP Server implementation using FastMCP."""

import logging
import sys
from typing import Any, Dict, List, Optional

from mcp.server.fastmcp import FastMCP

from .config import get_config
from .tools import dataset, identification, regulation, simulation
from .tools.bench import run_bench
from .workspace import ExperimentWorkspace

# Configure logging (stderr; stdout carries the protocol)
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    stream=sys.stderr,
)
logger = logging.getLogger(__name__)

# Initialize FastMCP server
mcp = FastMCP("EV bHMM Server")

# Get configuration
config = get_config()

# Workspace shared by every tool (opened per request)
workspace = ExperimentWorkspace(config)


def _drop_none(params: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in params.items() if v is not None}


# Simulation Tools
@mcp.tool()
def simulate_fleet(
    n_ev: Optional[int] = None,
    seed: int = 0,
    start_hour: float = 17.0,
    horizon_h: float = 1.0,
    n_bins: int = 3,
    excitation_cap: float = 0.0,
    noise_bound: float = 0.0,
    scenario_path: Optional[str] = None,
) -> Dict[str, Any]:
    """Run the individual-EV microsimulation and write its fleet log.

    Args:
        n_ev: Fleet size override
        seed: Seed of every random stream
        start_hour: Clock hour of the first step
        horizon_h: Simulated duration in hours
        n_bins: SOC bins per mode
        excitation_cap: Cap of random broadcasts (0 runs uncontrolled)
        noise_bound: Reported-SOC corruption bound
        scenario_path: Scenario JSON file

    Returns:
        Dictionary with the fleet log path and power statistics
    """
    with workspace:
        return simulation.run_simulation(workspace, _drop_none({
            "n_ev": n_ev, "seed": seed, "start_hour": start_hour, "horizon_h": horizon_h,
            "n_bins": n_bins, "excitation_cap": excitation_cap, "noise_bound": noise_bound,
            "scenario_path": scenario_path,
        }))


@mcp.tool()
def gen_dataset(
    dataset_name: str = "dataset",
    n_days: int = 299,
    n_ev: Optional[int] = None,
    seed: int = 0,
    start_hour: float = 17.0,
    horizon_h: float = 1.25,
    n_bins: int = 3,
    excitation_cap: float = 0.3,
    full_range: bool = False,
    scenario_path: Optional[str] = None,
) -> Dict[str, Any]:
    """Simulate excited history days for identification.

    Args:
        dataset_name: Directory name inside the workspace
        n_days: Number of history days (L - 1)
        n_ev: Fleet size override
        seed: Seed of every random stream
        start_hour: Clock hour of the first step of each day
        horizon_h: Duration of each day log in hours
        n_bins: SOC bins per mode
        excitation_cap: Per-entry cap of the random inputs
        full_range: Draw inputs from U(0, 1)
        scenario_path: Scenario JSON file

    Returns:
        Dictionary with the dataset location and shape
    """
    with workspace:
        return dataset.generate_dataset(workspace, _drop_none({
            "dataset_name": dataset_name, "n_days": n_days, "n_ev": n_ev, "seed": seed,
            "start_hour": start_hour, "horizon_h": horizon_h, "n_bins": n_bins,
            "excitation_cap": excitation_cap, "full_range": full_range, "scenario_path": scenario_path,
        }))


# Identification Tools
@mcp.tool()
def fit_model(
    dataset_name: str = "dataset",
    window: int = 60,
    n_traj: Optional[int] = None,
    window_end: Optional[int] = None,
    n_ev_estimate: int = 10000,
    seed: int = 0,
    restarts: int = 1,
    params_name: str = "params",
) -> Dict[str, Any]:
    """Fit a bilinear HMM by EM on a stored dataset.

    Args:
        dataset_name: Dataset produced by gen_dataset
        window: Trajectory length K
        n_traj: Number of trajectories L (default: all days)
        window_end: Step closing the window (default: last step)
        n_ev_estimate: Fleet size guess for the initialization
        seed: Initialization seed
        restarts: Independent initializations; the best likelihood is kept
        params_name: Name of the saved parameter bundle

    Returns:
        Dictionary with the fit report, bundle path and final log-likelihood
    """
    with workspace:
        return identification.fit_model(workspace, _drop_none({
            "dataset_name": dataset_name, "window": window, "n_traj": n_traj, "window_end": window_end,
            "n_ev_estimate": n_ev_estimate, "seed": seed, "restarts": restarts, "params_name": params_name,
        }))


@mcp.tool()
def predict_power(
    dataset_name: str = "dataset",
    window: int = 60,
    n_traj: Optional[int] = None,
    n_p: int = 12,
    n_ev: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, Any]:
    """Rolling refit-and-predict of power and flexibility on a fresh live day.

    Args:
        dataset_name: History dataset
        window: Trajectory length K
        n_traj: Number of trajectories L (default: all days plus the live day)
        n_p: Steps between refits and prediction horizon
        n_ev: Fleet size override
        seed: Seed of the live day

    Returns:
        Dictionary with the prediction table path and MAPE figures
    """
    with workspace:
        return identification.predict_power(workspace, _drop_none({
            "dataset_name": dataset_name, "window": window, "n_traj": n_traj, "n_p": n_p,
            "n_ev": n_ev, "seed": seed,
        }))


@mcp.tool()
def describe_model(params_name: str = "params") -> Dict[str, Any]:
    """Summarize a saved parameter bundle (dimensions, spectrum of A, noise levels).

    Args:
        params_name: Name of the bundle in the workspace

    Returns:
        Dictionary with the model summary
    """
    with workspace:
        return identification.describe_model(workspace, {"params_name": params_name})


# Regulation Tools
@mcp.tool()
def regulate(
    method: str = "bhmm",
    horizon_h: float = 5.0,
    n_ev: Optional[int] = None,
    seed: int = 0,
    n_traj: int = 300,
    window: int = 60,
    n_bins: int = 3,
    noise_bound: float = 0.0,
    imbalance_mw: float = 10.0,
    dataset_name: Optional[str] = None,
    profiles_path: Optional[str] = None,
    scenario_path: Optional[str] = None,
    config_path: Optional[str] = None,
) -> Dict[str, Any]:
    """Run closed-loop frequency regulation with a simulated fleet.

    Args:
        method: bhmm, essm or none
        horizon_h: Regulation duration in hours
        n_ev: Fleet size override
        seed: Seed of every random stream
        n_traj: Trajectories per refit L
        window: Trajectory length K
        n_bins: SOC bins per mode
        noise_bound: Reported-SOC corruption bound
        imbalance_mw: Peak synthetic imbalance when no profiles are given
        dataset_name: History dataset (generated when absent)
        profiles_path: Wind/load CSV
        scenario_path: Scenario JSON file
        config_path: Regulation config JSON file

    Returns:
        Dictionary with the run log path and tracking/frequency metrics
    """
    with workspace:
        return regulation.run_regulation(workspace, _drop_none({
            "method": method, "horizon_h": horizon_h, "n_ev": n_ev, "seed": seed, "n_traj": n_traj,
            "window": window, "n_bins": n_bins, "noise_bound": noise_bound, "imbalance_mw": imbalance_mw,
            "dataset_name": dataset_name, "profiles_path": profiles_path, "scenario_path": scenario_path,
            "config_path": config_path,
        }))


@mcp.tool()
def bench(
    n_ev_values: Optional[List[int]] = None,
    n_bins_values: Optional[List[int]] = None,
    n_traj_values: Optional[List[int]] = None,
    window_values: Optional[List[int]] = None,
    distributions: Optional[List[str]] = None,
    horizon_h: float = 1.0,
    seed: int = 0,
    workers: int = 1,
) -> Dict[str, Any]:
    """Sweep prediction accuracy over fleet size, bins, trajectory count and window length.

    Args:
        n_ev_values: Fleet sizes (default 200, 1000, 5000, 10000)
        n_bins_values: SOC bins per mode
        n_traj_values: Trajectory counts L
        window_values: Window lengths K
        distributions: SOC laws (truncnorm, uniform)
        horizon_h: Prediction span after the first window
        seed: Seed of every random stream
        workers: Worker processes

    Returns:
        Dictionary with the sweep table
    """
    with workspace:
        return run_bench(workspace, _drop_none({
            "n_ev_values": n_ev_values, "n_bins_values": n_bins_values, "n_traj_values": n_traj_values,
            "window_values": window_values, "distributions": distributions, "horizon_h": horizon_h,
            "seed": seed, "workers": workers,
        }))


# Main entry point
def main():
    """Run the EV bHMM MCP server in stdio mode.

    Usage:
        python -m evbhmm.server
        # or
        ev-bhmm-mcp-server
    """
    logger.info("Starting EV bHMM MCP Server (stdio mode)...")
    logger.info(f"Artifacts under {config.output_dir}")
    mcp.run()


if __name__ == "__main__":
    main()
