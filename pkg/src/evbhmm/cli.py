"""Command-line entry point: one subcommand per experiment stage."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from pydantic import ValidationError

from .config import EvBhmmConfig, get_config
from .models import Command, ControlMethod, ExperimentSpec, Overrides, SocDistribution
from .tools import bench, dataset, identification, regulation, simulation
from .workspace import ExperimentWorkspace, get_workspace

logger = logging.getLogger(__name__)

ToolFunction = Callable[[ExperimentWorkspace, Dict[str, Any]], Dict[str, Any]]

TOOLS: Dict[Command, ToolFunction] = {
    Command.SIMULATE_FLEET: simulation.run_simulation,
    Command.GEN_DATASET: dataset.generate_dataset,
    Command.FIT: identification.fit_model,
    Command.PREDICT: identification.predict_power,
    Command.REGULATE: regulation.run_regulation,
    Command.BENCH: bench.run_bench,
}

OVERRIDE_FLAGS = ("n_bins", "n_traj", "window", "n_ev", "noise_bound", "horizon_h")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", type=Path, help="Fleet scenario JSON")
    common.add_argument("--config", type=Path, help="Regulation config JSON")
    common.add_argument("--seed", type=int, default=0, help="Seed of every random stream")
    common.add_argument("--out", type=Path, help="Output directory (default: EVBHMM_OUTPUT_DIR)")
    common.add_argument("--n-bins", type=int, help="SOC bins per mode (N)")
    common.add_argument("--n-traj", type=int, help="Trajectories per EM dataset (L)")
    common.add_argument("--window", type=int, help="Trajectory length in steps (K)")
    common.add_argument("--n-ev", type=int, help="Fleet size")
    common.add_argument("--noise-bound", type=float, help="Reported-SOC corruption bound, e.g. 0.1")
    common.add_argument("--horizon-h", type=float, help="Simulated horizon in hours")

    parser = argparse.ArgumentParser(prog="ev-bhmm", description="EV fleet identification and frequency regulation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(Command.SIMULATE_FLEET.value, parents=[common], help="Run the individual-EV oracle")
    p.add_argument("--start-hour", type=float)
    p.add_argument("--excitation-cap", type=float, help="Random broadcast cap (0 runs uncontrolled)")

    p = sub.add_parser(Command.GEN_DATASET.value, parents=[common], help="Simulate excited history days")
    p.add_argument("--n-days", type=int)
    p.add_argument("--start-hour", type=float)
    p.add_argument("--excitation-cap", type=float)
    p.add_argument("--full-range", action="store_true", help="Draw inputs from U(0, 1)")
    p.add_argument("--dataset", dest="dataset_name")

    p = sub.add_parser(Command.FIT.value, parents=[common], help="Fit a bHMM by EM")
    p.add_argument("--dataset", dest="dataset_name")
    p.add_argument("--window-end", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--params", dest="params_name")

    p = sub.add_parser(Command.PREDICT.value, parents=[common], help="Rolling power/flexibility prediction")
    p.add_argument("--dataset", dest="dataset_name")
    p.add_argument("--n-p", type=int)

    p = sub.add_parser(Command.REGULATE.value, parents=[common], help="Closed-loop frequency regulation")
    p.add_argument("--method", choices=[m.value for m in ControlMethod])
    p.add_argument("--profiles", dest="profiles_path", help="Wind/load CSV t_s,p_wind_mw,p_load_mw")
    p.add_argument("--dataset", dest="dataset_name")
    p.add_argument("--start-hour", type=float)
    p.add_argument("--imbalance-mw", type=float)

    p = sub.add_parser(Command.BENCH.value, parents=[common], help="Accuracy sweeps")
    p.add_argument("--n-ev-values", type=int, nargs="+")
    p.add_argument("--n-bins-values", type=int, nargs="+")
    p.add_argument("--n-traj-values", type=int, nargs="+")
    p.add_argument("--window-values", type=int, nargs="+")
    p.add_argument("--distributions", nargs="+", choices=[d.value for d in SocDistribution])
    p.add_argument("--n-p", type=int)
    p.add_argument("--workers", type=int)
    return parser


def spec_from_args(args: argparse.Namespace, config: EvBhmmConfig) -> ExperimentSpec:
    """Split parsed arguments into the experiment spec (validated) and command options."""
    values = vars(args).copy()
    command = Command(values.pop("command"))
    overrides = Overrides(**{name: values.pop(name) for name in OVERRIDE_FLAGS})
    return ExperimentSpec(
        command=command,
        scenario=values.pop("scenario"),
        config=values.pop("config"),
        seed=values.pop("seed"),
        output_dir=values.pop("out") or config.output_dir,
        overrides=overrides,
        options={k: v for k, v in values.items() if v is not None and v is not False},
    )


def tool_params(spec: ExperimentSpec, config: EvBhmmConfig) -> Dict[str, Any]:
    """Translate a spec into the keyword set of its tool input model."""
    params: Dict[str, Any] = {"seed": spec.seed}
    if spec.scenario is not None:
        params["scenario_path"] = str(spec.scenario)
    if spec.config is not None:
        params["config_path"] = str(spec.config)

    defaults = {"n_bins": config.n_bins, "n_traj": config.n_traj, "window": config.window}
    overrides = {k: v for k, v in spec.overrides.model_dump().items() if v is not None}
    if spec.command is Command.BENCH:
        for name in ("n_ev", "n_bins", "n_traj", "window"):
            if name in overrides:
                params[f"{name}_values"] = [overrides.pop(name)]
        params["workers"] = config.workers
    elif spec.command is Command.FIT:
        if "n_ev" in overrides:
            params["n_ev_estimate"] = overrides.pop("n_ev")
        params["window"] = config.window
    elif spec.command is Command.PREDICT:
        params["window"] = config.window
        params["n_p"] = config.n_p
    elif spec.command is not Command.GEN_DATASET:
        params.update(defaults)
    else:
        params["n_bins"] = config.n_bins
    params.update(overrides)
    params.update(spec.options)
    return params


def error_record(exc: BaseException, command: Optional[str]) -> Dict[str, Any]:
    return {"error": type(exc).__name__, "message": str(exc), "command": command}


def report_error(record: Dict[str, Any], output_dir: Optional[Path]) -> None:
    """Write the error record to stderr and, when possible, to ``error.json``."""
    text = json.dumps(record, sort_keys=True)
    print(text, file=sys.stderr)
    if output_dir is None:
        return
    try:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        (Path(output_dir) / "error.json").write_text(text + "\n")
    except OSError as e:
        logger.error(f"Could not write error record: {e}")


def run_command(spec: ExperimentSpec, config: Optional[EvBhmmConfig] = None) -> int:
    """Execute one subcommand.

    Args:
        spec: Validated experiment spec
        config: Toolkit configuration; read from the environment when omitted

    Returns:
        Process exit status (0 on success, 1 on any failure)
    """
    config = config or get_config()
    logger.info(f"Running {spec.command.value} into {spec.output_dir}")
    try:
        with get_workspace(config, spec.output_dir) as workspace:
            result = TOOLS[spec.command](workspace, tool_params(spec, config))
            workspace.write_json("summary.json", {"command": spec.command.value, "result": result})
    except Exception as e:
        logger.error(f"{spec.command.value} failed: {e}")
        report_error(error_record(e, spec.command.value), spec.output_dir)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    logger.info(f"Finished {spec.command.value}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments and run the requested subcommand."""
    config = get_config()
    logging.basicConfig(
        level=getattr(logging, config.log_level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        spec = spec_from_args(args, config)
    except ValidationError as e:
        report_error(error_record(e, args.command), args.out or config.output_dir)
        return 1
    return run_command(spec, config)


if __name__ == "__main__":
    sys.exit(main())
