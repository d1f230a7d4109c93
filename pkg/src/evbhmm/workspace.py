"""Experiment workspace: artifact directory wrapper with open/close management and error handling."""

import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from pydantic import ValidationError

from .bhmm import ModelParams
from .config import EvBhmmConfig, get_config
from .ident import AggregateLog
from .models import FleetScenario, RegulationConfig

logger = logging.getLogger(__name__)

# Digits written for floats so CSV artifacts read back bit-exactly
CSV_FLOAT_FORMAT = "%.17g"

DAY_MANIFEST = "manifest.json"


class WorkspaceError(Exception):
    """Base exception for workspace errors."""
    pass


class ArtifactError(WorkspaceError):
    """Raised when an artifact is missing or unreadable."""
    pass


class ScenarioFileError(WorkspaceError):
    """Raised when a scenario or regulation config file is invalid."""
    pass


class ExperimentWorkspace:
    """Directory holding every artifact of one experiment."""

    def __init__(self, config: EvBhmmConfig, output_dir: Optional[Path] = None):
        """Initialize the workspace.

        Args:
            config: Toolkit configuration
            output_dir: Artifact directory; defaults to ``config.output_dir``
        """
        self.config = config
        self.root = Path(output_dir) if output_dir is not None else Path(config.output_dir)
        self._open = False

    def open(self) -> None:
        """Create the artifact directory.

        Raises:
            WorkspaceError: If the directory cannot be created
        """
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            logger.error(f"Failed to open workspace {self.root}: {e}")
            raise WorkspaceError(f"Failed to open workspace {self.root}: {e}")
        self._open = True
        logger.info(f"Opened workspace {self.root}")

    def close(self) -> None:
        self._open = False

    def ensure_open(self) -> None:
        """Ensure the workspace is open.

        Raises:
            WorkspaceError: If not open
        """
        if not self._open:
            raise WorkspaceError("Workspace is not open. Call open() first.")

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def em_options(self) -> Dict[str, Any]:
        """Keyword arguments for em_fit taken from the configuration."""
        return {
            "rel_tol": self.config.em_rel_tol,
            "n_iter_max": self.config.em_max_iter,
            "pe_threshold": self.config.pe_threshold,
            "workers": self.config.workers,
        }

    # Tables
    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        self.ensure_open()
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
        logger.info(f"Wrote {len(frame)} rows to {path}")
        return path

    def read_frame(self, name: str) -> pd.DataFrame:
        """Read a CSV artifact.

        Raises:
            ArtifactError: If the file is missing or cannot be parsed
        """
        path = self.path(name)
        if not path.is_file():
            raise ArtifactError(f"Artifact not found: {path}")
        try:
            return pd.read_csv(path, float_precision="round_trip")
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise ArtifactError(f"Failed to read {path}: {e}")

    def write_json(self, name: str, payload: Dict[str, Any]) -> Path:
        self.ensure_open()
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
        return path

    def read_json(self, name: str) -> Dict[str, Any]:
        path = self.path(name)
        try:
            return json.loads(path.read_text())
        except FileNotFoundError:
            raise ArtifactError(f"Artifact not found: {path}")
        except json.JSONDecodeError as e:
            raise ArtifactError(f"Invalid JSON in {path}: {e}")

    # Parameters
    def save_params(self, name: str, params: ModelParams) -> Path:
        self.ensure_open()
        path = self.path(f"{name}.npz")
        params.save(path)
        logger.info(f"Saved parameters to {path}")
        return path

    def load_params(self, name: str) -> ModelParams:
        path = self.path(f"{name}.npz")
        if not path.is_file():
            raise ArtifactError(f"Parameter bundle not found: {path}")
        try:
            return ModelParams.load(path)
        except (OSError, KeyError, ValueError) as e:
            raise ArtifactError(f"Failed to load {path}: {e}")

    # Day logs
    def write_day_logs(self, dataset: str, logs: List[AggregateLog], meta: Dict[str, Any]) -> Path:
        """Write one `k,u_1..,p_kw` CSV per day plus a manifest."""
        self.ensure_open()
        for i, log in enumerate(logs):
            self.write_frame(f"{dataset}/day_{i:04d}.csv", log.to_frame())
        manifest = dict(meta, n_days=len(logs), dt=logs[0].dt if logs else None,
                        start_s=logs[0].start_s if logs else None)
        return self.write_json(f"{dataset}/{DAY_MANIFEST}", manifest)

    def read_manifest(self, dataset: str) -> Dict[str, Any]:
        return self.read_json(f"{dataset}/{DAY_MANIFEST}")

    def read_day_logs(self, dataset: str) -> List[AggregateLog]:
        """Read the day logs of ``dataset`` in day order.

        Raises:
            ArtifactError: If the manifest or a day file is missing
        """
        manifest = self.read_manifest(dataset)
        logs = []
        for i in range(int(manifest["n_days"])):
            frame = self.read_frame(f"{dataset}/day_{i:04d}.csv")
            logs.append(AggregateLog.from_frame(frame, dt=float(manifest["dt"]), start_s=float(manifest["start_s"])))
        logger.info(f"Loaded {len(logs)} day logs from {self.path(dataset)}")
        return logs

    # Inputs
    @staticmethod
    def load_scenario(path: Optional[str] = None, **overrides: Any) -> FleetScenario:
        """Read a scenario JSON (or the defaults) and apply non-None overrides.

        Raises:
            ScenarioFileError: If the file is unreadable or fails validation
        """
        data: Dict[str, Any] = {}
        if path:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise ScenarioFileError(f"Failed to read scenario {path}: {e}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return FleetScenario(**data)
        except ValidationError as e:
            raise ScenarioFileError(f"Invalid scenario {path or '<defaults>'}: {e}")

    @staticmethod
    def load_regulation_config(path: Optional[str] = None, **overrides: Any) -> RegulationConfig:
        data: Dict[str, Any] = {}
        if path:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise ScenarioFileError(f"Failed to read regulation config {path}: {e}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return RegulationConfig(**data)
        except ValidationError as e:
            raise ScenarioFileError(f"Invalid regulation config {path or '<defaults>'}: {e}")

    def __enter__(self):
        """Context manager entry."""
        self.open()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        """Context manager exit."""
        self.close()


@contextmanager
def get_workspace(config: Optional[EvBhmmConfig] = None, output_dir: Optional[Path] = None):
    """Context manager yielding an open workspace.

    Args:
        config: Toolkit configuration; read from the environment when omitted
        output_dir: Artifact directory override

    Yields:
        ExperimentWorkspace instance
    """
    workspace = ExperimentWorkspace(config or get_config(), output_dir)
    try:
        workspace.open()
        yield workspace
    finally:
        workspace.close()
