"""Configuration management for the EV bHMM toolkit."""

from pathlib import Path
from pydantic import Field
from pydantic_settings import BaseSettings


class EvBhmmConfig(BaseSettings):
    """Runtime settings shared by the CLI and the MCP server."""

    # Artifact location
    output_dir: Path = Field(default=Path("runs"), description="Directory receiving CSV/params artifacts")

    # Model hyperparameters
    n_bins: int = Field(default=3, ge=1, description="SOC bins per mode (N)")
    n_traj: int = Field(default=300, ge=1, description="Trajectories per EM dataset (L)")
    window: int = Field(default=60, ge=1, description="Trajectory length in control steps (K)")
    n_p: int = Field(default=12, ge=1, description="Steps between scheduled refits / prediction horizon")

    # EM settings
    em_rel_tol: float = Field(default=1e-4, gt=0, description="Stop when the likelihood gain is below this fraction of |L(theta0)|")
    em_max_iter: int = Field(default=100, ge=1, description="Maximum EM iterations")
    pe_threshold: float = Field(default=1e-8, gt=0, description="Minimum normalized information eigenvalue accepted")

    # Parallelism
    workers: int = Field(default=1, ge=1, description="E-step threads and bench worker processes")

    # Logging settings
    log_level: str = Field(default="INFO", description="Logging level (DEBUG, INFO, WARNING, ERROR)")

    class Config:
        """Pydantic configuration."""
        env_prefix = "EVBHMM_"
        env_file = ".env"
        case_sensitive = False


def get_config() -> EvBhmmConfig:
    """Get toolkit configuration from environment variables."""
    return EvBhmmConfig()
