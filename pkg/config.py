"""Configuration module for loading environment variables."""

import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


def get_env_var(
    name: str, default: str | None = None, required: bool = True
) -> str | None:
    """Get environment variable with optional default value."""
    value = os.getenv(name, default)
    if required and value is None:
        return None
    return value


def get_env_bool(name: str, default: str = "false") -> bool:
    value = get_env_var(name, default=default, required=False) or ""
    return value.strip().lower() in ("1", "true", "yes", "y", "on")


def require_positive(name: str, value: float) -> float:
    """Reject non-positive numeric settings at startup."""
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value


# Logging / output
CBM_LOG_LEVEL: str = (
    get_env_var("CBM_LOG_LEVEL", default="INFO", required=False) or "INFO"
).upper()
CBM_OUTPUT_DIR: str = (
    get_env_var("CBM_OUTPUT_DIR", default="runs", required=False) or "runs"
)

# Sweep parallelism (1 = serial, deterministic ordering either way)
CBM_THREADS: int = max(
    1, int(get_env_var("CBM_THREADS", default="1", required=False) or "1")
)

# Force law (cubic), lengths in cell diameters
CBM_MU: float = require_positive(
    "CBM_MU", float(get_env_var("CBM_MU", default="5.7", required=False))
)
CBM_REST_LENGTH: float = require_positive(
    "CBM_REST_LENGTH",
    float(get_env_var("CBM_REST_LENGTH", default="1.0", required=False)),
)
CBM_MAX_DISTANCE: float = require_positive(
    "CBM_MAX_DISTANCE",
    float(get_env_var("CBM_MAX_DISTANCE", default="1.5", required=False)),
)
CBM_DIVISION_SEPARATION: float = require_positive(
    "CBM_DIVISION_SEPARATION",
    float(get_env_var("CBM_DIVISION_SEPARATION", default="0.3", required=False)),
)

# Step-size control
CBM_EPSILON: float = require_positive(
    "CBM_EPSILON", float(get_env_var("CBM_EPSILON", default="0.005", required=False))
)
CBM_FD_EPS: float = require_positive(
    "CBM_FD_EPS", float(get_env_var("CBM_FD_EPS", default="1e-4", required=False))
)
CBM_MRFE_RATIO: int = int(get_env_var("CBM_MRFE_RATIO", default="14", required=False))
CBM_NEWTON_MAX_ITER: int = int(
    get_env_var("CBM_NEWTON_MAX_ITER", default="5", required=False)
)
CBM_GMRES_MAX_ITER: int = int(
    get_env_var("CBM_GMRES_MAX_ITER", default="10", required=False)
)
CBM_NEWTON_PREDICTOR: bool = get_env_bool("CBM_NEWTON_PREDICTOR", default="false")
CBM_DT_MAX_CAP: float = require_positive(
    "CBM_DT_MAX_CAP",
    float(get_env_var("CBM_DT_MAX_CAP", default="10.0", required=False)),
)
CBM_MIN_DT: float = require_positive(
    "CBM_MIN_DT", float(get_env_var("CBM_MIN_DT", default="1e-12", required=False))
)

# Potential / neighbor search / recording
CBM_INCLUDE_GA_OFFSET: bool = get_env_bool("CBM_INCLUDE_GA_OFFSET", default="false")
CBM_NEIGHBOR_BIN_THRESHOLD: int = int(
    get_env_var("CBM_NEIGHBOR_BIN_THRESHOLD", default="64", required=False)
)
CBM_SNAPSHOT_STRIDE: int = max(
    1, int(get_env_var("CBM_SNAPSHOT_STRIDE", default="1", required=False) or "1")
)

# Fixed-step references for error measurement
CBM_REFERENCE_DT_PAIR: float = require_positive(
    "CBM_REFERENCE_DT_PAIR",
    float(get_env_var("CBM_REFERENCE_DT_PAIR", default="5e-5", required=False)),
)
CBM_REFERENCE_DT_SPHEROID: float = require_positive(
    "CBM_REFERENCE_DT_SPHEROID",
    float(get_env_var("CBM_REFERENCE_DT_SPHEROID", default="5e-4", required=False)),
)
