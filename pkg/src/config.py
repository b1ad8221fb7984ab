"""
Configuration settings for the FedXGB simulator

Run parameters come from (lowest to highest precedence): the defaults below,
a dotenv-style config file, FEDXGB_* environment variables, and finally
command-line flags.
"""

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import dotenv_values, load_dotenv

# Project paths
PROJECT_ROOT = Path(__file__).parent.parent
DATA_DIR = Path(os.getenv("FEDXGB_DATA_DIR", PROJECT_ROOT / "data"))
RAW_DATA_DIR = DATA_DIR / "raw"
PROCESSED_DATA_DIR = DATA_DIR / "processed"
OUTPUTS_DIR = PROJECT_ROOT / "outputs"
REPORTS_DIR = OUTPUTS_DIR / "reports"

# Create directories if they don't exist
for directory in [RAW_DATA_DIR, PROCESSED_DATA_DIR, OUTPUTS_DIR, REPORTS_DIR]:
    directory.mkdir(parents=True, exist_ok=True)

# Local .env file (optional) - never overrides variables already exported
load_dotenv(PROJECT_ROOT / ".env", override=False)

ENV_PREFIX = "FEDXGB_"
CONFIG_SCHEMA_VERSION = 1

# Field and codec defaults
DEFAULT_PRIME = (1 << 61) - 1
DEFAULT_FRACTIONAL_BITS = 16
DEFAULT_MAX_SUMMANDS = 1 << 14
DEFAULT_COMPARISON_RANGE_BOUND = float(1 << 20)

# Boosting defaults (eta, gamma, lambda, depth as in the reference experiment setup)
DEFAULT_ETA = 0.3
DEFAULT_GAMMA = 0.1
DEFAULT_LAMBDA = 1.0
DEFAULT_MAX_DEPTH = 3
DEFAULT_ROUNDS = 50
DEFAULT_FEATURE_SUBSAMPLE = 100
DEFAULT_MAX_CANDIDATES = 32

# Federation defaults
DEFAULT_USERS = 300
DEFAULT_EDGES = 10
DEFAULT_SEED = 2024
DEFAULT_DROPOUT_PERIOD = 10

DATASETS = ("adult", "mnist", "synthetic")
DROPOUT_SCOPES = ("before_upload", "during_secfind", "during_secpred")
SELECTION_POLICIES = ("all", "uptime")
LOSS_KINDS = ("logistic", "softmax")
SECURITY_LEVELS = (256, 384)

# Simulated cost per primitive operation (per element where the op is vectorised)
DEFAULT_COST_WEIGHTS = {
    "share": 1.0,
    "recon": 1.0,
    "mask": 0.05,
    "field_op": 0.01,
    "encrypt": 2.0,
    "decrypt": 2.0,
    "sign": 20.0,
    "verify": 40.0,
    "agree": 30.0,
    "keygen": 25.0,
    "compare": 0.5,
}

# Output file naming
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
MODEL_FILE = "model.json"
STAGES_FILE = "stage_costs.csv"


def _parse_bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_optional_int(value):
    if value is None or str(value).strip().lower() in ("", "none", "auto"):
        return None
    return int(value)


def _parse_optional_str(value):
    if value is None or str(value).strip().lower() in ("", "none", "auto"):
        return None
    return str(value).strip()


@dataclass(frozen=True)
class RunConfig:
    """
    Every knob of a simulated FedXGB run.

    ``users`` is the total number of selected users per round across all
    ``edges`` domains; spare users that replace dropouts are added on top.
    """
    seed: int = DEFAULT_SEED
    dataset: str = "synthetic"
    subsample: Optional[int] = None
    test_subsample: Optional[int] = None
    synthetic_instances: int = 600
    synthetic_features: int = 8
    users: int = DEFAULT_USERS
    edges: int = DEFAULT_EDGES
    spare_users: Optional[int] = None
    user_threshold: Optional[int] = None
    edge_threshold: Optional[int] = None
    eta: float = DEFAULT_ETA
    gamma: float = DEFAULT_GAMMA
    lam: float = DEFAULT_LAMBDA
    max_depth: int = DEFAULT_MAX_DEPTH
    rounds: int = DEFAULT_ROUNDS
    feature_subsample: int = DEFAULT_FEATURE_SUBSAMPLE
    max_candidates: int = DEFAULT_MAX_CANDIDATES
    min_node_instances: int = 1
    loss: Optional[str] = None
    security_level: int = 256
    prime: int = DEFAULT_PRIME
    fractional_bits: int = DEFAULT_FRACTIONAL_BITS
    max_summands: int = DEFAULT_MAX_SUMMANDS
    comparison_range_bound: float = DEFAULT_COMPARISON_RANGE_BOUND
    dropout_rate: float = 0.0
    dropout_period: int = DEFAULT_DROPOUT_PERIOD
    dropout_scope: str = "during_secfind"
    selection_policy: str = "uptime"
    max_round_retries: int = 3
    output_dir: Path = OUTPUTS_DIR
    cost_weights: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_COST_WEIGHTS))

    def validate(self):
        """Raise ConfigurationError on any invalid setting; returns self"""
        from src.errors import ConfigurationError

        problems = []
        if self.dataset not in DATASETS:
            problems.append(f"dataset must be one of {DATASETS}")
        if self.users < 1:
            problems.append("users must be >= 1 (empty user set)")
        if self.edges < 1:
            problems.append("edges must be >= 1")
        if self.users < self.edges:
            problems.append("every edge domain needs at least one user")
        if not 0.0 < self.eta <= 1.0:
            problems.append("eta must be in (0, 1]")
        if self.lam < 0:
            problems.append("lam must be >= 0")
        if self.gamma < 0:
            problems.append("gamma must be >= 0")
        if self.max_depth < 1:
            problems.append("max_depth must be >= 1")
        if self.rounds < 0:
            problems.append("rounds must be >= 0")
        if self.feature_subsample < 1:
            problems.append("feature_subsample must be >= 1")
        if self.max_candidates < 1:
            problems.append("max_candidates must be >= 1")
        if self.min_node_instances < 1:
            problems.append("min_node_instances must be >= 1")
        if self.loss is not None and self.loss not in LOSS_KINDS:
            problems.append(f"loss must be one of {LOSS_KINDS}")
        if self.security_level not in SECURITY_LEVELS:
            problems.append(f"security_level must be one of {SECURITY_LEVELS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append("dropout_rate must be in [0, 1)")
        if self.dropout_period < 1:
            problems.append("dropout_period must be >= 1")
        if self.dropout_scope not in DROPOUT_SCOPES:
            problems.append(f"dropout_scope must be one of {DROPOUT_SCOPES}")
        if self.selection_policy not in SELECTION_POLICIES:
            problems.append(f"selection_policy must be one of {SELECTION_POLICIES}")
        if self.subsample is not None and self.subsample < 1:
            problems.append("subsample must be >= 1")
        if self.spare_users is not None and self.spare_users < 0:
            problems.append("spare_users must be >= 0")
        if self.user_threshold is not None and self.user_threshold < 1:
            problems.append("user_threshold must be >= 1")
        if self.edge_threshold is not None and not 1 <= self.edge_threshold <= self.edges:
            problems.append("edge_threshold must be in [1, edges]")
        if self.fractional_bits < 0:
            problems.append("fractional_bits must be >= 0")
        unknown_costs = set(self.cost_weights) - set(DEFAULT_COST_WEIGHTS)
        if unknown_costs:
            problems.append(f"unknown cost weights: {sorted(unknown_costs)}")

        if problems:
            raise ConfigurationError("; ".join(problems))
        return self

    def with_overrides(self, **overrides):
        """Copy with non-None overrides applied (used for CLI flags and sweeps)"""
        clean = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **clean)

    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = str(value) if isinstance(value, Path) else value
        return out


_CONVERTERS = {
    "seed": int,
    "dataset": lambda v: str(v).strip().lower(),
    "subsample": _parse_optional_int,
    "test_subsample": _parse_optional_int,
    "synthetic_instances": int,
    "synthetic_features": int,
    "users": int,
    "edges": int,
    "spare_users": _parse_optional_int,
    "user_threshold": _parse_optional_int,
    "edge_threshold": _parse_optional_int,
    "eta": float,
    "gamma": float,
    "lam": float,
    "max_depth": int,
    "rounds": int,
    "feature_subsample": int,
    "max_candidates": int,
    "min_node_instances": int,
    "loss": _parse_optional_str,
    "security_level": int,
    "prime": int,
    "fractional_bits": int,
    "max_summands": int,
    "comparison_range_bound": float,
    "dropout_rate": float,
    "dropout_period": int,
    "dropout_scope": lambda v: str(v).strip().lower(),
    "selection_policy": lambda v: str(v).strip().lower(),
    "max_round_retries": int,
    "output_dir": Path,
}


def _convert_entries(raw: Mapping[str, Any], source: str) -> Dict[str, Any]:
    from src.errors import ConfigurationError

    converted = {}
    for key, value in raw.items():
        name = key.lower()
        if name.startswith("cost_"):
            weight = name[len("cost_"):]
            if weight not in DEFAULT_COST_WEIGHTS:
                raise ConfigurationError(f"{source}: unknown cost weight '{weight}'")
            converted.setdefault("cost_weights", {})[weight] = float(value)
            continue
        if name not in _CONVERTERS:
            raise ConfigurationError(f"{source}: unknown key '{key}'")
        try:
            converted[name] = _CONVERTERS[name](value)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"{source}: bad value for '{key}': {e}") from e
    return converted


def read_config_file(path) -> Dict[str, Any]:
    """
    Read a KEY=VALUE config file

    Parameters:
    -----------
    path : str or Path
        File with one ``KEY=VALUE`` per line and ``SCHEMA_VERSION=1``

    Returns:
    --------
    dict : converted settings keyed by RunConfig field name
    """
    from src.errors import ConfigurationError

    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    raw = dict(dotenv_values(path))
    version = raw.pop("SCHEMA_VERSION", None)
    if version is None:
        raise ConfigurationError(f"{path}: missing SCHEMA_VERSION")
    if str(version).strip() != str(CONFIG_SCHEMA_VERSION):
        raise ConfigurationError(
            f"{path}: schema version {version} unsupported (expected {CONFIG_SCHEMA_VERSION})"
        )
    return _convert_entries(raw, str(path))


def read_env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Collect FEDXGB_* variables that name RunConfig fields or cost weights"""
    environ = os.environ if environ is None else environ
    raw = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name in _CONVERTERS or name.startswith("cost_"):
            raw[name] = value
    return _convert_entries(raw, "environment")


def load_run_config(path=None, overrides=None, environ=None) -> RunConfig:
    """
    Build a validated RunConfig

    Parameters:
    -----------
    path : str or Path, optional
        Config file
    overrides : dict, optional
        Highest-precedence settings (command-line flags); None values ignored
    environ : mapping, optional
        Environment to read FEDXGB_* from (defaults to os.environ)
    """
    settings: Dict[str, Any] = {}
    cost_weights = dict(DEFAULT_COST_WEIGHTS)
    layers = []
    if path is not None:
        layers.append(read_config_file(path))
    layers.append(read_env_overrides(environ))
    layers.append({k: v for k, v in (overrides or {}).items() if v is not None})

    for layer in layers:
        layer = dict(layer)
        cost_weights.update(layer.pop("cost_weights", {}))
        settings.update(layer)

    return RunConfig(cost_weights=cost_weights, **settings).validate()
