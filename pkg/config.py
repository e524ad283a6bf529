"""
Configuration settings for the macrostate toolkit
"""
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import jsonschema

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from errors import ConfigError

TOOLKIT_VERSION = "0.4.0"

# Binning settings
DEFAULT_BIN_SCHEME = "quantile"
DEFAULT_BIN_COUNT = 10

# Conditional density settings
DEFAULT_EPOCHS = 500
DEFAULT_LEARNING_RATE = 0.05
DEFAULT_L2_PENALTY = 1e-4
DEFAULT_BATCH_SIZE = 64
DEFAULT_HIDDEN_WIDTH = 16
MAX_COVARIATES_WITHOUT_HIDDEN = 3

# Clustering settings
DEFAULT_RESTARTS = 10
KMEANS_MAX_ITER = 300
KMEANS_SHIFT_TOL = 1e-8

# Exact oracle settings
ANALYTIC_TOL = 1e-9
ESTIMATOR_TV_TOL = 0.05
DEGENERATE_MARGIN = 1e-6
DEFAULT_CCT_DIMS = (2, 4, 3)
DEFAULT_CCT_TRIALS = 10_000

# Regularity settings
EXACT_MAX_CELL = 14
SAMPLED_SUBSET_PAIRS = 10_000
EXACT_CHUNK_ROWS = 256

# Inference settings
IRLS_MAX_ITER = 100
IRLS_GRAD_TOL = 1e-8
SEPARATION_COEF_BOUND = 15.0
SEPARATION_ETA_BOUND = 30.0
DEFAULT_BOOTSTRAP = 500
# caliper in standard deviations of the logit propensity
DEFAULT_CALIPER_WIDTH = 0.2
MIN_BOOTSTRAP = 100
DEFAULT_HETEROGENEITY_TOL = 0.05

# Export settings
OUTPUT_DIRECTORY = "output"
OUT_DIR_ENV = "CFL_OUT_DIR"
CSV_ENCODING = "utf-8"

# Worker settings
DEFAULT_THREADS = 1


CONFIG_SCHEMA: Dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "macrostate toolkit run configuration",
    "type": "object",
    "required": ["seed"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "input": {"type": "string"},
        "out_dir": {"type": "string"},
        "threads": {"type": "integer", "minimum": -1},
        "include_treatment": {"type": "boolean"},
        "differences": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {"type": "string"},
                "minItems": 2,
                "maxItems": 2,
            },
        },
        "K": {
            "oneOf": [
                {"type": "integer", "minimum": 1},
                {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
            ]
        },
        "roles": {
            "type": "object",
            "additionalProperties": {
                "enum": ["covariate", "treatment", "outcome", "id", "ignored"]
            },
        },
        "binning": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "scheme": {"enum": ["equal_width", "quantile"]},
                "m": {"type": "integer", "minimum": 1},
                "clamp": {"type": "boolean"},
            },
        },
        "density": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "estimator": {"enum": ["softmax", "frequency"]},
                "hidden_layers": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "l2_penalty": {"type": "number", "minimum": 0},
            },
        },
        "clustering": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"restarts": {"type": "integer", "minimum": 1}},
        },
        "profile": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "covariates": {"type": "array", "items": {"type": "string"}},
                "histogram_column": {"type": "string"},
                "histogram_bins": {"type": "integer", "minimum": 1},
            },
        },
        "inference": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "moderator": {"type": "string"},
                "treatments": {"type": "array", "items": {"type": "string"}},
                "strata": {"type": "string"},
                "randomized": {"type": "boolean"},
                "robust": {"type": "boolean"},
                "distribution_tol": {"type": "number", "minimum": 0},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bins": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "K": {"type": "integer", "minimum": 1},
            },
        },
        "cct": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dims": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 1},
                    "minItems": 3,
                    "maxItems": 3,
                },
                "trials": {"type": "integer", "minimum": 0},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "side": {"enum": ["x", "y"]},
                "family": {"enum": ["unconstrained", "unconfounded"]},
            },
        },
        "match": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "covariates": {"type": "array", "items": {"type": "string"}},
                "caliper": {"type": "number", "exclusiveMinimum": 0},
                "caliper_width": {"type": "number", "exclusiveMinimum": 0},
                "bootstrap": {"type": "integer", "minimum": MIN_BOOTSTRAP},
                "chain_pipeline": {"type": "boolean"},
            },
        },
        "regularity": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["pipeline", "scm"]},
                "scm": {"type": "string"},
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "mode": {"enum": ["exact", "sampled"]},
                "sampled_fallback": {"type": "boolean"},
                "y_cells": {"type": "integer", "minimum": 1},
                "samples": {"type": "integer", "minimum": 1},
            },
        },
    },
}


@dataclass(frozen=True)
class BinningSettings:
    scheme: str = DEFAULT_BIN_SCHEME
    m: int = DEFAULT_BIN_COUNT
    clamp: bool = False


@dataclass(frozen=True)
class DensitySettings:
    estimator: str = "softmax"
    # None lets the covariate count pick the architecture
    hidden_layers: Optional[Tuple[int, ...]] = None
    learning_rate: float = DEFAULT_LEARNING_RATE
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    l2_penalty: float = DEFAULT_L2_PENALTY


@dataclass(frozen=True)
class ClusteringSettings:
    restarts: int = DEFAULT_RESTARTS


@dataclass(frozen=True)
class ProfileSettings:
    covariates: Optional[Tuple[str, ...]] = None
    histogram_column: Optional[str] = None
    histogram_bins: int = 20


@dataclass(frozen=True)
class InferenceSettings:
    moderator: Optional[str] = None
    treatments: Tuple[str, ...] = ()
    strata: Optional[str] = None
    randomized: bool = False
    robust: bool = False
    distribution_tol: float = DEFAULT_HETEROGENEITY_TOL


@dataclass(frozen=True)
class SweepSettings:
    bins: Tuple[int, ...] = ()
    K: int = 2


@dataclass(frozen=True)
class CctSettings:
    dims: Tuple[int, int, int] = DEFAULT_CCT_DIMS
    trials: int = DEFAULT_CCT_TRIALS
    tol: float = ANALYTIC_TOL
    side: str = "x"
    family: str = "unconstrained"


@dataclass(frozen=True)
class MatchSettings:
    covariates: Optional[Tuple[str, ...]] = None
    # logit units; None derives it from caliper_width
    caliper: Optional[float] = None
    caliper_width: float = DEFAULT_CALIPER_WIDTH
    bootstrap: int = DEFAULT_BOOTSTRAP
    chain_pipeline: bool = False


@dataclass(frozen=True)
class RegularitySettings:
    source: str = "pipeline"
    scm: Optional[str] = None
    eps: float = 0.3
    mode: str = "exact"
    sampled_fallback: bool = True
    y_cells: int = 2
    samples: int = SAMPLED_SUBSET_PAIRS


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; seed is mandatory so no run depends on the clock"""

    seed: int
    input: Optional[str] = None
    out_dir: str = OUTPUT_DIRECTORY
    threads: int = DEFAULT_THREADS
    include_treatment: bool = True
    # derived column -> (minuend, subtrahend), computed before roles apply
    differences: Mapping[str, Tuple[str, str]] = field(default_factory=dict)
    K: Tuple[int, ...] = (2,)
    roles: Mapping[str, str] = field(default_factory=dict)
    binning: BinningSettings = field(default_factory=BinningSettings)
    density: DensitySettings = field(default_factory=DensitySettings)
    clustering: ClusteringSettings = field(default_factory=ClusteringSettings)
    profile: ProfileSettings = field(default_factory=ProfileSettings)
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    cct: CctSettings = field(default_factory=CctSettings)
    match: MatchSettings = field(default_factory=MatchSettings)
    regularity: RegularitySettings = field(default_factory=RegularitySettings)

    def to_dict(self) -> Dict[str, Any]:
        """Config echo for manifests; out_dir and threads do not affect results"""
        echo = asdict(self)
        echo.pop("out_dir")
        echo.pop("threads")
        echo["roles"] = dict(sorted(self.roles.items()))
        echo["differences"] = {k: list(v) for k, v in sorted(self.differences.items())}
        return echo


_SECTIONS = {
    "binning": BinningSettings,
    "density": DensitySettings,
    "clustering": ClusteringSettings,
    "profile": ProfileSettings,
    "inference": InferenceSettings,
    "sweep": SweepSettings,
    "cct": CctSettings,
    "match": MatchSettings,
    "regularity": RegularitySettings,
}


def _tuplify(value: Any) -> Any:
    return tuple(value) if isinstance(value, list) else value


def _build_section(cls, raw: Mapping[str, Any]):
    names = {f.name for f in fields(cls)}
    return cls(**{k: _tuplify(v) for k, v in raw.items() if k in names})


def default_out_dir() -> str:
    """Output directory from the environment, else the built-in default"""
    return os.getenv(OUT_DIR_ENV, OUTPUT_DIRECTORY)


def validate_config_dict(raw: Mapping[str, Any]) -> None:
    try:
        jsonschema.validate(instance=dict(raw), schema=CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        location = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {location}: {e.message}") from e


def build_run_config(raw: Mapping[str, Any]) -> RunConfig:
    """Validate a raw mapping (parsed TOML plus overrides) and freeze it"""
    validate_config_dict(raw)
    top = {}
    for key in ("seed", "input", "out_dir", "threads", "include_treatment"):
        if key in raw:
            top[key] = raw[key]
    if "K" in raw:
        k = raw["K"]
        top["K"] = (k,) if isinstance(k, int) else tuple(k)
    top["roles"] = dict(raw.get("roles", {}))
    top["differences"] = {k: tuple(v) for k, v in raw.get("differences", {}).items()}
    for name, cls in _SECTIONS.items():
        if name in raw:
            top[name] = _build_section(cls, raw[name])
    top.setdefault("out_dir", default_out_dir())
    return RunConfig(**top)


def _resolve_against(config_path: Path, value: str) -> str:
    path = Path(value)
    return value if path.is_absolute() else str((config_path.parent / path).resolve())


def load_run_config(path: Optional[str], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Read a TOML run config; non-None overrides (CLI flags) win over file values"""
    raw: Dict[str, Any] = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        with config_path.open("rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"cannot parse {path}: {e}") from e
        # Relative file paths resolve against the config file's directory
        if isinstance(raw.get("input"), str):
            raw["input"] = _resolve_against(config_path, raw["input"])
        regularity = raw.get("regularity")
        if isinstance(regularity, dict) and isinstance(regularity.get("scm"), str):
            regularity["scm"] = _resolve_against(config_path, regularity["scm"])
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    if "seed" not in raw:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    return build_run_config(raw)
