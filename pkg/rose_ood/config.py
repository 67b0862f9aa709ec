"""Configuration loading for the ROSE pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .errors import ConfigError

FISHER_METHODS = ("ekfac", "diag")
EIG_SOLVERS = ("jacobi", "lapack")


def _resolve_path(raw_path: str, base_dir: Path) -> str:
    path = Path(raw_path).expanduser()
    if not path.is_absolute():
        path = (base_dir / path).resolve()
    return str(path)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def parse_norm_order(value: object) -> float:
    """Accept 1, 2, 'inf', '∞' or any number >= 1."""
    if isinstance(value, str) and value.strip().lower() in ("inf", "infinity", "∞"):
        return math.inf
    try:
        p = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"norm order must be a number >= 1 or 'inf', got {value!r}") from None
    _require(p >= 1.0, f"norm order must be >= 1, got {p}")
    return p


@dataclass
class PathsConfig:
    """Filesystem locations used by the pipeline."""

    artifacts_dir: str = "artifacts"


@dataclass
class ModelConfig:
    """VAE architecture; defaults are the desk-scale analog of the FMNIST model."""

    input_shape: Tuple[int, int, int] = (1, 28, 28)
    channels: int = 16
    latent_dim: int = 50
    selected_layers: Optional[List[str]] = None

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(v) for v in self.input_shape)
        _require(len(self.input_shape) == 3, f"input_shape must be (C, H, W), got {self.input_shape}")
        _require(self.channels > 0, "model.channels must be positive")
        _require(self.latent_dim > 0, "model.latent_dim must be positive")
        if self.selected_layers is not None:
            _require(len(self.selected_layers) > 0, "model.selected_layers must not be empty")


@dataclass
class TrainConfig:
    """Training recipe: Adam with the learning rate halved every period."""

    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    lr_halving_period: int = 30
    seed: int = 0
    iwae_k: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        _require(self.epochs >= 0, "train.epochs must be >= 0")
        _require(self.batch_size > 0, "train.batch_size must be positive")
        _require(self.learning_rate > 0, "train.learning_rate must be positive")
        _require(self.lr_halving_period > 0, "train.lr_halving_period must be positive")
        _require(self.seed >= 0, "train.seed must be non-negative")
        _require(self.iwae_k >= 1, "train.iwae_k must be >= 1")


@dataclass
class FisherConfig:
    """Fisher fitting (preprocessing) settings."""

    method: str = "ekfac"
    n_samples: int = 2000
    damping_rel: float = 1e-8
    iwae_k: int = 1
    eig_solver: str = "jacobi"
    calibration_split: float = 0.0
    batch_size: int = 64

    def __post_init__(self) -> None:
        _require(self.method in FISHER_METHODS, f"fisher.method must be one of {FISHER_METHODS}")
        _require(self.n_samples >= 1, "fisher.n_samples must be >= 1")
        _require(self.damping_rel > 0, "fisher.damping_rel must be positive")
        _require(self.iwae_k >= 1, "fisher.iwae_k must be >= 1")
        _require(self.eig_solver in EIG_SOLVERS, f"fisher.eig_solver must be one of {EIG_SOLVERS}")
        _require(0.0 <= self.calibration_split < 1.0, "fisher.calibration_split must be in [0, 1)")
        _require(self.batch_size > 0, "fisher.batch_size must be positive")


@dataclass
class ScoreConfig:
    """ROSE aggregation and scoring settings."""

    p: Any = "inf"
    beta: Optional[List[float]] = None
    iwae_k: int = 1
    nll_k: int = 20
    batch_size: int = 64

    def __post_init__(self) -> None:
        self.p = parse_norm_order(self.p)
        _require(self.iwae_k >= 1, "score.iwae_k must be >= 1")
        _require(self.nll_k >= 1, "score.nll_k must be >= 1")
        _require(self.batch_size > 0, "score.batch_size must be positive")


@dataclass
class RuntimeConfig:
    """Process-wide settings."""

    seed: int = 0
    threads: Optional[int] = None
    precision: str = "float32"

    def __post_init__(self) -> None:
        _require(self.seed >= 0, "runtime.seed must be non-negative")
        _require(self.threads is None or self.threads >= 1, "runtime.threads must be >= 1")
        _require(self.precision in ("float32", "float64"), "runtime.precision must be float32 or float64")


def _section(cls: type, data: Optional[Dict[str, Any]]) -> Any:
    data = data or {}
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class AppConfig:
    """Top-level app configuration."""

    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fisher: FisherConfig = field(default_factory=FisherConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[Path] = None) -> "AppConfig":
        """Build config from a dictionary."""
        base = Path.cwd() if base_dir is None else base_dir

        paths_data = data.get("paths") or {}
        paths = PathsConfig(artifacts_dir=_resolve_path(paths_data.get("artifacts_dir", "artifacts"), base))

        return cls(
            paths=paths,
            model=_section(ModelConfig, data.get("model")),
            train=_section(TrainConfig, data.get("train")),
            fisher=_section(FisherConfig, data.get("fisher")),
            score=_section(ScoreConfig, data.get("score")),
            runtime=_section(RuntimeConfig, data.get("runtime")),
        )

    @classmethod
    def from_yaml(cls, path: str) -> "AppConfig":
        """Load config from YAML."""
        return cls.load(path)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> "AppConfig":
        """YAML file (optional) with per-section ``overrides`` applied on top."""
        data: Dict[str, Any] = {}
        base = Path.cwd()
        if path:
            config_path = Path(path).resolve()
            try:
                with config_path.open("r", encoding="utf-8") as fh:
                    data = yaml.safe_load(fh) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            base = config_path.parent
        for section, values in (overrides or {}).items():
            merged = dict(data.get(section) or {})
            merged.update({key: value for key, value in values.items() if value is not None})
            data[section] = merged
        return cls.from_dict(data, base_dir=base)
