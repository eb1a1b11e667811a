"""Run configuration: a single JSON document with dotted-path overrides."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .evaluation import DEFAULT_EPSILON_GRID

VARIANTS = (
    "aef-partitioned-center",
    "aef-partitioned-corner",
    "aef-partitioned-random",
    "aef-linear",
    "vae",
    "deterministic-ae",
)


class ConfigError(ValueError):
    """A configuration field has an invalid value."""


@dataclass
class DataConfig:
    kind: str = "toy"  # toy | idx | file
    manifold: str = "sine-curve"
    n_ambient: int = 10
    count: int = 5000
    test_count: int = 1000
    noise: float = 0.1
    train_path: str | None = None
    test_path: str | None = None
    dequantize: bool = True
    noise_std: float = 0.0
    flip: bool = False
    validation_fraction: float = 0.1
    limit: int | None = None


@dataclass
class ModelConfig:
    variant: str = "aef-linear"
    latent_dim: int = 1
    architecture: str = "mlp"  # mlp | conv
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    prior_flow: bool = True
    core_flow: bool = True
    flow_layers: int = 4
    flow_hidden: int = 256
    preprocess: str = "none"  # none | logit
    logit_lambda: float = 1e-6
    sigma_init: float = 1.0
    train_sigma: bool = True
    expansion_init_std: float = 0.01


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    batch_size: int = 128
    max_iterations: int = 20000
    clip_norm: float | None = 200.0
    patience: int = 5000
    eval_every: int = 250


@dataclass
class EvalConfig:
    is_samples: int = 128
    is_rounds: int = 20
    epsilon_grid: list[float] = field(default_factory=lambda: list(DEFAULT_EPSILON_GRID))
    tune_samples: int = 128
    tune_points: int = 500
    max_points: int | None = None


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    dtype: str = "float32"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        """Copy with dotted-path changes, e.g. ``replace(**{"model.prior_flow": False})``."""
        out = copy.deepcopy(self)
        for key, value in changes.items():
            _set_path(out, key, value)
        out.validate()
        return out

    def validate(self) -> "RunConfig":
        d, m, o, e = self.data, self.model, self.optimizer, self.evaluation
        checks = [
            ("dtype", self.dtype in ("float32", "float64"), "must be float32 or float64"),
            ("data.kind", d.kind in ("toy", "idx", "file"), "must be toy, idx or file"),
            ("data.count", d.count >= 2, "must be at least 2"),
            ("data.test_count", d.test_count >= 1, "must be positive"),
            ("data.noise", d.noise >= 0, "must be nonnegative"),
            ("data.noise_std", d.noise_std >= 0, "must be nonnegative"),
            ("data.validation_fraction", 0 < d.validation_fraction < 1, "must lie in (0, 1)"),
            ("data.limit", d.limit is None or d.limit >= 2, "must be at least 2"),
            ("model.variant", m.variant in VARIANTS, f"must be one of {VARIANTS}"),
            ("model.latent_dim", m.latent_dim >= 1, "must be positive"),
            ("model.architecture", m.architecture in ("mlp", "conv"), "must be mlp or conv"),
            ("model.hidden", all(h >= 1 for h in m.hidden), "widths must be positive"),
            ("model.flow_layers", m.flow_layers >= 1, "must be positive"),
            ("model.flow_hidden", m.flow_hidden >= 1, "must be positive"),
            ("model.preprocess", m.preprocess in ("none", "logit"), "must be none or logit"),
            ("model.logit_lambda", 0 <= m.logit_lambda < 0.5, "must lie in [0, 0.5)"),
            ("model.sigma_init", m.sigma_init > 1e-4, "must exceed 1e-4"),
            ("optimizer.lr", o.lr > 0, "must be positive"),
            ("optimizer.batch_size", o.batch_size >= 2, "must be at least 2"),
            ("optimizer.max_iterations", o.max_iterations >= 1, "must be positive"),
            ("optimizer.clip_norm", o.clip_norm is None or o.clip_norm > 0, "must be positive or null"),
            ("optimizer.patience", o.patience >= 1, "must be positive"),
            ("optimizer.eval_every", o.eval_every >= 1, "must be positive"),
            ("evaluation.is_samples", e.is_samples >= 1, "must be positive"),
            ("evaluation.is_rounds", e.is_rounds >= 1, "must be positive"),
            ("evaluation.epsilon_grid", len(e.epsilon_grid) > 0 and all(v > 0 for v in e.epsilon_grid),
             "must be a nonempty list of positive numbers"),
            ("evaluation.tune_samples", e.tune_samples >= 1, "must be positive"),
            ("evaluation.tune_points", e.tune_points >= 1, "must be positive"),
        ]
        for path, ok, message in checks:
            if not ok:
                raise ConfigError(f"{path}: {message} (got {_get_path(self, path)!r})")
        if d.kind in ("idx", "file") and not d.train_path:
            raise ConfigError("data.train_path: required for data.kind=" + d.kind)
        if m.architecture == "conv" and d.kind == "toy":
            raise ConfigError("model.architecture: conv needs image data")
        return self


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "optimizer": OptimizerConfig, "evaluation": EvalConfig}


def _coerce(path: str, value: Any, default: Any, annotation: str) -> Any:
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: may not be null")
    if "bool" in annotation:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if annotation.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if annotation.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if annotation.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if annotation.startswith("list"):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        kind = int if "int" in annotation else float
        out = []
        for i, v in enumerate(value):
            out.append(_coerce(f"{path}[{i}]", v, None, kind.__name__))
        return out
    return value


def _build(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"{prefix + '.' if prefix else ''}{sorted(unknown)[0]}: unknown field")
    kwargs = {}
    for name, value in raw.items():
        path = f"{prefix}.{name}" if prefix else name
        if name in _SECTIONS and cls is RunConfig:
            kwargs[name] = _build(_SECTIONS[name], value, path)
        else:
            kwargs[name] = _coerce(path, value, None, str(known[name].type))
    return cls(**kwargs)


def from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "").validate()


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    for item in overrides or []:
        apply_override(raw, item)
    return from_dict(raw)


def apply_override(raw: dict, item: str) -> None:
    """Apply ``section.field=value`` to a raw config dict (value parsed as JSON)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r}: expected key=value")
    key, text = item.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    parts = key.split(".")
    target_cls = RunConfig
    node = raw
    for part in parts[:-1]:
        if part not in _SECTIONS or target_cls is not RunConfig:
            raise ConfigError(f"{key}: unknown field")
        target_cls = _SECTIONS[part]
        node = node.setdefault(part, {})
    if parts[-1] not in {f.name for f in dataclasses.fields(target_cls)} or parts[-1] in _SECTIONS:
        raise ConfigError(f"{key}: unknown field")
    node[parts[-1]] = value


def _get_path(cfg, path):
    for part in path.split("."):
        cfg = getattr(cfg, part)
    return cfg


def _set_path(cfg, path, value):
    parts = path.split(".")
    for part in parts[:-1]:
        cfg = getattr(cfg, part)
    if not hasattr(cfg, parts[-1]):
        raise ConfigError(f"{path}: unknown field")
    setattr(cfg, parts[-1], value)
