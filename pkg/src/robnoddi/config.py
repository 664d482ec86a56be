"""Experiment configuration: a flat ``section.key = value`` text file.

Every key has a default, so an empty file (or none) is a valid config.
Unknown keys and unparsable values raise :class:`ConfigError`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .dataio import read_keyvalue, write_keyvalue
from .exceptions import ConfigError, ManifestError
from .phantom import MIN_DIM

ABLATION_GRID = ((20, 20), (25, 25), (30, 30), (35, 35), (40, 40), (16, 29), (21, 28), (26, 23))


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (24, 24, 24)
    n_train: int = 6
    n_val: int = 2
    n_test: int = 2
    seed: int = 100
    noise_seed: int = 200
    snr: float = 30.0
    bvalues: tuple = (1000.0, 2000.0)
    directions: tuple = (90, 90)
    b0: int = 18
    scheme_seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    w: int = 5
    stride: int = 1
    sh_order: int = 6
    lam: float = 6e-3
    n_fixed: int = 30
    selection: str = "spread"
    n_min: int = 20
    n_max: int = 40


@dataclass(frozen=True)
class TrainSection:
    architecture: str = "mlp"
    hidden: tuple = (512, 512, 512)
    code_size: int = 256
    n_iterations: int = 8
    lr: float = 5e-4
    lr_schedule: str = "step"
    lr_decay: float = 0.5
    lr_step: int = 5
    batch_size: int = 128
    epochs: int = 15
    standardize: str = "center"
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    s1: int = 30
    s2: int = 30
    rs_seed: int = 777
    noise_seed: int = 5000
    ablation: tuple = ABLATION_GRID
    ablation_seeds: tuple = (777,)


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: str = "robnoddi_out"

    def validate(self) -> "ExperimentConfig":
        p, q, t, e = self.phantom, self.pipeline, self.train, self.eval
        if len(p.dims) != 3 or min(p.dims) < MIN_DIM:
            raise ConfigError(f"phantom.dims must be three values >= {MIN_DIM}, got {p.dims}")
        if min(p.n_train, p.n_test) < 1 or p.n_val < 0:
            raise ConfigError("need at least one training and one test volume")
        if len(p.bvalues) != len(p.directions) or not p.bvalues:
            raise ConfigError("phantom.bvalues and phantom.directions must have one entry per shell")
        if p.b0 < 1:
            raise ConfigError("phantom.b0 must be >= 1 (signals are normalized by b0)")
        if not p.snr > 0:
            raise ConfigError("phantom.snr must be positive")
        if q.w < 3 or q.w % 2 == 0 or q.w > min(p.dims):
            raise ConfigError(f"pipeline.w must be odd, >= 3 and fit the volume, got {q.w}")
        if q.stride < 1:
            raise ConfigError("pipeline.stride must be >= 1")
        if q.sh_order < 0 or q.sh_order % 2:
            raise ConfigError("pipeline.sh_order must be even and nonnegative")
        if q.lam < 0:
            raise ConfigError("pipeline.lam must be nonnegative")
        smallest = min(p.directions)
        if not 1 <= q.n_fixed <= smallest:
            raise ConfigError(f"pipeline.n_fixed must lie in 1..{smallest}")
        if q.selection not in ("spread", "random"):
            raise ConfigError("pipeline.selection must be spread or random")
        if not 20 <= q.n_min <= q.n_max <= smallest:
            raise ConfigError(f"need 20 <= pipeline.n_min <= pipeline.n_max <= {smallest}")
        if t.architecture not in ("mlp", "gated"):
            raise ConfigError("train.architecture must be mlp or gated")
        if t.lr_schedule not in ("step", "fixed"):
            raise ConfigError("train.lr_schedule must be step or fixed")
        if t.standardize not in ("none", "center", "scale"):
            raise ConfigError("train.standardize must be none, center or scale")
        if not t.lr > 0 or t.batch_size < 1 or t.epochs < 1:
            raise ConfigError("train.lr, train.batch_size and train.epochs must be positive")
        for s1, s2 in ((e.s1, e.s2),) + tuple(e.ablation):
            if min(s1, s2) < 1 or max(s1, s2) > smallest:
                raise ConfigError(f"test direction counts {s1}/{s2} must lie in 1..{smallest}")
        if len(p.bvalues) != 2:
            raise ConfigError("the experiment commands expect exactly two shells")
        return self

    def standardize_flag(self):
        return {"none": False, "center": "center", "scale": True}[self.train.standardize]

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Copy with selected fields replaced, e.g. ``train={"epochs": 2}``."""
        kw = {}
        for name, changes in sections.items():
            if name == "out":
                kw["out"] = changes
            else:
                kw[name] = replace(getattr(self, name), **changes)
        return replace(self, **kw)


_SECTIONS = {"phantom": PhantomConfig, "pipeline": PipelineConfig, "train": TrainSection, "eval": EvalConfig}


def _parse_value(default, text: str):
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            return tuple(tuple(int(v) for v in item.split("/")) for item in text.split())
        kind = type(default[0]) if default else int
        return tuple(kind(v) for v in text.replace(",", " ").split())
    return text


def _format_value(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return " ".join("/".join(str(v) for v in item) for item in value)
        return " ".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_from_dict(items: dict) -> ExperimentConfig:
    parts = {name: {} for name in _SECTIONS}
    out = ExperimentConfig.out
    for key, text in items.items():
        if key == "out":
            out = text
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section in {key!r}")
        defaults = {f.name: f.default for f in fields(_SECTIONS[section])}
        if name not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            parts[section][name] = _parse_value(defaults[name], text)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {key} = {text!r}: {exc}") from exc
    cfg = ExperimentConfig(**{k: cls(**parts[k]) for k, cls in _SECTIONS.items()}, out=out)
    return cfg.validate()


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            out[f"{section}.{f.name}"] = _format_value(getattr(obj, f.name))
    out["out"] = cfg.out
    return out


def load_config(path=None) -> ExperimentConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig().validate()
    try:
        items = read_keyvalue(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ManifestError as exc:
        raise ConfigError(str(exc)) from exc
    return config_from_dict(items)


def save_config(path, cfg: ExperimentConfig) -> None:
    write_keyvalue(path, config_to_dict(cfg))
