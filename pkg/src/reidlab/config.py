"""Flat key = value run configuration.

One line per setting, `#` comments allowed, unknown keys are hard errors.
Every field of the backbone, embedding, schedule, loss-weight, spectral
and toy-data configs is addressable; missing keys fall back to the
shipped defaults. Seeds are not configuration: they come from the CLI and
fan out by name.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import ConfigError
from .losses import LossWeights
from .network import BackboneConfig, EmbeddingSpec
from .ortho import SvdoConfig
from .train import TrainSchedule


@dataclass(frozen=True)
class DataConfig:
    num_ids: int = 20
    instances_per_id: int = 10
    noise: float = 0.15
    jitter: float = 0.4
    clutter: float = 0.8
    cast: float = 1.5
    flip_p: float = 0.5


@dataclass(frozen=True)
class Config:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    embedding: EmbeddingSpec = field(default_factory=EmbeddingSpec)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    svdo: SvdoConfig = field(default_factory=SvdoConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text: str) -> tuple:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (section attr, field name, parser)
SCHEMA = {
    "backbone.widths": ("backbone", "block_widths", _parse_int_tuple),
    "backbone.branch_width": ("backbone", "branch_width", int),
    "backbone.input_shape": ("backbone", "input_shape", _parse_int_tuple),
    "backbone.reduction_dim": ("backbone", "reduction_dim", int),
    "backbone.dropout": ("backbone", "dropout", float),
    "embedding.k_a": ("embedding", "k_a", int),
    "embedding.k_g": ("embedding", "k_g", int),
    "loss.beta_tr": ("weights", "beta_tr", float),
    "loss.beta_of": ("weights", "beta_of", float),
    "loss.beta_ow": ("weights", "beta_ow", float),
    "loss.margin_alpha": ("weights", "margin_alpha", float),
    "svdo.beta": ("svdo", "beta", float),
    "svdo.iterations": ("svdo", "iterations", int),
    "svdo.seed": ("svdo", "seed", int),
    "svdo.of_reduction": ("svdo", "of_reduction", str),
    "svdo.ow_reduction": ("svdo", "ow_reduction", str),
    "svdo.warm_start": ("svdo", "warm_start", _parse_bool),
    "train.stage1_epochs": ("schedule", "stage1_epochs", int),
    "train.stage2_epochs": ("schedule", "stage2_epochs", int),
    "train.base_lr": ("schedule", "base_lr", float),
    "train.lr_decay": ("schedule", "lr_decay", float),
    "train.milestones": ("schedule", "milestones", _parse_int_tuple),
    "train.batch_p": ("schedule", "batch_p", int),
    "train.batch_k": ("schedule", "batch_k", int),
    "train.steps_per_epoch": ("schedule", "steps_per_epoch", int),
    "data.num_ids": ("data", "num_ids", int),
    "data.instances_per_id": ("data", "instances_per_id", int),
    "data.noise": ("data", "noise", float),
    "data.jitter": ("data", "jitter", float),
    "data.clutter": ("data", "clutter", float),
    "data.cast": ("data", "cast", float),
    "data.flip_p": ("data", "flip_p", float),
}


def parse_config_text(text: str) -> Config:
    overrides: dict[str, dict] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key: {key}")
        section, fieldname, parser = SCHEMA[key]
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
        overrides.setdefault(section, {})[fieldname] = parsed

    cfg = Config()
    try:
        for section, fields in overrides.items():
            cfg = replace(cfg, **{section: replace(getattr(cfg, section), **fields)})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def parse_config(path) -> Config:
    with open(path) as fh:
        return parse_config_text(fh.read())


def config_text(cfg: Config) -> str:
    """Render every key; parse(config_text(cfg)) round-trips exactly."""
    lines = []
    for key, (section, fieldname, _) in SCHEMA.items():
        value = getattr(getattr(cfg, section), fieldname)
        lines.append(f"{key} = {_fmt_value(value)}")
    return "\n".join(lines) + "\n"


def write_config(cfg: Config, path) -> None:
    with open(path, "w") as fh:
        fh.write(config_text(cfg))
