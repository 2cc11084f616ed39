"""Run configuration: defaults, a ``key = value`` file and command-line overrides.

Config file format, one setting per line::

    # comment
    variant = tiny
    iters = 2000
    lr_switch_iter = none

Precedence is defaults < config file < command-line flags. Unknown keys are
rejected so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .networks import Variant
from .training import LossWeights, Stage, TrainConfig, default_schedule


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # shared
    seed: int = 0
    threads: int = 1
    # dataset
    plates: int = 250
    size: int = 64
    split: float = 0.8
    noise: float = 0.05
    min_digits: int = 4
    max_digits: int = 5
    # paths
    data: str = "data"
    out: str = "runs/latest"
    checkpoint: str = ""
    resume: str = ""
    report: str = ""
    # training
    variant: str = "tiny"
    batch_size: int = 16
    iters: int = 1000
    lr_initial: float = 1e-4
    lr_final: float = 1e-5
    lr_switch_epoch: int = 100
    lr_switch_iter: int | None = None
    clip_norm: float = 5.0
    lambda_gd: float = 0.4
    lambda_gr: float = 0.4
    lambda_ds: float = 0.15
    lambda_dc: float = 0.05
    denoise_until: float = 0.25
    rectify_until: float = 0.5
    checkpoint_every: int = 0
    plots: bool = True

    def validate(self) -> "RunConfig":
        try:
            Variant.parse(self.variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not 0.0 <= self.denoise_until <= self.rectify_until <= 1.0:
            raise ConfigError("need 0 <= denoise_until <= rectify_until <= 1")
        if not 0.0 < self.split < 1.0:
            raise ConfigError("split must lie strictly between 0 and 1")
        return self

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_gd, self.lambda_gr, self.lambda_ds, self.lambda_dc)

    def schedule(self) -> list[Stage]:
        return default_schedule(self.iters, (self.denoise_until, self.rectify_until))

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                variant=Variant.parse(self.variant).value,
                input_size=self.size,
                batch_size=self.batch_size,
                lr_initial=self.lr_initial,
                lr_final=self.lr_final,
                lr_switch_epoch=self.lr_switch_epoch,
                lr_switch_iter=self.lr_switch_iter,
                max_iterations=self.iters,
                clip_norm=self.clip_norm,
                seed=self.seed,
                weights=self.weights(),
                stage_schedule=self.schedule(),
                checkpoint_every=self.checkpoint_every,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_HINTS = typing.get_type_hints(RunConfig)
FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def _coerce(key: str, raw: str):
    hint = _HINTS[key]
    text = raw.strip()
    optional = type(None) in typing.get_args(hint)
    base = next((a for a in typing.get_args(hint) if a is not type(None)), hint)
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if base is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if base is int:
            return int(text)
        if base is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base.__name__}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
        interpolation=None, strict=True,
    )
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string("[run]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if parser.sections() != ["run"] or parser.defaults():
        raise ConfigError(f"{source}: section headers are not supported")
    values = {}
    for key, raw in parser["run"].items():
        if key not in _HINTS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config_file(path) -> dict[str, object]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, file values and non-None overrides, in that order."""
    merged: dict[str, object] = {}
    for layer in (file_values or {}, {k: v for k, v in (overrides or {}).items() if v is not None}):
        for key, val in layer.items():
            if key not in _HINTS:
                raise ConfigError(f"unknown setting {key!r}")
            merged[key] = val
    return dataclasses.replace(RunConfig(), **merged).validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if val is None else val}")
    return "\n".join(lines) + "\n"
