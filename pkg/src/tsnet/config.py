# Copyright 2024 The tsnet Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Experiment configuration and its flat `key = value` file format.

Keys are `<section>.<field>` for the sections `model`, `loss`, `train` and `data`, plus the
top-level `out_dir` and `runs`. `#` starts a comment. `none` denotes an unset optional
value; booleans are `true` or `false`. Defaults:

    model.kind = TSNet              loss.lambda = 0.01         train.lr = 0.001
    model.loss_mode = ThreeEntropy  loss.beta = 0.01           train.momentum = 0.95
    model.fusion_point = FC3        loss.q = 50.0              train.l2 = 0.001
    model.width_multiplier = 1.0    loss.normalize_features = false
    model.metric_hidden = 512       loss.contrastive_kind = exponential
    model.sstar_width = none        train.batch_size = 32      data.n_images = 40
    model.sstar_bottleneck = 2.0    train.epochs = none        data.image_size = 256
    runs = 1                        train.seed = 0             data.transform = edge
    out_dir = none                  train.log_interval = 10    data.source_dir = none
                                                               data.seed = 0
"""

import dataclasses
import enum
import typing
from typing import Any, Dict, Mapping, Optional, Tuple

from tsnet import datasets, losses, models, training, util

SECTIONS = {
    "model": models.ModelSpec,
    "loss": losses.LossWeights,
    "train": training.TrainConfig,
    "data": datasets.DataConfig,
}
# Field names differing from their key.
_RENAMES = {("loss", "lam"): "lambda"}
_TOP_LEVEL = {"out_dir": Optional[str], "runs": int}


class ConfigError(ValueError):
    """An unknown key or an invalid value in an experiment configuration."""


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    model: models.ModelSpec = models.ModelSpec()
    loss: losses.LossWeights = losses.LossWeights()
    train: training.TrainConfig = training.TrainConfig()
    data: datasets.DataConfig = datasets.DataConfig()
    out_dir: Optional[str] = None
    runs: int = 1

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError(f"runs must be positive, got {self.runs}")

    def to_flat(self) -> Dict[str, Any]:
        flat = {}
        for section, cls in SECTIONS.items():
            obj = getattr(self, section)
            for field in dataclasses.fields(cls):
                flat[_key(section, field.name)] = getattr(obj, field.name)
        flat["out_dir"] = self.out_dir
        flat["runs"] = self.runs
        return flat

    def to_nested(self) -> Dict[str, Any]:
        """Sacred-style dict: one sub-dict per section, values as they appear in files."""
        nested: Dict[str, Any] = {section: {} for section in SECTIONS}
        for key, value in self.to_flat().items():
            section, _, name = key.rpartition(".")
            target = nested[section] if section else nested
            target[name] = _to_plain(value)
        return nested

    def as_strings(self) -> Dict[str, str]:
        """Flat keys mapped to their values as written in a config file."""
        return {key: _format(value) for key, value in self.to_flat().items()}

    def serialize(self) -> str:
        return "".join(f"{key} = {value}\n" for key, value in self.as_strings().items())

    def hash(self) -> str:
        """Digest of everything but `out_dir` and `runs`."""
        body = "".join(
            f"{key} = {_format(value)}\n"
            for key, value in self.to_flat().items()
            if key not in _TOP_LEVEL
        )
        return util.config_hash(body)

    def replace(self, **overrides: Any) -> "ExperimentConfig":
        """Overrides flat keys, e.g. `replace(**{"model.kind": "S"})`."""
        return from_flat({**self.to_flat(), **overrides})


def _key(section: str, field_name: str) -> str:
    return f"{section}.{_RENAMES.get((section, field_name), field_name)}"


def _field_types() -> Dict[str, Tuple[str, str, Any]]:
    """Maps every key to (section, field name, annotation)."""
    types = {}
    for section, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for field in dataclasses.fields(cls):
            types[_key(section, field.name)] = (section, field.name, hints[field.name])
    for name, annotation in _TOP_LEVEL.items():
        types[name] = ("", name, annotation)
    return types


KEYS = _field_types()


def _to_plain(value: Any) -> Any:
    return value.value if isinstance(value, enum.Enum) else value


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(_to_plain(value))


def _coerce(raw: Any, annotation: Any) -> Any:
    """Converts `raw` (a string from a file, or a Python value) to `annotation`."""
    args = typing.get_args(annotation)
    if typing.get_origin(annotation) is typing.Union and type(None) in args:
        if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("none", "null", "")):
            return None
        annotation = next(arg for arg in args if arg is not type(None))
    if not isinstance(raw, str):
        if annotation is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, annotation if isinstance(annotation, type) else object):
            return raw
        raw = str(_to_plain(raw))
    raw = raw.strip()
    if annotation is bool:
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"expected true or false, got '{raw}'")
        return raw.lower() == "true"
    if annotation is int:
        return int(raw)
    if annotation is float:
        return float(raw)
    if isinstance(annotation, type) and issubclass(annotation, enum.Enum):
        return annotation(raw)
    return raw


def from_flat(
    flat: Mapping[str, Any], lines: Optional[Mapping[str, int]] = None
) -> ExperimentConfig:
    """Builds a config from flat keys; missing keys keep their defaults.

    Raises:
        ConfigError: on unknown keys or invalid values, naming the line when `lines` has it.
    """
    lines = lines or {}

    def where(key: str) -> str:
        return f"line {lines[key]}: " if key in lines else ""

    kwargs: Dict[str, Dict[str, Any]] = {section: {} for section in SECTIONS}
    top: Dict[str, Any] = {}
    for key, raw in flat.items():
        if key not in KEYS:
            raise ConfigError(f"{where(key)}unknown key '{key}'")
        section, name, annotation = KEYS[key]
        try:
            value = _coerce(raw, annotation)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{where(key)}invalid value for '{key}': {e}") from e
        (kwargs[section] if section else top)[name] = value

    built = {}
    for section, cls in SECTIONS.items():
        try:
            built[section] = cls(**kwargs[section])
        except ValueError as e:
            keys = sorted(_key(section, name) for name in kwargs[section])
            line_info = ", ".join(where(key).rstrip(": ") for key in keys if key in lines)
            raise ConfigError(f"{line_info + ': ' if line_info else ''}{section}: {e}") from e
    return ExperimentConfig(**built, **top)


def from_nested(nested: Mapping[str, Any]) -> ExperimentConfig:
    """Inverse of `ExperimentConfig.to_nested`, e.g. for a Sacred config."""
    flat = {}
    for key, value in nested.items():
        if key in SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigError(f"section '{key}' must be a mapping, got {value!r}")
            flat.update({f"{key}.{name}": inner for name, inner in value.items()})
        else:
            flat[key] = value
    return from_flat(flat)


def parse_lines(text: str) -> Tuple[Dict[str, str], Dict[str, int]]:
    """Splits a flat config file into raw values and the line number of each key."""
    values: Dict[str, str] = {}
    lines: Dict[str, int] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {number}: expected 'key = value', got '{line}'")
        if key in values:
            raise ConfigError(f"line {number}: duplicate key '{key}' (first on line {lines[key]})")
        values[key] = value.strip()
        lines[key] = number
    return values, lines


def parse(text: str) -> ExperimentConfig:
    values, lines = parse_lines(text)
    return from_flat(values, lines)


def load(path: str) -> ExperimentConfig:
    with open(path) as f:
        return parse(f.read())


def save(path: str, cfg: ExperimentConfig) -> None:
    with open(path, "w") as f:
        f.write(cfg.serialize())
