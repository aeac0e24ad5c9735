"""Run configuration: an INI file with [data], [model], [train] and [eval]
sections, plus ``section.key=value`` overrides from the command line.

Every key has a declared parser and default.  Unknown sections or keys are
rejected, and the whole configuration is validated by building the typed
configs before any data is touched.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

from .baseline import LinearConfig
from .data import DEFAULT_BOUNDARY, parse_timestamp
from .errors import ConfigError
from .evaluation import DEFAULT_FLOOR, RollingPlan
from .model import ModelConfig
from .training import TrainConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse):
    def inner(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)

    return inner


def _str_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _int_list(text: str) -> list[int]:
    return [int(part) for part in _str_list(text)]


def _datetime(text: str) -> datetime:
    return parse_timestamp(text.strip())


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "target": (str, "active_power"),
        "timestamp_column": (str, "timestamp"),
        # empty means every column of the CSV except the timestamp
        "variables": (_str_list, []),
        "boundary": (_datetime, DEFAULT_BOUNDARY),
        "stride": (int, 1),
    },
    "model": {
        "kind": (str, "dewp"),
        "L": (int, 24),
        "H": (int, 24),
        "d_v": (int, 512),
        "M": (int, 5),
        "conv_channels": (int, 128),
        "kernel_size": (int, 3),
        "heads": (int, 8),
        "embed_dim_month": (int, 4),
        "embed_dim_weekday": (int, 4),
        "embed_dim_hour": (int, 4),
        "input_channels": (_optional(int), None),
        "te_hidden": (_optional(int), None),
        "variable_expansion": (_bool, True),
        "attention": (_bool, True),
        "residual": (_bool, True),
        "linear_hidden": (int, 64),
    },
    "train": {
        "batch_size": (int, 256),
        "learning_rate": (float, 1e-4),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "max_epochs": (int, 100),
        "patience": (int, 10),
        "seed": (int, 0),
        "grad_clip": (_optional(float), None),
        "val_fraction": (float, 0.1),
        # seeds used by the sweep command when train.seed is not a grid axis
        "seeds": (_int_list, [0]),
    },
    "eval": {
        "interval": (_optional(int), None),
        "floor": (float, DEFAULT_FLOOR),
        "start": (_optional(_datetime), None),
        "end": (_optional(_datetime), None),
    },
}

MODEL_KINDS = ("dewp", "linear")
_DEWP_KEYS = tuple(k for k in SCHEMA["model"] if k not in ("kind", "linear_hidden"))


def _jsonable(value):
    if isinstance(value, datetime):
        return value.isoformat()
    return value


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, dotted: str):
        section, key = split_key(dotted)
        return self.values[section][key]

    def section(self, name: str) -> dict:
        return dict(self.values[name])

    def to_dict(self) -> dict:
        return {s: {k: _jsonable(v) for k, v in keys.items()} for s, keys in self.values.items()}

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def with_overrides(self, overrides) -> "RunConfig":
        values = {s: dict(keys) for s, keys in self.values.items()}
        for item in overrides:
            dotted, sep, text = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            section, key = split_key(dotted.strip())
            values[section][key] = parse_value(section, key, text.strip())
        cfg = RunConfig(values)
        cfg.validate()
        return cfg

    # typed views

    def model_config(self, d: int):
        m = self.values["model"]
        if m["kind"] == "linear":
            return LinearConfig(d=d, L=m["L"], H=m["H"], hidden=m["linear_hidden"])
        return ModelConfig(d=d, **{k: m[k] for k in _DEWP_KEYS})

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(**{k: v for k, v in t.items() if k != "seeds"})

    def plan(self, default_start: datetime, default_end: datetime) -> RollingPlan:
        e = self.values["eval"]
        return RollingPlan(
            e["start"] or default_start, e["end"] or default_end, self.values["model"]["H"], e["interval"]
        )

    def validate(self) -> None:
        """Build every typed config once so errors surface before any work starts."""
        kind = self.values["model"]["kind"]
        if kind not in MODEL_KINDS:
            raise ConfigError(f"model.kind must be one of {MODEL_KINDS}, got {kind!r}")
        self.model_config(d=1)
        self.train_config()
        if self.values["data"]["stride"] < 1:
            raise ConfigError("data.stride must be >= 1")
        if not self.values["eval"]["floor"] > 0:
            raise ConfigError("eval.floor must be > 0")
        if not self.values["train"]["seeds"]:
            raise ConfigError("train.seeds must list at least one seed")
        if any(s < 0 for s in self.values["train"]["seeds"]):
            raise ConfigError("train.seeds must be unsigned")
        e = self.values["eval"]
        self.plan(e["start"] or datetime.min, e["end"] or datetime.max)


def split_key(dotted: str) -> tuple[str, str]:
    section, _, key = dotted.partition(".")
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section {section!r} in {dotted!r}; known: {sorted(SCHEMA)}")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {dotted!r}; [{section}] accepts {sorted(SCHEMA[section])}")
    return section, key


def parse_value(section: str, key: str, text: str):
    parse = SCHEMA[section][key][0]
    try:
        return parse(text)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {text!r} ({exc})") from None


def defaults() -> RunConfig:
    return RunConfig({s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()})


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Defaults, then the INI file at ``path``, then overrides, then ``seed``."""
    items = []
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
        parser.optionxform = str
        try:
            with Path(path).open(encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                items.append(f"{section}.{key}={value}")
    items.extend(overrides)
    if seed is not None:
        items.append(f"train.seed={seed}")
    return defaults().with_overrides(items)
