"""Declarative pipeline configuration: one INI document, one flat section per module."""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import re
from dataclasses import fields

from .causal import CausalConfig
from .classify import ThresholdRule
from .decay import DAY, DecayConfig
from .errors import ConfigError, DomainError
from .synth import SynthConfig

_UNITS = {"s": 1, "m": 60, "h": 3600, "d": DAY, "w": 7 * DAY}


def parse_duration(raw) -> float:
    """Seconds from ``3600``, ``90s``, ``15m``, ``12h``, ``5d`` or ``2w``."""
    if isinstance(raw, (int, float)):
        return float(raw)
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([smhdw]?)\s*", str(raw))
    if not m:
        raise ConfigError(f"cannot parse duration {raw!r} (examples: 3600, 12h, 5d)")
    return float(m.group(1)) * _UNITS.get(m.group(2) or "s")


def format_duration(seconds: float) -> str:
    for unit in ("w", "d", "h", "m"):
        if seconds and seconds % _UNITS[unit] == 0:
            return f"{int(seconds // _UNITS[unit])}{unit}"
    return repr(float(seconds))


def _bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    s = str(raw).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean {raw!r}")


def _metrics(raw) -> tuple[str, ...]:
    if isinstance(raw, (tuple, list)):
        return tuple(raw)
    return tuple(p.strip() for p in str(raw).split(",") if p.strip())


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "log": {
        "theta": (int, 100),
        "phi": (float, 0.5),
        "dedup": (_bool, True),
    },
    "causal": {
        "rho_mode": (str, "fixed"),
        "rho": (float, 0.1),
        "alpha": (float, 0.001),
    },
    "decay": {
        "delta": (parse_duration, 5 * DAY),
        "sigma": (float, 0.001),
        "window_grid": (str, "paper_exact"),
        "k_set": (_metrics, ("km", "rel", "nb", "wnb")),
    },
    "community": {
        "seed": (int, 0),
        "weighted": (_bool, False),
        "reject_at": (float, 0.01),
    },
    "classify": {
        "k": (int, 10),
        "metric": (str, "xi_rel"),
        "km": (float, 0.7),
        "rel": (float, 7.0),
        "nb": (float, 0.7),
        "wnb": (float, 0.7),
    },
    "evaluate": {
        "folds": (int, 10),
        "seed": (int, 0),
        "period_length": (parse_duration, 10 * DAY),
        "train_fraction": (float, 0.5),
        "horizon": (float, 0.5),
    },
    "synth": {
        f.name: ({int: int, float: float}[type(f.default)], f.default) for f in fields(SynthConfig)
    },
    "run": {
        "workers": (int, 1),
    },
}


class PipelineConfig:
    """Validated values for every section; unknown sections or keys are rejected."""

    def __init__(self, values: dict[str, dict] | None = None) -> None:
        self.values = {s: {k: parse(d) for k, (parse, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section, items in (values or {}).items():
            for key, raw in items.items():
                self.set(section, key, raw)

    def set(self, section: str, key: str, raw) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]; known: {', '.join(SCHEMA)}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]; known: {', '.join(SCHEMA[section])}")
        parser = SCHEMA[section][key][0]
        try:
            self.values[section][key] = parser(raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None

    def get(self, section: str, key: str):
        return self.values[section][key]

    # -- typed views (these also run each module's own validation) --------
    def causal(self) -> CausalConfig:
        return self._build(CausalConfig, **self.values["causal"])

    def decay(self) -> DecayConfig:
        return self._build(DecayConfig, **self.values["decay"])

    def rule(self) -> ThresholdRule:
        v = self.values["classify"]
        return self._build(ThresholdRule, km=v["km"], rel=v["rel"], nb=v["nb"], wnb=v["wnb"])

    def synth(self) -> SynthConfig:
        return self._build(SynthConfig, **self.values["synth"])

    def validate(self) -> "PipelineConfig":
        self.causal(), self.decay(), self.rule()
        log = self.values["log"]
        if log["theta"] < 1 or not 0 < log["phi"] < 1:
            raise ConfigError("[log] needs theta >= 1 and 0 < phi < 1")
        if self.values["classify"]["k"] < 1:
            raise ConfigError("[classify] k must be >= 1")
        if self.values["evaluate"]["folds"] < 2:
            raise ConfigError("[evaluate] folds must be >= 2")
        if self.values["run"]["workers"] < 1:
            raise ConfigError("[run] workers must be >= 1")
        return self

    @staticmethod
    def _build(cls, **kwargs):
        try:
            return cls(**kwargs)
        except DomainError as exc:
            raise ConfigError(str(exc)) from None

    # -- serialization -----------------------------------------------------
    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "PipelineConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str  # keep key case so typos are reported verbatim
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        return cls({s: dict(parser[s]) for s in parser.sections()}).validate()

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.loads(fh.read(), str(path))

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, items in self.values.items():
            parser[section] = {
                k: (format_duration(v) if SCHEMA[section][k][0] is parse_duration else _render(v))
                for k, v in items.items()
            }
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_json(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in items.items()}
                for s, items in self.values.items()}

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, PipelineConfig) and self.to_json() == other.to_json()
