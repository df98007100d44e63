"""Experiment configuration: INI files with one section per parameter group.

Every key is optional; absent keys take the defaults below (802.11a-style
timings, 1500-byte payload at 6 Mb/s, and the Q-network training
hyper-parameters). Unknown sections or keys are rejected so typos surface.

    [experiment]
    scheme = basic          ; basic | rts | frma | analytic
    n_stations = 5
    duration_us = 20000000
    trials = 10
    master_seed = 0

    [backoff]
    cw_min = 15
    cw_max = 1023           ; m is inferred as log2((cw_max+1)/(cw_min+1))
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from frma.analytic import AccessScheme, BackoffParams, PhyTimings
from frma.fed import FedConfig, TriggerKind
from frma.qnn import TrainerConfig

__all__ = [
    "CONFIG_ENV",
    "ConfigError",
    "ExperimentConfig",
    "Scheme",
    "dump_config",
    "load_config",
    "parse_config",
]

CONFIG_ENV = "FRMA_CONFIG"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class Scheme(str, enum.Enum):
    BASIC = "basic"
    RTS_CTS = "rts"
    FRMA = "frma"
    ANALYTIC = "analytic"

    @classmethod
    def parse(cls, value: "Scheme | str") -> "Scheme":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "").replace("/", "")
        aliases = {"basic": cls.BASIC, "dcf": cls.BASIC, "rts": cls.RTS_CTS, "rtscts": cls.RTS_CTS,
                   "frma": cls.FRMA, "analytic": cls.ANALYTIC}
        if key not in aliases:
            raise ConfigError(f"experiment.scheme: unknown scheme {value!r}")
        return aliases[key]

    @property
    def access(self) -> AccessScheme:
        # FRMA frames use basic access (no RTS/CTS handshake)
        return AccessScheme.RTS_CTS if self is Scheme.RTS_CTS else AccessScheme.BASIC


@dataclass(frozen=True)
class ExperimentConfig:
    scheme: Scheme = Scheme.BASIC
    n_stations: int = 5
    duration_us: float = 20e6
    trials: int = 10
    master_seed: int = 0
    phy: PhyTimings = field(default_factory=PhyTimings)
    backoff: BackoffParams = field(default_factory=BackoffParams)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    eta: float = 0.9
    memory: int = 20
    fl_enabled: bool = True
    pretrain_checkpoint: str | None = None
    window_slots: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        checks = [
            ("n_stations", self.n_stations >= 1, "must be >= 1"),
            ("duration_us", math.isfinite(self.duration_us) and self.duration_us > 0, "must be positive"),
            ("trials", self.trials >= 1, "must be >= 1"),
            ("master_seed", self.master_seed >= 0, "must be >= 0"),
            ("eta", 0.0 <= self.eta < 1.0, "must lie in [0, 1)"),
            ("memory", self.memory >= 1, "must be >= 1"),
            ("window_slots", self.window_slots >= 1, "must be >= 1"),
        ]
        for name, ok, why in checks:
            if not ok:
                raise ConfigError(f"experiment.{name} {why}, got {getattr(self, name)!r}")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int(text: str) -> int:
    return int(text.strip())


def _optional(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else conv(text)
    return parse


def _float(text: str) -> float:
    return float(text.strip())


_EXPERIMENT = {
    "scheme": Scheme.parse, "n_stations": _int, "duration_us": _float, "trials": _int,
    "master_seed": _int, "eta": _float, "memory": _int, "fl_enabled": _bool,
    "pretrain_checkpoint": _optional(str.strip), "window_slots": _int,
}
# section -> (dataclass, converters)
_NESTED = {
    "phy": (PhyTimings, {f.name: _float for f in dataclasses.fields(PhyTimings)}),
    "backoff": (BackoffParams, {"cw_min": _int, "cw_max": _int, "retry_limit": _int, "m": _optional(_int)}),
    "trainer": (TrainerConfig, {"learning_rate": _float, "gamma": _float, "batch_size": _int,
                                "target_replace_every": _int, "memory_size": _int}),
    "fed": (FedConfig, {"period": _int, "trigger": TriggerKind, "overhead_us": _optional(_float)}),
}


def _convert(section: str, values: dict[str, str], table: dict) -> dict[str, Any]:
    out = {}
    for key, text in values.items():
        if key not in table:
            raise ConfigError(f"{section}.{key}: unknown key")
        try:
            out[key] = table[key](text)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from exc
    return out


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for name in cp.sections():
        if name != "experiment" and name not in _NESTED:
            raise ConfigError(f"{name}: unknown section")
    kwargs: dict[str, Any] = {}
    if cp.has_section("experiment"):
        kwargs.update(_convert("experiment", dict(cp["experiment"]), _EXPERIMENT))
    for name, (cls, table) in _NESTED.items():
        values = _convert(name, dict(cp[name]), table) if cp.has_section(name) else {}
        try:
            kwargs[name] = cls(**values)
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    return ExperimentConfig(**kwargs)


def load_config(path: str | os.PathLike | None = None) -> ExperimentConfig:
    """Read a config file; ``None`` falls back to $FRMA_CONFIG, then to defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is None:
        return ExperimentConfig()
    return parse_config(Path(path).read_text())


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize every field; ``parse_config(dump_config(c)) == c``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["experiment"] = {k: _fmt(getattr(cfg, k)) for k in _EXPERIMENT}
    for name, (_, table) in _NESTED.items():
        sub = getattr(cfg, name)
        cp[name] = {k: _fmt(getattr(sub, k)) for k in table}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
