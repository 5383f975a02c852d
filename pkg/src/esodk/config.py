"""INI-style harness configuration.

Every section is optional and every key overrides one default. Unknown sections
or keys raise :class:`ConfigError`, so a typo never silently falls back to a
default. Example::

    [vehicle]
    m = 2048

    [eso]
    target_rho = 0.6

    [scenario.dlc_wet]
    mu = 0.55
    speeds = 0:40
    duration = 12
    initial_speed_kmh = 40
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, replace

from .controllers import MpcConfig
from .data import ExcitationSpec
from .koopman import TrainingConfig
from .reference import DlcGeometry
from .sim import SCENARIOS, LoopConfig, Scenario
from .vehicle import VehicleParams


class ConfigError(ValueError):
    pass


@dataclass
class EsoConfig:
    target_rho: float = 0.5
    beta1: float | None = None    # explicit gains skip the grid search
    beta2: float | None = None


@dataclass
class HarnessConfig:
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: ExcitationSpec = field(default_factory=ExcitationSpec)
    eso: EsoConfig = field(default_factory=EsoConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    lmpc_mu: float = 0.85         # road the LMPC's cornering stiffnesses assume
    scenarios: dict = field(default_factory=lambda: dict(SCENARIOS))


_TIRE_KEYS = {"B": "B_mf", "C": "C_mf", "D": "D_mf", "E": "E_mf"}
_SCENARIO_KEYS = {"mu", "speeds", "duration", "initial_speed_kmh", "mass", "mirror",
                  "sections", "offset", "run_out", "spacing"}


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _coerce(kind, text: str, where: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(text)
            return configparser.ConfigParser.BOOLEAN_STATES[low]
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return _floats(text)
        if kind == "int_tuple":
            return tuple(int(v) for v in text.split(",") if v.strip())
        if kind == "optional_tuple":
            return None if text.lower() in ("", "none", "off") else _floats(text)
        if kind == "optional_float":
            return None if text.lower() in ("", "none") else float(text)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r}") from exc
    raise AssertionError(kind)


def _kind(default):
    if isinstance(default, bool):
        return bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return "int_tuple" if default and all(isinstance(v, int) for v in default) else tuple
    raise AssertionError(type(default))


def _override(obj, section, keymap=None, kinds=None):
    """Copy of dataclass ``obj`` with the section's keys applied."""
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, text in section.items():
        name = (keymap or {}).get(key, key)
        if name not in names:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        kind = (kinds or {}).get(name) or _kind(getattr(obj, name))
        changes[name] = _coerce(kind, text, f"[{section.name}] {key}")
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section.name}] {exc}") from exc


def _speeds(text: str, where: str) -> tuple:
    knots = []
    for item in text.split(","):
        if not item.strip():
            continue
        try:
            t, v = item.split(":")
            knots.append((float(t), float(v)))
        except ValueError as exc:
            raise ConfigError(f"{where}: speeds expects 't:kmh, t:kmh, ...', got {item!r}") from exc
    if not knots:
        raise ConfigError(f"{where}: speeds is empty")
    return tuple(knots)


def _scenario(name: str, section, base: Scenario | None) -> Scenario:
    where = f"[scenario.{name}]"
    unknown = set(section) - _SCENARIO_KEYS
    if unknown:
        raise ConfigError(f"{where} unknown key {sorted(unknown)[0]!r}")
    if base is None:
        missing = {"mu", "speeds", "duration"} - set(section)
        if missing:
            raise ConfigError(f"{where} new scenario needs {', '.join(sorted(missing))}")
    geo = base.geometry if base is not None else DlcGeometry()
    geo_changes = {}
    if "sections" in section:
        geo_changes["sections"] = _coerce(tuple, section["sections"], f"{where} sections")
    for key in ("offset", "run_out", "spacing"):
        if key in section:
            geo_changes[key] = _coerce(float, section[key], f"{where} {key}")
    try:
        geo = replace(geo, **geo_changes) if geo_changes else geo
        speeds = _speeds(section["speeds"], where) if "speeds" in section else base.speed_knots
        fields = dict(
            name=name,
            mu=_coerce(float, section["mu"], f"{where} mu") if "mu" in section else base.mu,
            speed_knots=speeds,
            duration=_coerce(float, section["duration"], f"{where} duration") if "duration" in section
            else base.duration,
            initial_speed_kmh=_coerce(float, section["initial_speed_kmh"], f"{where} initial_speed_kmh")
            if "initial_speed_kmh" in section else (base.initial_speed_kmh if base else speeds[0][1]),
            mass=_coerce("optional_float", section["mass"], f"{where} mass") if "mass" in section
            else (base.mass if base else None),
            geometry=geo,
            mirror=_coerce(bool, section["mirror"], f"{where} mirror") if "mirror" in section
            else (base.mirror if base else False),
        )
        return Scenario(**fields)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where} {exc}") from exc


def parse_config(text: str) -> HarnessConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from exc
    cfg = HarnessConfig()
    scenarios = dict(cfg.scenarios)
    for name in parser.sections():
        sec = parser[name]
        if name == "vehicle":
            cfg.vehicle = _override(cfg.vehicle, sec)
        elif name == "tire":
            unknown = set(sec) - set(_TIRE_KEYS)
            if unknown:
                raise ConfigError(f"[tire] unknown key {sorted(unknown)[0]!r}")
            cfg.vehicle = _override(cfg.vehicle, sec, keymap=_TIRE_KEYS)
        elif name == "training":
            cfg.training = _override(cfg.training, sec)
        elif name == "data":
            cfg.data = _override(cfg.data, sec)
        elif name == "eso":
            cfg.eso = _override(cfg.eso, sec, kinds={"target_rho": float, "beta1": "optional_float",
                                                     "beta2": "optional_float"})
            if (cfg.eso.beta1 is None) != (cfg.eso.beta2 is None):
                raise ConfigError("[eso] give both beta1 and beta2 or neither")
        elif name == "mpc":
            sec_items = dict(sec)
            if "lmpc_mu" in sec_items:
                cfg.lmpc_mu = _coerce(float, sec_items.pop("lmpc_mu"), "[mpc] lmpc_mu")
                if not 0 < cfg.lmpc_mu <= 1.2:
                    raise ConfigError("[mpc] lmpc_mu must lie in (0, 1.2]")
            cfg.mpc = _override(cfg.mpc, _Section("mpc", sec_items))
        elif name == "loop":
            cfg.loop = _override(cfg.loop, sec, kinds={"noise_std": "optional_tuple"})
        elif name.startswith("scenario."):
            sname = name.split(".", 1)[1]
            if not sname:
                raise ConfigError("scenario section needs a name")
            scenarios[sname] = _scenario(sname, sec, scenarios.get(sname))
        else:
            raise ConfigError(f"unknown section [{name}]")
    cfg.scenarios = scenarios
    return cfg


class _Section(dict):
    def __init__(self, name, items):
        super().__init__(items)
        self.name = name


def load_config(path) -> HarnessConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
