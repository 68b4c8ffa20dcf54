"""Declarative run configuration shared by all CLI commands.

A configuration is a JSON document with the sections below; every key is
optional and defaults to the value shown in :data:`DEFAULTS`. Unknown keys
and values of the wrong type are rejected before anything runs. Individual
keys can be overridden with ``section.key=value`` strings (values are parsed
as JSON, falling back to a plain string).
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path

from .building import BuildingParams, ScheduleParams, SimConfig, WeatherParams, multi_dwelling, PATTERNS
from .errors import ConfigError
from .estimator import EmOptions
from .features import LatentConfig, NominalConfig
from .forecaster import ModelConfig
from .timeseries import HOUR, load_holidays, parse_timestamp

DEFAULTS: dict = {
    "features": {
        "T_c": 17.0,
        "n_b": 24,
        "M": 8,
        "periodic_inputs": ["t_d", "d_w", "w_y"],
        "binary_inputs": ["wk", "s"],
        "boundaries": {},
    },
    "estimator": {
        "max_iters": 300,
        "rel_tol": 1e-10,
        "prune_tol": 1e-8,
        "iters_per_sample": 3,
        "ridge_jitter": 1e-8,
        "selection": "bic",
        "param_tol": None,
        "lam": 1.0,
    },
    "evaluation": {
        "split": None,          # ISO timestamp; default is start + train_hours
        "train_hours": 8760,
        "H": 24,
        "clamp": False,
    },
    "simulator": {
        "preset": "multi-dwelling",   # or "default"
        "pattern": "night-setback",
        "scale": None,                # preset's own size when null
        "duration": 17520,
        "substep": 60,
        "start": "2019-01-01T00:00:00+00:00",
        "warmup": 720,
        "dead_band": 10.0,
        "seed": 0,
        "consumers": 1,
    },
    "data": {
        "holidays": None,
        "tz": "UTC",
        "on_conflict": "error",
        "max_interp_hours": 6,
    },
}

PRESETS = ("default", "multi-dwelling")

# keys whose default is null, with the types they accept otherwise
_NULLABLE = {
    ("evaluation", "split"): (str,),
    ("simulator", "scale"): (int, float),
    ("estimator", "param_tol"): (int, float),
    ("data", "holidays"): (str,),
}


def _check_type(path: tuple, value, default):
    if value is None:
        if path in _NULLABLE:
            return
        raise ConfigError(f"{'.'.join(path)} must not be null")
    if path in _NULLABLE:
        allowed = _NULLABLE[path]
    elif isinstance(default, bool):
        allowed = (bool,)
    elif isinstance(default, int):
        allowed = (int,)
    elif isinstance(default, float):
        allowed = (int, float)
    else:
        allowed = (type(default),)
    if isinstance(value, bool) and bool not in allowed:
        raise ConfigError(f"{'.'.join(path)} must be {allowed[0].__name__}, got a boolean")
    if not isinstance(value, allowed):
        raise ConfigError(f"{'.'.join(path)} must be {allowed[0].__name__}, got {value!r}")


def _merge(base: dict, update: dict, path: tuple = ()) -> dict:
    if not isinstance(update, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'} must be an object")
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(where)!r}")
        default = DEFAULTS
        for part in where:
            default = default[part]
        if isinstance(default, dict) and path == ():
            out[key] = _merge(base[key], value, where)
        else:
            _check_type(where, value, default)
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> dict:
    """``"estimator.max_iters=100"`` -> ``{"estimator": {"max_iters": 100}}``."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    parts = key.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key {key!r} must be section.key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {parts[0]: {parts[1]: value}}


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        object.__setattr__(self, "values", _merge(DEFAULTS, self.values))
        # build everything once so that invalid combinations fail up front
        self.model_config()
        self.sim_config()
        self.building()
        ev = self.values["evaluation"]
        if ev["H"] < 1 or ev["train_hours"] < 1:
            raise ConfigError("evaluation.H and evaluation.train_hours must be positive")
        if ev["split"] is not None:
            self._timestamp(ev["split"], "evaluation.split")
        if self.values["simulator"]["consumers"] < 1:
            raise ConfigError("simulator.consumers must be at least 1")
        if self.values["data"]["on_conflict"] not in ("error", "last"):
            raise ConfigError("data.on_conflict must be 'error' or 'last'")
        if self.values["data"]["max_interp_hours"] < 0:
            raise ConfigError("data.max_interp_hours must be non-negative")

    @staticmethod
    def _timestamp(text: str, key: str) -> datetime:
        try:
            return parse_timestamp(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None

    # -- construction ---------------------------------------------------------
    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        values = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text(encoding="utf-8"))
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
            values = _merge(values, doc)
        for text in overrides:
            values = _merge(values, parse_override(text))
        return cls(values)

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True)

    def section(self, name: str) -> dict:
        return copy.deepcopy(self.values[name])

    # -- derived objects ------------------------------------------------------
    def model_config(self) -> ModelConfig:
        return model_config_from_dict({"features": self.values["features"],
                                       "estimator": self.values["estimator"],
                                       "clamp": self.values["evaluation"]["clamp"]})

    def holidays(self) -> frozenset:
        path = self.values["data"]["holidays"]
        return load_holidays(path) if path else frozenset()

    def sim_config(self) -> SimConfig:
        sim = self.values["simulator"]
        return SimConfig(
            duration=sim["duration"], substep=sim["substep"],
            start=self._timestamp(sim["start"], "simulator.start"), warmup=sim["warmup"],
            weather=WeatherParams(), dead_band=float(sim["dead_band"]), seed=sim["seed"],
            tz=self.values["data"]["tz"], holidays=self.holidays(),
        )

    def building(self) -> tuple[BuildingParams, ScheduleParams]:
        sim = self.values["simulator"]
        if sim["preset"] not in PRESETS:
            raise ConfigError(f"unknown simulator preset {sim['preset']!r}; choose from {PRESETS}")
        if sim["pattern"] not in PATTERNS:
            raise ConfigError(f"unknown ventilation pattern {sim['pattern']!r}; choose from {PATTERNS}")
        if sim["scale"] is not None and not sim["scale"] > 0:
            raise ConfigError("simulator.scale must be positive")
        if sim["preset"] == "multi-dwelling":
            return multi_dwelling(sim["scale"] or 16.0, sim["pattern"])
        scale = sim["scale"] or 1.0
        return BuildingParams().scaled(scale), ScheduleParams(pattern=sim["pattern"]).scaled(scale)

    def split(self, data_start: datetime) -> datetime:
        ev = self.values["evaluation"]
        if ev["split"] is not None:
            return self._timestamp(ev["split"], "evaluation.split")
        return data_start + ev["train_hours"] * HOUR

    @property
    def H(self) -> int:
        return self.values["evaluation"]["H"]


# --------------------------------------------------------------------------
# model configuration <-> plain data (also used by state files)

def model_config_to_dict(cfg: ModelConfig) -> dict:
    em = asdict(cfg.em)
    em["lam"] = cfg.lam
    return {
        "features": {
            "T_c": cfg.nominal.T_c, "n_b": cfg.nominal.n_b, "M": cfg.latent.M,
            "periodic_inputs": list(cfg.latent.periodic_inputs),
            "binary_inputs": list(cfg.latent.binary_inputs),
            "boundaries": dict(cfg.latent.boundaries),
        },
        "estimator": em,
        "clamp": cfg.clamp,
    }


def model_config_from_dict(doc: dict) -> ModelConfig:
    try:
        feat = dict(doc["features"])
        est = dict(doc["estimator"])
        lam = float(est.pop("lam", 1.0))
        return ModelConfig(
            nominal=NominalConfig(T_c=float(feat["T_c"]), n_b=feat["n_b"]),
            latent=LatentConfig(M=feat["M"], periodic_inputs=tuple(feat["periodic_inputs"]),
                                binary_inputs=tuple(feat["binary_inputs"]),
                                boundaries={k: float(v) for k, v in feat["boundaries"].items()}),
            em=EmOptions(**est),
            lam=lam,
            clamp=bool(doc.get("clamp", False)),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"incomplete model configuration: {exc}") from None
