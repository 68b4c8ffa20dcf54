"""Synthetic single-zone building heated through a district heating substation.

Lumped energy balance, explicit Euler at ``substep`` seconds::

    C_th * dT_b/dt = Q_sh + Q_v + Q_int - Q_out,   Q_out = kA * (T_b - T_o)

``Q_sh`` comes from a discrete PID on ``T_r - T_b`` in velocity form, clamped
to ``[0, Q_max]`` (clamping of the incremental form gives anti-windup for
free). The substation itself is taken as instantaneous. Ventilation losses
``Q_v = -H_v(t) * (T_b - T_o)`` and the set-point follow a schedule, which is
what produces the time dependent part of the load. Domestic hot water is not
part of the zone balance; it is added to the metered load afterwards.

Default parameters are stand-ins chosen for plausible dynamics, not
measurements of any real building.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from datetime import date, datetime, timezone
from typing import Iterable

import numba
import numpy as np

from .errors import ConfigError, SimulationError
from .timeseries import (HOUR, ConsumerDataset, HourlySeries, calendar_covariates, to_utc)

PATTERNS = ("continuous", "night-setback", "timeclock-5d", "timeclock-7d")


@dataclass(frozen=True)
class BuildingParams:
    C_th: float = 2e8       # J/K
    kA: float = 500.0       # W/K
    T_r: float = 21.0       # °C
    K_p: float = 2000.0     # W/K
    K_i: float = 0.5        # W/(K s)
    K_d: float = 0.0        # W s/K
    Q_max: float = 50e3     # W

    def __post_init__(self):
        if not (self.C_th > 0 and self.kA > 0 and self.Q_max > 0):
            raise ConfigError("C_th, kA and Q_max must be positive")
        if min(self.K_p, self.K_i, self.K_d) < 0:
            raise ConfigError("PID gains must be non-negative")

    @property
    def time_constant(self) -> float:
        """Open-loop time constant C_th / kA in seconds."""
        return self.C_th / self.kA

    def scaled(self, factor: float) -> "BuildingParams":
        """Same dynamics for a building ``factor`` times larger."""
        return replace(self, C_th=self.C_th * factor, kA=self.kA * factor, K_p=self.K_p * factor,
                       K_i=self.K_i * factor, K_d=self.K_d * factor, Q_max=self.Q_max * factor)


@dataclass(frozen=True)
class TapWaterProfile:
    mean_kW: float = 2.0
    morning_hour: float = 7.0
    evening_hour: float = 19.5
    width_h: float = 1.5
    base: float = 0.25          # night-time fraction of the peak intensity
    weekend_shift_h: float = 2.0
    summer_factor: float = 0.8
    noise_scale: float = 0.5    # sd of the multiplicative log-normal noise

    def __post_init__(self):
        if self.mean_kW < 0 or self.noise_scale < 0 or self.width_h <= 0:
            raise ConfigError("tap water profile: mean_kW and noise_scale must be >= 0, width_h > 0")

    def intensity(self, hour: float, weekend: bool, summer: bool) -> float:
        """Expected draw in kW for a local clock hour."""
        shift = self.weekend_shift_h if weekend else 0.0
        shape = self.base
        for peak, w in ((self.morning_hour + shift, 1.0), (self.evening_hour, 0.8)):
            dist = (hour - peak + 12.0) % 24.0 - 12.0
            shape += w * math.exp(-0.5 * (dist / self.width_h) ** 2)
        season = self.summer_factor if summer else 1.0
        # the shape integrates to roughly base*24 + 1.8*sqrt(2 pi)*width over a day
        norm = 24.0 / (self.base * 24.0 + 1.8 * math.sqrt(2.0 * math.pi) * self.width_h)
        return self.mean_kW * shape * norm * season


@dataclass(frozen=True)
class ScheduleParams:
    pattern: str = "continuous"
    H_v: float = 150.0            # ventilation conductance while running, W/K
    setback_K: float = 3.0
    setback_hours: tuple = (22, 6)
    vent_hours: tuple = (6, 18)
    vent_off_fraction: float = 0.2
    Q_int_base: float = 1000.0    # W
    Q_int_occupied: float = 1000.0  # W, added while occupants are home
    tap_water: TapWaterProfile = field(default_factory=TapWaterProfile)

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigError(f"unknown ventilation pattern {self.pattern!r}; choose from {PATTERNS}")
        if min(self.H_v, self.setback_K, self.Q_int_base, self.Q_int_occupied) < 0:
            raise ConfigError("schedule heat terms must be non-negative")
        if not 0 <= self.vent_off_fraction <= 1:
            raise ConfigError("vent_off_fraction must lie in [0, 1]")

    def scaled(self, factor: float) -> "ScheduleParams":
        tw = replace(self.tap_water, mean_kW=self.tap_water.mean_kW * factor)
        return replace(self, H_v=self.H_v * factor, Q_int_base=self.Q_int_base * factor,
                       Q_int_occupied=self.Q_int_occupied * factor, tap_water=tw)


@dataclass(frozen=True)
class WeatherParams:
    mean: float = 1.5            # annual mean °C (sub-arctic coastal climate)
    seasonal_amp: float = 13.0
    coldest_day: float = 20.0    # day of year of the seasonal minimum
    diurnal_amp: float = 2.5
    warmest_hour: float = 15.0
    ar_coef: float = 0.98        # hourly AR(1) coefficient of the weather anomaly
    ar_sd: float = 0.6           # innovation sd, °C


@dataclass(frozen=True)
class SimConfig:
    duration: int = 8760            # hours emitted
    substep: int = 60               # seconds
    start: datetime = datetime(2019, 1, 1, tzinfo=timezone.utc)
    warmup: int = 720               # hours simulated before `start`, discarded
    weather: WeatherParams = field(default_factory=WeatherParams)
    dead_band: float = 0.0          # kW
    seed: int = 0
    tz: str = "UTC"
    holidays: frozenset = frozenset()
    T_b0: float | None = None       # initial building temperature, defaults to the set-point

    def __post_init__(self):
        if int(self.duration) != self.duration or self.duration < 1:
            raise ConfigError("duration must be a positive number of hours")
        if self.substep <= 0 or 3600 % self.substep:
            raise ConfigError("substep must divide 3600 s")
        if self.dead_band < 0 or self.warmup < 0:
            raise ConfigError("dead_band and warmup must be non-negative")
        object.__setattr__(self, "start", to_utc(self.start))
        object.__setattr__(self, "holidays", frozenset(self.holidays))


@dataclass
class SimResult:
    """Simulated consumer plus hourly ground truth (heat terms in kW)."""

    dataset: ConsumerDataset
    truth: dict  # Q_sh, Q_v, Q_int, Q_tw, T_b, T_r -> np.ndarray
    params: BuildingParams
    schedule: ScheduleParams

    def truth_rows(self):
        keys = ("Q_sh", "Q_v", "Q_int", "Q_tw", "T_b")
        for i, ts in enumerate(self.dataset.timestamps()):
            yield ts, {k: float(self.truth[k][i]) for k in keys}


# --------------------------------------------------------------------------
# inputs

def weather(cfg: SimConfig, rng: np.random.Generator, hours: int | None = None) -> np.ndarray:
    """Hourly outdoor temperature for the warm-up plus the emitted span."""
    w = cfg.weather
    n = cfg.warmup + cfg.duration if hours is None else hours
    t0 = cfg.start.timestamp() / 3600.0 - cfg.warmup
    t = t0 + np.arange(n)
    day_of_year = (t / 24.0) % 365.25
    hour = t % 24.0
    seasonal = -w.seasonal_amp * np.cos(2 * np.pi * (day_of_year - w.coldest_day) / 365.25)
    diurnal = w.diurnal_amp * np.cos(2 * np.pi * (hour - w.warmest_hour) / 24.0)
    eps = rng.normal(scale=w.ar_sd, size=n)
    anomaly = np.empty(n)
    acc = eps[0] / math.sqrt(max(1.0 - w.ar_coef ** 2, 1e-12))
    for i in range(n):
        acc = w.ar_coef * acc + eps[i] if i else acc
        anomaly[i] = acc
    return w.mean + seasonal + diurnal + anomaly


def _in_window(hour: int, window: tuple) -> bool:
    lo, hi = window
    return lo <= hour < hi if lo <= hi else (hour >= lo or hour < hi)


def schedule_inputs(schedule: ScheduleParams, params: BuildingParams, timestamps, cfg: SimConfig):
    """Hourly set-point (°C), ventilation conductance (W/K), internal gains (W),
    plus the local (hour, weekend, summer) tuples used for tap water."""
    n = len(timestamps)
    T_r = np.full(n, params.T_r)
    H_v = np.full(n, schedule.H_v)
    Q_int = np.empty(n)
    calendar = []
    for i, ts in enumerate(timestamps):
        cov = calendar_covariates(ts, cfg.holidays, cfg.tz)
        hour, weekend = int(cov.t_d), bool(cov.wk)
        calendar.append((hour, weekend, bool(cov.s)))
        if schedule.pattern == "night-setback" and _in_window(hour, schedule.setback_hours):
            T_r[i] -= schedule.setback_K
        elif schedule.pattern in ("timeclock-5d", "timeclock-7d"):
            running = _in_window(hour, schedule.vent_hours)
            if schedule.pattern == "timeclock-5d" and weekend:
                running = False
            if not running:
                H_v[i] *= schedule.vent_off_fraction
        home = weekend or not (8 <= hour < 16)
        Q_int[i] = schedule.Q_int_base + (schedule.Q_int_occupied if home else 0.0)
    return T_r, H_v, Q_int, calendar


def tap_water(schedule: ScheduleParams, ts: datetime, rng: np.random.Generator,
              holidays: Iterable[date] = (), tz: str = "UTC") -> float:
    """One hourly domestic hot water draw in kW (non-negative)."""
    cov = calendar_covariates(ts, frozenset(holidays), tz)
    return _tap_draw(schedule.tap_water, int(cov.t_d), bool(cov.wk), bool(cov.s), rng)


def _tap_draw(profile: TapWaterProfile, hour: int, weekend: bool, summer: bool, rng) -> float:
    mean = profile.intensity(hour, weekend, summer)
    if profile.noise_scale == 0 or mean == 0:
        return mean
    sd = profile.noise_scale
    return mean * math.exp(sd * rng.standard_normal() - 0.5 * sd * sd)


# --------------------------------------------------------------------------
# integration

@numba.njit(cache=True)
def _integrate(T_o, T_r, H_v, Q_int, C_th, kA, K_p, K_i, K_d, Q_max, dt, steps, T_b0, record):
    n = T_o.shape[0]
    out = np.zeros((n, 4))  # hourly means of Q_sh, Q_v, T_b, and end-of-hour T_b
    m = n * steps if record else 0
    sub = np.zeros((m, 5))  # T_b before, Q_sh, Q_v, Q_int, Q_out per substep
    T_b = T_b0
    u = 0.0
    e1 = T_r[0] - T_b
    e2 = e1
    k = 0
    for h in range(n):
        acc_q = 0.0
        acc_v = 0.0
        acc_t = 0.0
        for _ in range(steps):
            e = T_r[h] - T_b
            u = u + K_p * (e - e1) + K_i * dt * e + K_d * (e - 2.0 * e1 + e2) / dt
            if u < 0.0:
                u = 0.0
            elif u > Q_max:
                u = Q_max
            e2 = e1
            e1 = e
            q_v = -H_v[h] * (T_b - T_o[h])
            q_out = kA * (T_b - T_o[h])
            if record:
                sub[k, 0] = T_b
                sub[k, 1] = u
                sub[k, 2] = q_v
                sub[k, 3] = Q_int[h]
                sub[k, 4] = q_out
                k += 1
            acc_q += u
            acc_v += q_v
            acc_t += T_b
            T_b = T_b + dt / C_th * (u + q_v + Q_int[h] - q_out)
            if not abs(T_b) < 1e3:
                out[h, 3] = np.nan
                return out, sub
        out[h, 0] = acc_q / steps
        out[h, 1] = acc_v / steps
        out[h, 2] = acc_t / steps
        out[h, 3] = T_b
    return out, sub


def integrate(params: BuildingParams, T_o, T_r, H_v, Q_int, substep: float, T_b0: float,
              record_substeps: bool = False):
    """Integrate hourly zero-order-hold inputs. Returns hourly means
    ``(Q_sh, Q_v, T_b)`` in W/°C and, if requested, the substep trace with
    columns ``T_b, Q_sh, Q_v, Q_int, Q_out``."""
    steps = int(3600 // substep)
    arrays = [np.ascontiguousarray(a, dtype=np.float64) for a in (T_o, T_r, H_v, Q_int)]
    out, sub = _integrate(*arrays, float(params.C_th), float(params.kA), float(params.K_p),
                          float(params.K_i), float(params.K_d), float(params.Q_max),
                          float(substep), steps, float(T_b0), bool(record_substeps))
    if np.isnan(out[:, 3]).any():
        raise SimulationError(
            f"building temperature diverged; try a smaller substep than {substep} s")
    result = (out[:, 0], out[:, 1], out[:, 2])
    return (result, sub) if record_substeps else result


def simulate(params: BuildingParams = BuildingParams(), schedule: ScheduleParams = ScheduleParams(),
             cfg: SimConfig = SimConfig(), consumer_id: str = "sim-0",
             T_o: np.ndarray | None = None, rng: np.random.Generator | None = None) -> SimResult:
    """Simulate one consumer.

    ``T_o`` may supply the hourly outdoor temperature for warm-up plus
    duration (used to share weather across a portfolio); otherwise it is
    drawn from ``cfg.weather``. The metered load is ``Q_sh + Q_tw`` in kW,
    rounded to multiples of ``cfg.dead_band`` when that is positive.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    total = cfg.warmup + cfg.duration
    if T_o is None:
        T_o = weather(cfg, rng)
    T_o = np.asarray(T_o, dtype=float)
    if T_o.shape != (total,):
        raise ConfigError(f"outdoor temperature must cover {total} hours")
    first = cfg.start - cfg.warmup * HOUR
    stamps = [first + i * HOUR for i in range(total)]
    T_r, H_v, Q_int, calendar = schedule_inputs(schedule, params, stamps, cfg)
    T_b0 = params.T_r if cfg.T_b0 is None else cfg.T_b0
    Q_sh, Q_v, T_b = integrate(params, T_o, T_r, H_v, Q_int, cfg.substep, T_b0)
    tw = schedule.tap_water
    Q_tw = np.array([_tap_draw(tw, h, wk, s, rng) for h, wk, s in calendar])

    keep = slice(cfg.warmup, total)
    load = Q_sh[keep] / 1e3 + Q_tw[keep]
    if cfg.dead_band > 0:
        load = np.round(load / cfg.dead_band) * cfg.dead_band
    dataset = ConsumerDataset(
        consumer_id,
        HourlySeries.from_values(cfg.start, load, "kW"),
        HourlySeries.from_values(cfg.start, T_o[keep], "°C"),
        cfg.holidays, cfg.tz,
    )
    truth = {
        "Q_sh": Q_sh[keep] / 1e3, "Q_v": Q_v[keep] / 1e3, "Q_int": Q_int[keep] / 1e3,
        "Q_tw": Q_tw[keep], "T_b": T_b[keep], "T_r": T_r[keep], "T_o": T_o[keep],
    }
    return SimResult(dataset, truth, params, schedule)


def multi_dwelling(scale: float = 16.0, pattern: str = "night-setback") -> tuple[BuildingParams, ScheduleParams]:
    """A larger, well-damped apartment block (a few hundred kW peak).

    The default PID gains are tuned for regulation, not for fast setback
    recovery; this preset raises them so that scheduled setbacks produce
    short recovery peaks rather than day-long oscillations.
    """
    params = replace(BuildingParams(), K_p=20000.0, K_i=2.0).scaled(scale)
    sched = ScheduleParams(pattern=pattern, setback_K=1.0, Q_int_base=2500.0, Q_int_occupied=1500.0)
    return params, sched.scaled(scale)


def generate_portfolio(n: int, ranges: dict | None = None, seed: int = 0,
                       cfg: SimConfig = SimConfig(),
                       base: BuildingParams = BuildingParams(),
                       schedule: ScheduleParams = ScheduleParams()) -> list[SimResult]:
    """``n`` consumers sharing one weather realisation.

    ``ranges`` maps ``"scale"`` and any :class:`BuildingParams` field to a
    ``(low, high)`` interval sampled uniformly; ``"patterns"`` lists the
    ventilation patterns to draw from. Scale multiplies the building size
    (and its schedule loads) keeping the dynamics.
    """
    if n < 1:
        raise ConfigError("portfolio needs at least one consumer")
    ranges = dict(ranges or {"scale": (0.5, 4.0)})
    patterns = tuple(ranges.pop("patterns", PATTERNS))
    if not patterns:
        raise ConfigError("empty pattern list")
    for key, bounds in ranges.items():
        if key != "scale" and key not in BuildingParams.__dataclass_fields__:
            raise ConfigError(f"unknown parameter range {key!r}")
        lo, hi = bounds
        if not lo <= hi:
            raise ConfigError(f"empty range for {key!r}: {bounds}")
    root = np.random.SeedSequence(seed)
    weather_seq, *consumer_seqs = root.spawn(n + 1)
    T_o = weather(cfg, np.random.default_rng(weather_seq))
    out = []
    for i, seq in enumerate(consumer_seqs):
        rng = np.random.default_rng(seq)
        draws = {k: rng.uniform(*ranges[k]) for k in sorted(ranges)}
        scale = draws.pop("scale", 1.0)
        params = replace(base.scaled(scale), **draws)
        sched = replace(schedule.scaled(scale), pattern=patterns[rng.integers(len(patterns))])
        out.append(simulate(params, sched, cfg, consumer_id=f"consumer-{i:03d}", T_o=T_o, rng=rng))
    return out


def to_jsonable(obj):
    """Plain-data view of the parameter dataclasses (for manifests)."""
    if hasattr(obj, "__dataclass_fields__"):
        return {k: to_jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list, frozenset, set)):
        return [to_jsonable(v) for v in (sorted(obj) if isinstance(obj, (set, frozenset)) else obj)]
    if isinstance(obj, (datetime, date)):
        return obj.isoformat()
    return obj
