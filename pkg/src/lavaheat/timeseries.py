"""Hourly series ingestion, gap handling, alignment and calendar covariates.

Storage is always UTC on a strict one-hour grid. Local civil time only enters
through :func:`calendar_covariates`, which converts with an IANA zone name so
that covariates follow the occupants' clock (including DST).
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .errors import ConfigError, DataError

HOUR = timedelta(hours=1)

UNITS = {"load": "kW", "temperature": "°C"}


class Quality(enum.IntEnum):
    OBSERVED = 0
    INTERPOLATED = 1
    MISSING = 2


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def to_utc(ts: datetime) -> datetime:
    """Normalize a timestamp to aware UTC; naive input is taken as UTC."""
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    return to_utc(datetime.fromisoformat(text))


def format_timestamp(ts: datetime) -> str:
    return to_utc(ts).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class HourlySeries:
    """Values on a contiguous hourly UTC grid with per-entry quality flags.

    Missing entries carry ``nan`` as value.
    """

    start: datetime
    values: np.ndarray
    quality: np.ndarray
    unit: str

    def __post_init__(self):
        start = to_utc(self.start)
        if start.minute or start.second or start.microsecond:
            raise DataError(f"series start {start} is not top-of-hour")
        values = np.asarray(self.values, dtype=float)
        quality = np.asarray(self.quality, dtype=np.int8)
        if values.ndim != 1 or values.shape != quality.shape:
            raise DataError("values and quality must be 1-D arrays of equal length")
        if self.unit not in UNITS.values():
            raise DataError(f"unknown unit {self.unit!r}")
        missing = quality == Quality.MISSING
        if np.any(~np.isfinite(values[~missing])):
            raise DataError("non-missing entries must be finite")
        values = np.where(missing, np.nan, values)
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "quality", _readonly(quality))

    def __len__(self) -> int:
        return len(self.values)

    @property
    def end(self) -> datetime:
        """Timestamp of the last entry."""
        return self.start + (len(self) - 1) * HOUR

    def timestamps(self) -> list[datetime]:
        return [self.start + i * HOUR for i in range(len(self))]

    def index_of(self, ts: datetime) -> int:
        offset = (to_utc(ts) - self.start) / HOUR
        if offset != int(offset):
            raise DataError(f"{ts} is not on the hourly grid of this series")
        return int(offset)

    @property
    def valid(self) -> np.ndarray:
        """Boolean mask of entries that are not missing."""
        return self.quality != Quality.MISSING

    @property
    def observed(self) -> np.ndarray:
        return self.quality == Quality.OBSERVED

    def reindex(self, start: datetime, length: int) -> "HourlySeries":
        """Return the series on another grid, padding with missing entries."""
        start = to_utc(start)
        offset = self.index_of(start)
        values = np.full(length, np.nan)
        quality = np.full(length, Quality.MISSING, dtype=np.int8)
        lo, hi = max(offset, 0), min(offset + length, len(self))
        if lo < hi:
            values[lo - offset:hi - offset] = self.values[lo:hi]
            quality[lo - offset:hi - offset] = self.quality[lo:hi]
        return HourlySeries(start, values, quality, self.unit)

    @classmethod
    def from_values(cls, start: datetime, values: Sequence[float], unit: str) -> "HourlySeries":
        """Build a series where ``nan`` marks missing entries."""
        values = np.asarray(values, dtype=float)
        quality = np.where(np.isnan(values), Quality.MISSING, Quality.OBSERVED)
        return cls(start, values, quality, unit)


def ingest_csv(path, kind: str, on_conflict: str = "error") -> HourlySeries:
    """Read a ``timestamp,value`` CSV into an :class:`HourlySeries`.

    Rows may come in any order. Repeated timestamps with identical values
    collapse; conflicting repeats raise unless ``on_conflict="last"``.
    Hours absent from the file are marked missing. An optional third column
    ``quality`` (observed/interpolated/missing) is honoured so that
    :func:`export_csv` round-trips exactly.
    """
    if kind not in UNITS:
        raise ConfigError(f"kind must be one of {sorted(UNITS)}, got {kind!r}")
    if on_conflict not in ("error", "last"):
        raise ConfigError("on_conflict must be 'error' or 'last'")
    path = Path(path)
    rows: dict[datetime, tuple[float, int]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header not in (["timestamp", "value"], ["timestamp", "value", "quality"]):
            raise DataError(f"{path}:1: expected header 'timestamp,value', got {','.join(header)!r}")
        has_quality = len(header) == 3
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                ts = parse_timestamp(row[0])
                q = Quality[row[2].strip().upper()] if has_quality else Quality.OBSERVED
                value = float("nan") if q == Quality.MISSING else float(row[1])
            except (ValueError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: cannot parse row {row!r}: {exc}") from None
            if q != Quality.MISSING and not math.isfinite(value):
                raise DataError(f"{path}:{lineno}: non-finite value {row[1]!r}")
            if ts.minute or ts.second or ts.microsecond:
                raise DataError(f"{path}:{lineno}: sub-hourly timestamp {row[0]!r} rejected")
            prev = rows.get(ts)
            if prev is not None and on_conflict == "error":
                same = prev[1] == q and (prev[0] == value or (math.isnan(prev[0]) and math.isnan(value)))
                if not same:
                    raise DataError(
                        f"{path}:{lineno}: conflicting duplicate for {format_timestamp(ts)} "
                        f"({prev[0]!r} vs {value!r})")
            rows[ts] = (value, int(q))
    if not rows:
        raise DataError(f"{path}: no data rows")
    start, stop = min(rows), max(rows)
    n = int((stop - start) / HOUR) + 1
    values = np.full(n, np.nan)
    quality = np.full(n, Quality.MISSING, dtype=np.int8)
    for ts, (v, q) in rows.items():
        i = int((ts - start) / HOUR)
        values[i], quality[i] = v, q
    return HourlySeries(start, values, quality, UNITS[kind])


def export_csv(series: HourlySeries, path) -> None:
    """Write ``series`` so that :func:`ingest_csv` reproduces it bit-exactly.

    A ``quality`` column is added only when some entry is not observed.
    """
    with_quality = not np.all(series.observed)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "value", "quality"] if with_quality else ["timestamp", "value"])
        for ts, v, q in zip(series.timestamps(), series.values, series.quality):
            q = Quality(int(q))
            if with_quality:
                w.writerow([format_timestamp(ts), "" if q == Quality.MISSING else repr(float(v)), q.name.lower()])
            else:
                w.writerow([format_timestamp(ts), repr(float(v))])


def fill_gaps(series: HourlySeries, max_interp_hours: int = 6) -> HourlySeries:
    """Linearly interpolate short runs of missing entries.

    A run is filled when the two valid neighbours that enclose it are at most
    ``max_interp_hours`` apart; longer runs and runs touching either end of the
    series stay missing.
    """
    values = np.array(series.values)
    quality = np.array(series.quality)
    valid = np.flatnonzero(quality != Quality.MISSING)
    for left, right in zip(valid[:-1], valid[1:]):
        if right - left <= 1 or right - left > max_interp_hours:
            continue
        frac = np.arange(1, right - left) / (right - left)
        values[left + 1:right] = values[left] + frac * (values[right] - values[left])
        quality[left + 1:right] = Quality.INTERPOLATED
    return HourlySeries(series.start, values, quality, series.unit)


def align(*series: HourlySeries) -> tuple[HourlySeries, ...]:
    """Put every series on the union timeline, padding with missing entries."""
    if not series:
        return ()
    start = min(s.start for s in series)
    end = max(s.end for s in series)
    n = int((end - start) / HOUR) + 1
    return tuple(s.reindex(start, n) for s in series)


# --------------------------------------------------------------------------
# calendar covariates

@dataclass(frozen=True)
class CalendarCovariates:
    t_d: float  # hour of day, local
    d_w: float  # Monday = 0
    w_y: float  # ISO week, 1..53
    wk: int     # weekend or holiday
    s: int      # May..August

    def periodic(self, name: str) -> float:
        return getattr(self, name)

    def binary(self, name: str) -> int:
        return getattr(self, name)


def calendar_covariates(ts: datetime, holidays: Iterable[date] = (), tz: str = "UTC") -> CalendarCovariates:
    """Calendar covariates of ``ts`` in the local civil time of zone ``tz``."""
    local = to_utc(ts).astimezone(_zone(tz))
    day = local.date()
    week = min(max(day.isocalendar()[1], 1), 53)
    weekday = local.weekday()
    holiday = day in holidays if isinstance(holidays, (set, frozenset)) else day in set(holidays)
    return CalendarCovariates(
        t_d=float(local.hour),
        d_w=float(weekday),
        w_y=float(week),
        wk=int(weekday >= 5 or holiday),
        s=int(5 <= local.month <= 8),
    )


def _zone(name: str):
    if name.upper() == "UTC":
        return timezone.utc
    try:
        return ZoneInfo(name)
    except Exception as exc:  # ZoneInfoNotFoundError, ValueError
        raise ConfigError(f"unknown time zone {name!r}") from exc


def load_holidays(path) -> frozenset[date]:
    """Read a holiday list: one ``YYYY-MM-DD`` per line, ``#`` starts a comment."""
    out = set()
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                out.add(date.fromisoformat(line))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad holiday date {line!r}") from None
    return frozenset(out)


@dataclass(frozen=True)
class ConsumerDataset:
    """Load and outdoor temperature of one consumer on a shared timeline."""

    consumer_id: str
    load: HourlySeries
    temperature: HourlySeries
    holidays: frozenset = field(default_factory=frozenset)
    tz: str = "UTC"

    def __post_init__(self):
        if self.load.unit != "kW" or self.temperature.unit != "°C":
            raise DataError("load must be in kW and temperature in °C")
        if self.load.start != self.temperature.start or len(self.load) != len(self.temperature):
            raise DataError(f"{self.consumer_id}: load and temperature timelines differ; align them first")
        object.__setattr__(self, "holidays", frozenset(self.holidays))

    @classmethod
    def from_series(cls, consumer_id: str, load: HourlySeries, temperature: HourlySeries,
                    holidays: Iterable[date] = (), tz: str = "UTC",
                    max_interp_hours: int | None = 6) -> "ConsumerDataset":
        load, temperature = align(load, temperature)
        if max_interp_hours:
            load = fill_gaps(load, max_interp_hours)
            temperature = fill_gaps(temperature, max_interp_hours)
        return cls(consumer_id, load, temperature, frozenset(holidays), tz)

    def __len__(self) -> int:
        return len(self.load)

    @property
    def start(self) -> datetime:
        return self.load.start

    def timestamps(self) -> list[datetime]:
        return self.load.timestamps()

    def covariates(self) -> list[CalendarCovariates]:
        zone = self.tz
        return [calendar_covariates(ts, self.holidays, zone) for ts in self.timestamps()]
