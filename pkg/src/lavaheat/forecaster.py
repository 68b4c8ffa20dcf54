"""Point forecasts with variance, walk-forward evaluation and portfolio sums."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Sequence

import numpy as np

from . import metrics
from .errors import ConfigError, DataError
from .estimator import EmOptions, ModelState, SufficientStats, em_fit, recursive_update
from .features import Design, LatentConfig, NominalConfig, build_design
from .timeseries import HOUR, ConsumerDataset, to_utc


@dataclass(frozen=True)
class ModelConfig:
    nominal: NominalConfig = field(default_factory=NominalConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    em: EmOptions = field(default_factory=EmOptions)
    lam: float = 1.0
    clamp: bool = False

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError(f"forgetting factor must lie in (0, 1], got {self.lam}")


@dataclass(frozen=True)
class Forecast:
    issue_time: datetime | None
    horizon: int
    y_hat: float
    y_nom: float
    y_res: float
    variance: float
    sigma2: float  # noise-only part of the variance

    @property
    def target_time(self) -> datetime | None:
        return None if self.issue_time is None else self.issue_time + self.horizon * HOUR


def predict(state: ModelState, phi, gamma, issue_time: datetime | None = None, horizon: int = 0) -> Forecast:
    """``y_hat = theta @ phi + z_hat @ gamma`` with posterior-predictive
    variance ``sigma2 + gamma @ P @ gamma``."""
    phi = np.asarray(phi, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if phi.shape != (state.p,) or gamma.shape != (state.K,):
        raise DataError(f"regressor sizes {phi.shape}, {gamma.shape} do not match the model "
                        f"({state.p}, {state.K})")
    y_nom = float(state.theta @ phi)
    y_res = float(state.z_hat @ gamma) if state.K else 0.0
    var = state.sigma2 + (float(gamma @ state.P @ gamma) if state.K else 0.0)
    return Forecast(issue_time, horizon, y_nom + y_res, y_nom, y_res, max(var, 0.0), state.sigma2)


def _index(design_start: datetime, ts: datetime) -> int:
    offset = (to_utc(ts) - design_start) / HOUR
    if offset != int(offset):
        raise DataError(f"{ts} is not on the hourly grid")
    return int(offset)


def predict_horizon(state: ModelState, dataset: ConsumerDataset, issue_time: datetime, H: int = 24,
                    cfg: ModelConfig = ModelConfig(), design: Design | None = None) -> list[Forecast]:
    """Forecasts for ``issue_time + 1 .. issue_time + H``.

    The nominal lags use the actual outdoor temperature up to each target
    hour; calendar covariates come from the target timestamps.
    """
    if H < 1:
        raise DataError("horizon must be at least one hour")
    design = design if design is not None else build_design(dataset, cfg.nominal, cfg.latent)
    i0 = _index(dataset.start, issue_time)
    if i0 < 0 or i0 + H >= len(dataset):
        raise DataError(f"temperature not available through {issue_time} + {H} h")
    out = []
    for h in range(1, H + 1):
        row = i0 + h
        if np.isnan(design.phi[row, 0]):
            raise DataError(f"missing temperature for the lag window of "
                            f"{dataset.start + row * HOUR}")
        out.append(predict(state, design.phi[row], design.gamma[row], to_utc(issue_time), h))
    return out


# --------------------------------------------------------------------------
# training and walk-forward evaluation

def train(design: Design, stop: int, cfg: ModelConfig = ModelConfig(), start: int = 0) -> ModelState:
    """Batch fit on rows ``start <= i < stop`` that have a complete regressor and load."""
    rows = np.arange(start, stop)
    rows = rows[design.usable[rows]]
    if rows.size == 0:
        raise DataError("no usable training samples")
    stats = SufficientStats.from_batch(design.phi[rows], design.gamma[rows], design.y[rows], cfg.lam)
    return em_fit(stats, cfg.em)


@dataclass
class WalkForwardResult:
    timestamps: list
    actual: np.ndarray
    y_hat: np.ndarray
    y_nom: np.ndarray
    y_res: np.ndarray
    variance: np.ndarray
    sigma2: np.ndarray
    baseline: np.ndarray
    report: metrics.EvalReport
    state: ModelState
    scored: np.ndarray = None

    def rows(self):
        for i, ts in enumerate(self.timestamps):
            yield ts, self.actual[i], self.y_hat[i], self.y_nom[i], self.y_res[i], self.variance[i]


def walk_forward(dataset: ConsumerDataset, split: datetime, H: int = 24, cfg: ModelConfig = ModelConfig(),
                 design: Design | None = None, state: ModelState | None = None) -> WalkForwardResult:
    """Train on everything before ``split``, then move forward hour by hour.

    At every issue hour ``s`` (starting with the last training hour) the
    ``H``-ahead forecast of ``s + H`` is recorded, after which the model is
    updated with the actual load of ``s + 1``. A forecast therefore only uses
    loads up to its issue hour; the temperature path ahead is taken as known.
    Targets with an observed load are scored, together with the seasonal
    naive forecast ``y(t - 168)``.
    """
    if H < 1:
        raise DataError("horizon must be at least one hour")
    design = design if design is not None else build_design(dataset, cfg.nominal, cfg.latent)
    n = len(dataset)
    i0 = _index(dataset.start, split)
    if not 0 < i0 < n - H:
        raise DataError("split must leave training data and at least one horizon of validation data")
    if state is None:
        state = train(design, i0, cfg)
    else:
        state = state.copy()

    first_target = i0 - 1 + H
    m = n - first_target
    y_hat, y_nom, y_res, var, s2 = (np.full(m, np.nan) for _ in range(5))
    usable, phi, gamma, y = design.usable, design.phi, design.gamma, design.y
    for s in range(i0 - 1, n - H):
        if s >= i0 and usable[s]:
            recursive_update(state, phi[s], gamma[s], y[s], cfg.em)
        t = s + H
        if not np.isnan(phi[t, 0]):
            f = predict(state, phi[t], gamma[t])
            k = t - first_target
            y_hat[k], y_nom[k], y_res[k], var[k], s2[k] = f.y_hat, f.y_nom, f.y_res, f.variance, f.sigma2
    if cfg.clamp:
        y_hat = np.maximum(y_hat, 0.0)

    actual = np.where(design.y_observed[first_target:], design.y[first_target:], np.nan)
    targets = np.arange(first_target, n)
    baseline = np.where(targets >= 168, design.y[np.maximum(targets - 168, 0)], np.nan)
    scored = ~np.isnan(actual) & ~np.isnan(y_hat)
    if not scored.any():
        raise DataError("no validation hour could be scored")
    both = scored & ~np.isnan(baseline)
    report = metrics.EvalReport(
        rrmse=metrics.rrmse(actual[scored], y_hat[scored]),
        mae=metrics.mae(actual[scored], y_hat[scored]),
        coverage95=metrics.coverage(actual[scored], y_hat[scored], var[scored]),
        coverage95_sigma_only=metrics.coverage(actual[scored], y_hat[scored], s2[scored]),
        n_scored=int(scored.sum()),
        nonzero_params=state.nonzero_params,
        baseline_rrmse=metrics.rrmse(actual[both], baseline[both]) if both.any() else float("nan"),
        horizon=H,
    )
    stamps = [dataset.start + t * HOUR for t in targets]
    return WalkForwardResult(stamps, actual, y_hat, y_nom, y_res, var, s2, baseline, report, state, scored)


# --------------------------------------------------------------------------
# aggregation

@dataclass(frozen=True)
class PortfolioForecast:
    forecasts: tuple
    y_tot: float
    variance_tot: float
    sigma2_tot: float = 0.0


def aggregate(forecasts: Sequence[Forecast]) -> PortfolioForecast:
    """Sum means and variances of independent consumers."""
    forecasts = tuple(forecasts)
    if forecasts:
        keys = {(f.issue_time, f.horizon) for f in forecasts}
        if len(keys) != 1:
            raise DataError("forecasts to aggregate must share issue time and horizon")
    return PortfolioForecast(
        forecasts,
        math.fsum(f.y_hat for f in forecasts),
        math.fsum(f.variance for f in forecasts),
        math.fsum(f.sigma2 for f in forecasts),
    )


def aggregate_tables(tables: Sequence[dict]) -> dict:
    """Sum per-consumer forecast columns over a shared timeline.

    Each table maps ``timestamp`` to a list of times and ``y_hat`` /
    ``variance`` to arrays. Sums are exactly rounded (``math.fsum``).
    """
    if not tables:
        raise DataError("empty portfolio")
    stamps = list(tables[0]["timestamp"])
    for tab in tables[1:]:
        if list(tab["timestamp"]) != stamps:
            raise DataError("consumer timelines differ")
    cols = {}
    for key in ("y_hat", "variance"):
        stacked = np.array([np.asarray(t[key], dtype=float) for t in tables])
        cols[key] = np.array([math.fsum(stacked[:, i]) for i in range(len(stamps))])
    return {"timestamp": stamps, "y_tot": cols["y_hat"], "variance_tot": cols["variance"]}
