"""Regressors for the nominal (outdoor temperature) and latent (calendar) models.

Nominal regressor::

    phi(t) = [1, dT(t), dT(t-1), ..., dT(t-n_b)],   dT = max(T_c - T_o, 0)

Latent regressor: every periodic calendar input ``u_i`` is expanded into
``M`` cosine/sine pairs ``cos(j*pi*u_i/(2*l_i)), sin(j*pi*u_i/(2*l_i))``, the
binary inputs form ``[1, u, 1-u]`` Kronecker products, the leading constant of
that product is dropped and the result is Kronecker-multiplied with the
periodic block. Entry order is therefore binary-selector major, then periodic
input, then harmonic, cosine before sine.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InsufficientHistoryError
from .timeseries import CalendarCovariates, ConsumerDataset

PERIODS = {"t_d": 24.0, "d_w": 7.0, "w_y": 53.0}
BINARY_INPUTS = ("wk", "s")


@dataclass(frozen=True)
class NominalConfig:
    T_c: float = 17.0
    n_b: int = 24

    def __post_init__(self):
        if int(self.n_b) != self.n_b or self.n_b < 0:
            raise ConfigError(f"n_b must be a non-negative integer, got {self.n_b!r}")
        if not math.isfinite(self.T_c):
            raise ConfigError("T_c must be finite")

    @property
    def p(self) -> int:
        return self.n_b + 2


@dataclass(frozen=True)
class LatentConfig:
    M: int = 8
    periodic_inputs: tuple[str, ...] = ("t_d", "d_w", "w_y")
    binary_inputs: tuple[str, ...] = ("wk", "s")
    boundaries: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "periodic_inputs", tuple(self.periodic_inputs))
        object.__setattr__(self, "binary_inputs", tuple(self.binary_inputs))
        object.__setattr__(self, "boundaries", dict(self.boundaries))
        if int(self.M) != self.M or self.M < 1:
            raise ConfigError(f"M must be a positive integer, got {self.M!r}")
        for name in self.periodic_inputs:
            if name not in PERIODS:
                raise ConfigError(f"unknown periodic input {name!r}; choose from {sorted(PERIODS)}")
        for name in self.binary_inputs:
            if name not in BINARY_INPUTS:
                raise ConfigError(f"unknown binary input {name!r}; choose from {list(BINARY_INPUTS)}")
        for seq in (self.periodic_inputs, self.binary_inputs):
            if len(set(seq)) != len(seq):
                raise ConfigError(f"duplicate inputs in {seq}")
        for name, ell in self.boundaries.items():
            if name not in self.periodic_inputs:
                raise ConfigError(f"boundary given for inactive input {name!r}")
            if not ell > 0:
                raise ConfigError(f"boundary for {name!r} must be positive")

    def boundary(self, name: str) -> float:
        """Default boundary is a quarter period, making harmonic j have period P/j."""
        return float(self.boundaries.get(name, PERIODS[name] / 4.0))

    @property
    def n_periodic(self) -> int:
        return 2 * self.M * len(self.periodic_inputs)

    @property
    def n_selectors(self) -> int:
        return 3 ** len(self.binary_inputs) - 1

    @property
    def n_gamma(self) -> int:
        return self.n_periodic * self.n_selectors


# --------------------------------------------------------------------------
# nominal regressor

def delta_t(T_o, T_c: float):
    """Heating-degree driver ``max(T_c - T_o, 0)``; works on scalars and arrays."""
    out = np.maximum(np.subtract(T_c, T_o), 0.0)
    return float(out) if np.ndim(out) == 0 else out


def build_phi(history: Sequence[float], cfg: NominalConfig) -> np.ndarray:
    """Nominal regressor from the last ``n_b + 1`` dT values, oldest first."""
    need = cfg.n_b + 1
    hist = np.asarray(history, dtype=float)
    if hist.size < need or np.any(~np.isfinite(hist[hist.size - need:])):
        raise InsufficientHistoryError(f"need {need} valid dT values, have {hist.size}")
    return np.concatenate(([1.0], hist[::-1][:need]))


def phi_matrix(temperature: np.ndarray, cfg: NominalConfig) -> np.ndarray:
    """Row t is phi(t) from the outdoor temperature series; rows whose lag
    window touches a missing (nan) temperature, or precede a full window, are nan."""
    dT = delta_t(np.asarray(temperature, dtype=float), cfg.T_c)
    n = len(dT)
    out = np.full((n, cfg.p), np.nan)
    out[:, 0] = 1.0
    for lag in range(cfg.n_b + 1):
        out[lag:, lag + 1] = dT[:n - lag]
    bad = np.isnan(out).any(axis=1)
    out[bad] = np.nan
    return out


# --------------------------------------------------------------------------
# latent regressor

def fourier_basis(u: float, j: int, ell: float) -> tuple[float, float]:
    arg = j * math.pi * u / (2.0 * ell)
    return math.cos(arg), math.sin(arg)


def build_gamma_p(cov: CalendarCovariates, cfg: LatentConfig) -> np.ndarray:
    out = []
    for name in cfg.periodic_inputs:
        u, ell = cov.periodic(name), cfg.boundary(name)
        for j in range(1, cfg.M + 1):
            out.extend(fourier_basis(u, j, ell))
    return np.array(out)


def build_gamma_b(*bits: int) -> np.ndarray:
    """Kronecker product of ``[1, u, 1-u]`` over the binary inputs, in order."""
    out = np.ones(1)
    for u in bits:
        if u not in (0, 1):
            raise ValueError(f"binary input must be 0 or 1, got {u!r}")
        out = np.kron(out, [1.0, u, 1.0 - u])
    return out


def build_gamma(cov: CalendarCovariates, cfg: LatentConfig) -> np.ndarray:
    gb = build_gamma_b(*(cov.binary(name) for name in cfg.binary_inputs))
    return np.kron(gb[1:], build_gamma_p(cov, cfg))


def gamma_matrix(covariates: Sequence[CalendarCovariates], cfg: LatentConfig) -> np.ndarray:
    """Stack ``build_gamma`` over many time steps (vectorized)."""
    n = len(covariates)
    gp = np.empty((n, cfg.n_periodic))
    col = 0
    harmonics = np.arange(1, cfg.M + 1)
    for name in cfg.periodic_inputs:
        u = np.array([c.periodic(name) for c in covariates], dtype=float)
        arg = np.outer(u, harmonics) * (math.pi / (2.0 * cfg.boundary(name)))
        block = np.empty((n, 2 * cfg.M))
        block[:, 0::2] = np.cos(arg)
        block[:, 1::2] = np.sin(arg)
        gp[:, col:col + 2 * cfg.M] = block
        col += 2 * cfg.M
    gb = np.ones((n, 1))
    for name in cfg.binary_inputs:
        u = np.array([c.binary(name) for c in covariates], dtype=float)
        factor = np.stack([np.ones(n), u, 1.0 - u], axis=1)
        gb = (gb[:, :, None] * factor[:, None, :]).reshape(n, -1)
    return (gb[:, 1:, None] * gp[:, None, :]).reshape(n, -1)


def gamma_labels(cfg: LatentConfig) -> list[str]:
    """Human readable names for the entries of gamma, in order."""
    sel = [""]
    for name in cfg.binary_inputs:
        sel = [f"{s}{'*' if s else ''}{f}" for s in sel for f in ("1", name, f"(1-{name})")]
    periodic = [f"{fn}({j}*{name})" for name in cfg.periodic_inputs
                for j in range(1, cfg.M + 1) for fn in ("cos", "sin")]
    return [f"{s}|{p}" for s in sel[1:] for p in periodic]


# --------------------------------------------------------------------------
# dataset level

@dataclass(frozen=True)
class Design:
    """Regressor matrices for a whole dataset, one row per hour."""

    phi: np.ndarray        # (n, p); nan rows where the lag window is incomplete
    gamma: np.ndarray      # (n, K)
    y: np.ndarray          # (n,); nan where load is missing
    y_observed: np.ndarray  # bool, load quality is `observed`

    @property
    def usable(self) -> np.ndarray:
        """Rows that may update the model: complete regressor and non-missing load."""
        return ~np.isnan(self.phi[:, 0]) & ~np.isnan(self.y)

    @property
    def predictable(self) -> np.ndarray:
        return ~np.isnan(self.phi[:, 0])


def build_design(dataset: ConsumerDataset, nominal: NominalConfig, latent: LatentConfig) -> Design:
    return Design(
        phi=phi_matrix(dataset.temperature.values, nominal),
        gamma=gamma_matrix(dataset.covariates(), latent),
        y=np.asarray(dataset.load.values, dtype=float),
        y_observed=np.asarray(dataset.load.observed),
    )
