"""Hourly heat-load forecasting for district-heating consumers.

A nominal model driven by lagged outdoor temperature is combined with a
sparse latent residual model over calendar covariates; both are estimated
jointly, and recursively, by expectation maximisation.
"""
from .errors import ConfigError, DataError, InsufficientHistoryError, LavaError, NumericError, SimulationError
from .estimator import EmOptions, ModelState, SufficientStats, em_fit, recursive_update
from .features import LatentConfig, NominalConfig, build_design
from .forecaster import Forecast, ModelConfig, aggregate, predict, predict_horizon, train, walk_forward
from .timeseries import ConsumerDataset, HourlySeries, ingest_csv

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "InsufficientHistoryError", "LavaError", "NumericError", "SimulationError",
    "EmOptions", "ModelState", "SufficientStats", "em_fit", "recursive_update",
    "LatentConfig", "NominalConfig", "build_design",
    "Forecast", "ModelConfig", "aggregate", "predict", "predict_horizon", "train", "walk_forward",
    "ConsumerDataset", "HourlySeries", "ingest_csv",
]
