"""Asynchronous-noise-schedule flow matching for temporal point processes."""

from .data import Dataset, Event, EventSequence, HawkesParams, TauScaler
from .dit import DitConfig
from .forecast import ForecastTask, predict_horizon, predict_next
from .metrics import OtdConfig, error_rate, otd, rmse
from .schedule import NoiseSchedule, make_schedule
from .training import TrainConfig, load_checkpoint, save_checkpoint
from .vae import VaeConfig, VaeTrainConfig

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Event",
    "EventSequence",
    "HawkesParams",
    "TauScaler",
    "DitConfig",
    "ForecastTask",
    "predict_horizon",
    "predict_next",
    "OtdConfig",
    "error_rate",
    "otd",
    "rmse",
    "NoiseSchedule",
    "make_schedule",
    "TrainConfig",
    "load_checkpoint",
    "save_checkpoint",
    "VaeConfig",
    "VaeTrainConfig",
    "__version__",
]
