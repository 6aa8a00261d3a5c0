"""Federated unlearning from lossy-compressed gradient histories."""

from ._kernels import BACKEND
from .codec import CodecConfig, MeduSink, RawSink, decode_history
from .config import ExperimentConfig, load_config, parse_config
from .errors import ConfigError, DecodeError, EmptyClientError, MeduError, StoreFormatError
from .fl import FLConfig, LRSchedule, run_fl, run_retrain
from .lattice import lattice_from_code
from .model import ModelSpec
from .store import HistoryStore, storage_bits, storage_bound, storage_fu
from .unlearn import model_l2_distance, unlearn_full, unlearn_medu

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CodecConfig", "ConfigError", "DecodeError", "EmptyClientError", "ExperimentConfig", "FLConfig",
    "HistoryStore", "LRSchedule", "MeduError", "MeduSink", "ModelSpec", "RawSink", "StoreFormatError",
    "decode_history", "lattice_from_code", "load_config", "model_l2_distance", "parse_config", "run_fl",
    "run_retrain", "storage_bits", "storage_bound", "storage_fu", "unlearn_full", "unlearn_medu",
]
