"""Probabilistic focalization: passive ranging of an acoustic source from one moving receiver."""

from .assoc import ClutterModel, DetectionModel, NoiseModel, TdoaScan
from .config import ConfigError, RunConfig, load_config
from .datafiles import DataError, ingest_scans
from .experiment import RunMetrics, emit_plotdata, run_experiment
from .filter import FilterConfig, Models, MotionModel, ParticleFilter, Prior
from .geometry import PAIRS, Environment, PathKind, ReceiverState, SourceState, predict_tdoa

__version__ = "0.1.0"
