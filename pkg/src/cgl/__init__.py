"""Collaborative group learning on a shared modular network."""

from .config import RunConfig, load_config
from .data import Dataset, load_csv, load_idx, partition, synth_blobs
from .engine import CollabTrainer, DistillConfig, RampUpSchedule, rampup_phi, select_best_student
from .errors import (CGLError, CheckpointError, ConfigurationError, DataError, IntegrityError, InvariantError,
                     NumericalError, ParseError, UsageError)
from .experiment import build_run, execute
from .routing import ModuleGrid, PathMatrix, SharingConstraint, StudentPool, build_pool

__version__ = "0.1.0"
