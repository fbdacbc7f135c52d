"""Open domain generalization with domain-aware prompts, prompt differentials and an unknown-class prompt."""

from .datasets import (UNKNOWN, DomainSample, DomainSuite, OpenSample, SplitSpec, load_suite, make_lodo_splits,
                       synth_toy_suite)
from .encoders import BackendSpec, ClipBackend, EncoderBackend, MockBackend, make_backend, make_mock_backend
from .engine import Checkpoint, TrainConfig, load_checkpoint, predict, save_checkpoint, train
from .errors import (CheckpointError, ConfigurationError, DataError, DivergenceError, ODGError,
                     OpenGenUnavailable)
from .evalkit import (EvalReport, accuracy, frechet_distance, h_score, openness_sweep, run_lodo,
                      xhat_cosine_diagnostic)
from .model import ODGModel
from .objectives import class_posterior, loss_con, loss_sem, total_loss
from .opengen import DiffusionClient, StubGenerator, generate_open_pool, grayscale_entropy

__version__ = "0.1.0"

__all__ = [
    "UNKNOWN", "DomainSample", "DomainSuite", "OpenSample", "SplitSpec", "load_suite", "make_lodo_splits",
    "synth_toy_suite", "BackendSpec", "ClipBackend", "EncoderBackend", "MockBackend", "make_backend",
    "make_mock_backend", "Checkpoint", "TrainConfig", "load_checkpoint", "predict", "save_checkpoint", "train",
    "CheckpointError", "ConfigurationError", "DataError", "DivergenceError", "ODGError", "OpenGenUnavailable",
    "EvalReport", "accuracy", "frechet_distance", "h_score", "openness_sweep", "run_lodo",
    "xhat_cosine_diagnostic", "ODGModel", "class_posterior", "loss_con", "loss_sem", "total_loss",
    "DiffusionClient", "StubGenerator", "generate_open_pool", "grayscale_entropy",
]
