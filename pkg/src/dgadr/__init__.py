"""dgadr: desk-scale domain-generalization experiments.

DomAlign and focal losses on a numpy MLP, domain-stratified training,
leave-one-domain-out evaluation and domain-shift analysis.
"""

from dgadr.__about__ import __version__
from dgadr.config import ExperimentConfig, LossConfig, SynthConfig, TrainConfig
from dgadr.data import Dataset, Minibatch, generate_synthetic, load_dataset
from dgadr.exceptions import DgadrError
from dgadr.model import Model, init_model
from dgadr.trainer import evaluate, run_loto, train_one

__all__ = [
    "Dataset",
    "DgadrError",
    "ExperimentConfig",
    "LossConfig",
    "Minibatch",
    "Model",
    "SynthConfig",
    "TrainConfig",
    "__version__",
    "evaluate",
    "generate_synthetic",
    "init_model",
    "load_dataset",
    "run_loto",
    "train_one",
]
