"""Discriminator-guided unsupervised domain adaptation for sleep-stage scoring."""

from .core import Hypnogram, Recording, RngStream, Stage, StageProbs, ValidationError
from .dsp import DistortionSpec, distort, preprocess
from .estimators import DiscriminatorGuidedAdapter, Distorter, Preprocessor, SleepScorer, SupervisedBenchmark
from .evaluation import chance_kappa, classification_report, cohen_kappa, permutation_test
from .models import DiscriminatorConfig, ScorerConfig, ScorerModel
from .synthdata import SleepHmm, generate_dataset
from .trainer import AdaptedModel, PretrainConfig, TrainerConfig, adapt, pretrain, train_supervised_benchmark

__all__ = [
    "adapt",
    "AdaptedModel",
    "chance_kappa",
    "classification_report",
    "cohen_kappa",
    "DiscriminatorConfig",
    "DiscriminatorGuidedAdapter",
    "distort",
    "Distorter",
    "DistortionSpec",
    "generate_dataset",
    "Hypnogram",
    "permutation_test",
    "preprocess",
    "Preprocessor",
    "pretrain",
    "PretrainConfig",
    "Recording",
    "RngStream",
    "ScorerConfig",
    "ScorerModel",
    "SleepHmm",
    "SleepScorer",
    "Stage",
    "StageProbs",
    "SupervisedBenchmark",
    "train_supervised_benchmark",
    "TrainerConfig",
    "ValidationError",
]

__version__ = "0.1.0"
