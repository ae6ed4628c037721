"""Availability-poisoning attacks, defenses and a desk-scale evaluation harness."""

from .attacks import AttackConfig, generate
from .datasets import LabeledDataset, PerturbationSet, PoisonedDataset, apply_poison, gen_synthetic, load_cifar10
from .defenses import DefenseConfig
from .harness import ExperimentRecord, TrainConfig, emit_report, evaluate, run_experiment, sweep, train_model
from .numerics import CnnModel, init_model

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "CnnModel", "DefenseConfig", "ExperimentRecord", "LabeledDataset", "PerturbationSet",
    "PoisonedDataset", "TrainConfig", "apply_poison", "emit_report", "evaluate", "gen_synthetic", "generate",
    "init_model", "load_cifar10", "run_experiment", "sweep", "train_model",
]
