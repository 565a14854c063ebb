"""Selective state-space source-free domain adaptation, desk scale."""

from .data import Dataset, DomainSpec, generate_domain, load_dataset, make_benchmark_pair, save_dataset
from .labeling import FeatureBank, PseudoLabelTable, generate_pseudo_labels
from .model import Checkpoint, Model, ModelConfig, load_checkpoint, model_from_checkpoint, save_checkpoint
from .pipeline import RunConfig, adapt_target, evaluate, train_source
from .tensor import GradTape, Tensor, backward, finite_difference, tape_scope

__all__ = [
    "Checkpoint", "Dataset", "DomainSpec", "FeatureBank", "GradTape", "Model",
    "ModelConfig", "PseudoLabelTable", "RunConfig", "Tensor", "adapt_target",
    "backward", "evaluate", "finite_difference", "generate_domain",
    "generate_pseudo_labels", "load_checkpoint", "load_dataset",
    "make_benchmark_pair", "model_from_checkpoint", "save_checkpoint",
    "save_dataset", "tape_scope", "train_source",
]
