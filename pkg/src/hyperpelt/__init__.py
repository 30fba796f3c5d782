"""Hypernetwork-generated prefixes and parallel adapters for a frozen encoder-decoder.

A small reverse-mode autodiff core (:mod:`hyperpelt.tensor`) carries a
miniature T5-style backbone (:mod:`hyperpelt.backbone`).  A shared
hypernetwork, fed task / layer / block embeddings and optionally image
features, writes attention prefixes and adapter weights into it
(:mod:`hyperpelt.model`).  Training, few-shot transfer, parameter accounting
and the command line live in :mod:`hyperpelt.trainer`,
:mod:`hyperpelt.budget` and :mod:`hyperpelt.cli`.
"""

from .config import C1, T5_BASE, ModelConfig, load_config, parse_config_text
from .errors import (ContractError, DeterminismError, DimensionError, FormatError, NumericError,
                     TemplateError, UnknownNameError, VersionError)
from .model import Batch, HyperPELT, freeze_mask
from .tensor import Tensor, backward, no_grad
from .trainer import (Trainer, TrainPlan, evaluate, evaluate_all, fewshot_init, fewshot_tune,
                      sample_task, task_probabilities, training_step)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .budget import closed_form_count, compare_methods, corrected_count, introspect_count
from .gradcheck import grad_check
from .tasks import desk_vocab, make_corpus, make_synthetic_suite

__all__ = [
    "C1", "T5_BASE", "ModelConfig", "load_config", "parse_config_text",
    "ContractError", "DeterminismError", "DimensionError", "FormatError", "NumericError",
    "TemplateError", "UnknownNameError", "VersionError",
    "Batch", "HyperPELT", "freeze_mask", "Tensor", "backward", "no_grad",
    "Trainer", "TrainPlan", "evaluate", "evaluate_all", "fewshot_init", "fewshot_tune",
    "sample_task", "task_probabilities", "training_step",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "closed_form_count", "compare_methods", "corrected_count", "introspect_count", "grad_check",
    "desk_vocab", "make_corpus", "make_synthetic_suite",
]

__version__ = "0.1.0"
