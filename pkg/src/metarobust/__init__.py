"""Robustness-regularized meta-learning toolkit.

A meta-model is trained so that after a few gradient steps of task-specific
fine-tuning it is both accurate and resistant to bounded input perturbations.
Everything runs on a small reverse-mode autodiff core (exact higher-order
gradients, float64) with numpy as the only numeric dependency.
"""

from . import autodiff
from .attacks import AttackConfig, pgd_attack, fgsm_attack, run_attack
from .contrastive import TransformConfig, contrastive_loss, make_views
from .evaluation import EvalReport, IAMResult, ra_sweep, invert_neuron
from .metalearn import MetaConfig, inner_finetune, meta_objective, meta_step, train, meta_test
from .models import ArchSpec, MetaModel, init_model, save_model, load_model
from .regularizers import RobustSpec, INFINITY, regularizer, robust_objective
from .tasks import Episode, DatasetSource, synth_dataset, sample_episode, class_split

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "AttackConfig", "pgd_attack", "fgsm_attack", "run_attack",
    "TransformConfig", "contrastive_loss", "make_views",
    "EvalReport", "IAMResult", "ra_sweep", "invert_neuron",
    "MetaConfig", "inner_finetune", "meta_objective", "meta_step", "train", "meta_test",
    "ArchSpec", "MetaModel", "init_model", "save_model", "load_model",
    "RobustSpec", "INFINITY", "regularizer", "robust_objective",
    "Episode", "DatasetSource", "synth_dataset", "sample_episode", "class_split",
    "__version__",
]
