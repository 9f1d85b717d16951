"""Super-fitting defense lab: numpy autodiff, MUCS training and CE-based attacks."""

from .attacks import AdversarialBatch, AttackConfig, run_attack
from .autodiff import Tensor, backward, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .estimators import AdversarialAttack, SuperFitClassifier
from .data import DatasetSplit, load_cifar10, load_idx, make_blobs
from .evaluation import EvalReport, evaluate, logits_stats
from .losses import ce_grad_logits, ce_loss, combined_loss, is_gradient_vanished, mucs_loss
from .models import Model, build_middlecnn, build_tinymlp
from .training import TrainConfig, TrainLog, superfit_fraction, train, train_distill

__version__ = "0.1.0"

__all__ = [
    "AdversarialAttack", "AdversarialBatch", "AttackConfig", "SuperFitClassifier", "DatasetSplit", "EvalReport", "Model", "Tensor",
    "TrainConfig", "TrainLog", "backward", "build_middlecnn", "build_tinymlp", "ce_grad_logits",
    "ce_loss", "combined_loss", "evaluate", "is_gradient_vanished", "load_checkpoint",
    "load_cifar10", "load_idx", "logits_stats", "make_blobs", "mucs_loss", "no_grad",
    "run_attack", "save_checkpoint", "superfit_fraction", "train", "train_distill",
]
