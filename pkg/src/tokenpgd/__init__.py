"""Gradient-driven discrete token-substitution attacks."""

__version__ = "0.1.0"

from .attack import (AttackConfig, AttackResult, greedy_attack, oracle_attack, pgd_attack,
                     run_attack)
from .core import (CandidateSet, DiscretePerturbation, RelaxedState, TokenSequence, Vocabulary,
                   apply_perturbation, mixture_embedding)
from .objective import ObjectiveConfig, cw_loss, estimate_gradient, fluency_reg
from .projection import project_c1, project_c2, project_oracle
from .sampling import SamplerConfig, enforce_topk, sample_replacements, sample_sites
from .training import TrainConfig, adv_train
from .victim import (LinearBagModel, MlpModel, TableFluencyScorer, grad_check, load_model,
                     save_model)

__all__ = [
    "AttackConfig", "AttackResult", "CandidateSet", "DiscretePerturbation", "LinearBagModel",
    "MlpModel", "ObjectiveConfig", "RelaxedState", "SamplerConfig", "TableFluencyScorer",
    "TokenSequence", "TrainConfig", "Vocabulary", "adv_train", "apply_perturbation", "cw_loss",
    "enforce_topk", "estimate_gradient", "fluency_reg", "grad_check", "greedy_attack",
    "load_model", "mixture_embedding", "oracle_attack", "pgd_attack", "project_c1", "project_c2",
    "project_oracle", "run_attack", "sample_replacements", "sample_sites", "save_model",
]
