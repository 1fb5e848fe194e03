"""Gaussian-process Bayesian optimization over mixed hyperparameter spaces."""
from .acquisition import AcquisitionConfig, acquisition, improvement_scores, propose
from .gp import GPState, Theta, gp_fit, gp_predict
from .lbfgs import minimize as lbfgs_minimize
from .loop import Ledger, TrialOutcome, TrialRecord, bo_loop, random_search
from .space import Categorical, Integer, ParamSpace, Real, model_space, to_hyperparams

__all__ = [
    "AcquisitionConfig", "acquisition", "improvement_scores", "propose",
    "GPState", "Theta", "gp_fit", "gp_predict", "lbfgs_minimize",
    "Ledger", "TrialOutcome", "TrialRecord", "bo_loop", "random_search",
    "Categorical", "Integer", "ParamSpace", "Real", "model_space", "to_hyperparams",
]
