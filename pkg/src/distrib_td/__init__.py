"""Linear categorical TD learning in the CDF parametrization, with diagnostics."""

from .categorical_measures import CategoricalGrid, GeneralMeasure, SignedCategoricalMeasure
from .fixed_point_solver import ThetaParam, assemble_system, solve_theta_star
from .learners import LearnerConfig, run
from .mdp_model import FeatureMap, MrpModel, make_experiment_mdp

__all__ = [
    "CategoricalGrid",
    "FeatureMap",
    "GeneralMeasure",
    "LearnerConfig",
    "MrpModel",
    "SignedCategoricalMeasure",
    "ThetaParam",
    "assemble_system",
    "make_experiment_mdp",
    "run",
    "solve_theta_star",
]

__version__ = "0.1.0"
