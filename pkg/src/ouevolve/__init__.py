"""Nonautonomous Ornstein-Uhlenbeck evolution operators in weighted function spaces."""

from .coeffs import CoefficientModel, WeightSpec, builtin, constant_model, model_from_json
from .evolution import EvolutionOperator
from .flow import FlowState, flow, flow_many
from .gaussmeasure import GaussHermite, GaussianMeasure, MonteCarlo, parse_scheme
from .weights import WeightedFunction

__all__ = [
    "CoefficientModel",
    "EvolutionOperator",
    "FlowState",
    "GaussHermite",
    "GaussianMeasure",
    "MonteCarlo",
    "WeightSpec",
    "WeightedFunction",
    "builtin",
    "constant_model",
    "flow",
    "flow_many",
    "model_from_json",
    "parse_scheme",
]
