"""Federated learning with weight-shared Neural-ODE style networks."""

from .models import ModelConfig, build_model, count_parameters, depth_to_iterations, forward
from .paramset import ParameterSet
from .tensor import Tensor, backward

__version__ = "0.1.0"
