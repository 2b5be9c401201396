"""Spline-flow solvers for mean-field control problems."""

from .conditioner import Architecture, init_model_params, param_count
from .flow import (FlowModel, build_model, flow_forward, flow_inverse,
                   load_model, log_density, sample, save_model)

__all__ = [
    "Architecture",
    "FlowModel",
    "build_model",
    "flow_forward",
    "flow_inverse",
    "init_model_params",
    "load_model",
    "log_density",
    "param_count",
    "sample",
    "save_model",
]

__version__ = "0.1.0"
