"""Latent dynamics models for irregularly sampled time series.

An implicit backbone (neural ODE/CDE/SDE integrated over a spline control
path) summarizes the observed series; an explicit invertible flow decodes
the summary at arbitrary query times.  Training runs on a small
reverse-mode tape whose dense kernels come from a compiled extension when
available (`dualdyn.kernels.BACKEND` says which one is active).
"""

from dualdyn.config import ExperimentConfig, config_from_dict, parse_config
from dualdyn.experiment import run_ablation_suite, run_experiment
from dualdyn.kernels import BACKEND
from dualdyn.model import DualModel
from dualdyn.verification import run_verification_suite

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DualModel",
    "ExperimentConfig",
    "config_from_dict",
    "parse_config",
    "run_ablation_suite",
    "run_experiment",
    "run_verification_suite",
    "__version__",
]
