"""Learning unknown ODE dynamics with a neural vector field constrained by a GP.

The main entry points are :class:`MagixODE` (scikit-learn style) and the
lower-level :func:`magix.inference.fit`.
"""
from .benchmarks import ExperimentSpec, EvalReport, generate_dataset, run_experiment
from .dynamics import MlpDynamics, get_system, mlp_forward, mlp_grads, mlp_init
from .estimator import MagixODE
from .gp import GpHyper, build_component_model, fit_empirical_bayes
from .inference import (
    FitResult,
    MagixConfig,
    MagixState,
    NumericalDivergence,
    ObservationSet,
    fit,
    grad_log_posterior,
    log_posterior,
    update_sigma2,
)
from .integrate import DivergenceError, TimeGrid, Trajectory, integrate
from .kernels import MaternParams, bessel_k, kernel, kernel_d1, kernel_d1d2, kernel_d2

__version__ = "0.1.0"

__all__ = [
    "MagixODE",
    "MagixConfig",
    "MagixState",
    "FitResult",
    "ObservationSet",
    "NumericalDivergence",
    "fit",
    "log_posterior",
    "grad_log_posterior",
    "update_sigma2",
    "ExperimentSpec",
    "EvalReport",
    "generate_dataset",
    "run_experiment",
    "MlpDynamics",
    "mlp_init",
    "mlp_forward",
    "mlp_grads",
    "get_system",
    "GpHyper",
    "fit_empirical_bayes",
    "build_component_model",
    "MaternParams",
    "bessel_k",
    "kernel",
    "kernel_d1",
    "kernel_d2",
    "kernel_d1d2",
    "TimeGrid",
    "Trajectory",
    "integrate",
    "DivergenceError",
]
