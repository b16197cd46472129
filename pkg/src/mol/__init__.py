"""Monotone operator learning for linear inverse problems."""
from .exceptions import (ConfigError, ConvergenceError, DimensionError, MOLError, NumericError,
                         ParameterError, SolverError)

__version__ = "0.1.0"

from .analysis import local_lipschitz, monotone_margin, robustness_bound, verify_robustness  # noqa: E402
from .estimator import MOLReconstructor  # noqa: E402
from .linops import (DenseGaussianOp, IdentityOp, MaskedFourierOp, MultiCoilFourierOp,  # noqa: E402
                     make_coil_maps, make_mask)
from .network import NetworkConfig, init_weights, spectral_normalize  # noqa: E402
from .solver import SolverConfig, deq_backward, solve_fixed_point, step_size_bound  # noqa: E402
from .training import TrainConfig, make_synthetic_dataset, train_epoch  # noqa: E402

__all__ = [
    "MOLError", "ConfigError", "ConvergenceError", "DimensionError", "NumericError", "ParameterError",
    "SolverError", "MOLReconstructor", "IdentityOp", "MaskedFourierOp", "MultiCoilFourierOp",
    "DenseGaussianOp", "make_mask", "make_coil_maps", "NetworkConfig", "init_weights",
    "spectral_normalize", "SolverConfig", "solve_fixed_point", "deq_backward", "step_size_bound",
    "local_lipschitz", "monotone_margin", "robustness_bound", "verify_robustness", "TrainConfig",
    "make_synthetic_dataset", "train_epoch",
]
