"""scikit-learn style front end: fit a learned operator, predict reconstructions."""
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image, check_measurement
from .exceptions import DimensionError
from .linops import LinearOperator
from .network import NetworkConfig, init_weights
from .solver import SolverConfig, solve_fixed_point
from .training import Dataset, TrainConfig, init_state, named_seed, psnr, train_epoch

__all__ = ["MOLReconstructor"]


@dataclass(eq=False)
class _PairDataset(Dataset):
    operators: list = None

    def operator(self, i):
        return self.operators[i]


def _check_pairs(X):
    pairs = list(X)
    if not pairs:
        raise ValueError("X must contain at least one (operator, measurement) pair")
    checked = []
    for i, pair in enumerate(pairs):
        try:
            op, b = pair
        except (TypeError, ValueError):
            raise ValueError(f"X[{i}] is not an (operator, measurement) pair") from None
        if not isinstance(op, LinearOperator):
            raise TypeError(f"X[{i}][0] is {type(op).__name__}, expected a LinearOperator")
        checked.append((op, check_measurement(b, op.range_shape)))
    shapes = {op.shape for op, _ in checked}
    if len(shapes) != 1:
        raise DimensionError(f"all operators must share one image shape, got {sorted(shapes)}")
    return checked


class MOLReconstructor(BaseEstimator):
    """Learn ``H`` from (operator, measurement) pairs and reference images.

    ``X`` is a sequence of ``(LinearOperator, measurement)`` pairs and ``y``
    the matching ground-truth images. ``predict`` returns the fixed points.
    ``score`` is the mean magnitude PSNR in dB (higher is better).
    """

    def __init__(self, channels=16, num_layers=5, lam=10.0, m=0.1, alpha=None, tol=1e-4,
                 max_iter=200, anderson_depth=5, epochs=10, batch_size=4, learning_rate=1e-3,
                 lip_weight=3.0, mode="mol-lr", random_state=0):
        self.channels = channels
        self.num_layers = num_layers
        self.lam = lam
        self.m = m
        self.alpha = alpha
        self.tol = tol
        self.max_iter = max_iter
        self.anderson_depth = anderson_depth
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lip_weight = lip_weight
        self.mode = mode
        self.random_state = random_state

    def _solver_config(self):
        return SolverConfig(lam=self.lam, m=self.m, alpha=self.alpha, tol_fwd=self.tol, tol_bwd=self.tol,
                            max_iter_fwd=self.max_iter, max_iter_bwd=self.max_iter,
                            anderson_depth=self.anderson_depth, anderson_backward=self.anderson_depth > 1)

    def fit(self, X, y):
        pairs = _check_pairs(X)
        shape = pairs[0][0].shape
        images = np.stack([check_image(t, shape, name="y") for t in y])
        if len(images) != len(pairs):
            raise ValueError(f"X has {len(pairs)} pairs but y has {len(images)} images")
        seed = int(self.random_state or 0)
        solver_cfg = self._solver_config()
        train_cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                                learning_rate=self.learning_rate, lip_weight=self.lip_weight,
                                mode=self.mode, m_target=self.m, seed=seed)
        net_cfg = NetworkConfig(num_layers=self.num_layers, channels=self.channels, image_shape=shape)
        data = _PairDataset(images=images, masks=None, measurements=[b for _, b in pairs],
                            noise_sigma=0.0, split=np.array(["train"] * len(pairs)),
                            operators=[op for op, _ in pairs])
        state = init_state(init_weights(net_cfg, named_seed(seed, "init")), train_cfg)
        for _ in range(self.epochs):
            state = train_epoch(state, data, solver_cfg, train_cfg, validation=False)
        self.weights_ = state.weights
        self.history_ = state.history
        self.image_shape_ = shape
        return self

    def predict(self, X):
        check_is_fitted(self, "weights_")
        pairs = _check_pairs(X)
        if pairs[0][0].shape != self.image_shape_:
            raise DimensionError(f"fitted for images {self.image_shape_}, got {pairs[0][0].shape}")
        cfg = self._solver_config()
        return np.stack([solve_fixed_point(self.weights_, op, b, cfg=cfg).solution for op, b in pairs])

    def score(self, X, y):
        recon = self.predict(X)
        return float(np.mean([psnr(np.abs(r), np.abs(t)) for r, t in zip(recon, y)]))
