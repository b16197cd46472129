"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""
import numbers

import numpy as np

from .exceptions import DimensionError, ParameterError


def check_image(x, shape=None, name="x", allow_batch=False):
    """Return ``x`` as a finite complex128 array of 2 (or 3, batched) dims."""
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.number):
        raise DimensionError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(np.complex128, copy=False)
    ndim_ok = arr.ndim == 2 or (allow_batch and arr.ndim == 3)
    if not ndim_ok:
        raise DimensionError(f"{name} must be a 2-D image, got shape {arr.shape}")
    if shape is not None and tuple(arr.shape[-2:]) != tuple(shape):
        raise DimensionError(f"{name} has shape {arr.shape[-2:]}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return arr


def check_measurement(y, shape, name="y"):
    arr = np.asarray(y).astype(np.complex128, copy=False)
    if arr.shape != tuple(shape):
        raise DimensionError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def check_scalar(value, name, *, min_val=None, max_val=None, include_min=True,
                 include_max=True, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ParameterError(f"{name} must be {'an integer' if integer else 'a real number'}, got {value!r}")
    if not np.isfinite(value):
        raise ParameterError(f"{name} must be finite, got {value!r}")
    if min_val is not None:
        if value < min_val or (value == min_val and not include_min):
            raise ParameterError(f"{name}={value} is below the admissible minimum {min_val}")
    if max_val is not None:
        if value > max_val or (value == max_val and not include_max):
            raise ParameterError(f"{name}={value} exceeds the admissible maximum {max_val}")
    return value


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def real_inner(a, b):
    """Real inner product Re<a, b> treating complex arrays as pairs of reals."""
    return float(np.real(np.vdot(a, b)))
