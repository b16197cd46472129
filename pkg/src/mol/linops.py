"""Forward models for linear inverse problems.

Images are ``complex128`` arrays of shape ``(height, width)``. Measurements are
``complex128`` arrays of shape ``(n_coils, n_samples)``: row ``c`` holds the
samples acquired by coil ``c`` at the locations listed by
:meth:`LinearOperator.layout`. Single-channel operators use one row.

Every operator carries a ``scale`` factor so that the effective operator is
``scale * A_raw``; :meth:`LinearOperator.normalized` picks ``scale`` so that the
spectral norm is one.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import check_image, check_measurement, check_random_state, check_scalar
from .exceptions import DimensionError, ParameterError, SolverError

__all__ = [
    "MaskSpec",
    "LinearOperator",
    "IdentityOp",
    "MaskedFourierOp",
    "DenseGaussianOp",
    "MultiCoilFourierOp",
    "make_mask",
    "make_coil_maps",
    "apply_forward",
    "apply_adjoint",
    "gram",
    "solve_q",
    "conjugate_gradient",
    "spectral_norm_estimate",
    "CG_TOL",
    "CG_MAX_ITER",
]

CG_TOL = 1e-13
CG_MAX_ITER = 200

_CENTER = 4  # fully sampled low-frequency block is _CENTER x _CENTER


def fft2c(x):
    """Unitary 2-D FFT with the zero frequency moved to the array center."""
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=(-2, -1)), norm="ortho"), axes=(-2, -1))


def ifft2c(k):
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=(-2, -1)), norm="ortho"), axes=(-2, -1))


@dataclass(frozen=True)
class MaskSpec:
    """Cartesian undersampling pattern in centered k-space coordinates."""

    pattern: np.ndarray
    acceleration: float = 1.0
    seed: int = 0

    def __post_init__(self):
        pattern = np.asarray(self.pattern, dtype=bool)
        if pattern.ndim != 2:
            raise DimensionError(f"mask pattern must be 2-D, got shape {pattern.shape}")
        object.__setattr__(self, "pattern", pattern)

    @property
    def shape(self):
        return self.pattern.shape

    @property
    def density(self):
        return float(self.pattern.mean())

    def __eq__(self, other):
        if not isinstance(other, MaskSpec):
            return NotImplemented
        return (np.array_equal(self.pattern, other.pattern)
                and self.acceleration == other.acceleration and self.seed == other.seed)

    __hash__ = None


def make_mask(shape, acceleration, density_decay=2.0, seed=0):
    """Draw a variable-density random mask.

    Locations are drawn without replacement with probability proportional to
    ``(1 + r / r0) ** -density_decay``, ``r`` being the distance to the k-space
    center and ``r0 = min(shape) / 16``. A 4x4 center block is always sampled.
    The number of sampled locations is ``round(N / acceleration)``.
    """
    h, w = (int(s) for s in shape)
    if h < 1 or w < 1:
        raise ParameterError(f"mask shape must be positive, got {shape}")
    check_scalar(acceleration, "acceleration", min_val=1.0)
    check_scalar(density_decay, "density_decay", min_val=0.0, include_min=False)
    n_total = h * w
    n_target = int(round(n_total / acceleration))

    cy, cx = h // 2, w // 2
    center = np.zeros((h, w), dtype=bool)
    half = _CENTER // 2
    center[max(cy - half, 0):cy + half, max(cx - half, 0):cx + half] = True
    n_center = int(center.sum())
    if n_target < n_center:
        raise ParameterError(
            f"acceleration {acceleration} leaves {n_target} samples, fewer than the "
            f"{n_center}-sample fully sampled center of a {h}x{w} grid"
        )

    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    r = np.hypot(yy, xx)
    r0 = max(min(h, w) / 16.0, 1e-12)
    weight = (1.0 + r / r0) ** (-float(density_decay))

    pattern = center.copy()
    candidates = np.flatnonzero(~center)
    n_extra = n_target - n_center
    if n_extra > 0:
        rng = np.random.default_rng(seed)
        p = weight.ravel()[candidates]
        chosen = rng.choice(candidates, size=n_extra, replace=False, p=p / p.sum())
        pattern.ravel()[chosen] = True
    return MaskSpec(pattern=pattern, acceleration=float(acceleration), seed=int(seed))


def make_coil_maps(shape, n_coils=4, width=0.6, seed=None):
    """Smooth synthetic coil sensitivities with sum of squared magnitudes equal to one.

    Each coil is a Gaussian bump centered on a ring around the image with a
    gentle linear phase ramp. ``seed`` jitters the bump centers.
    """
    h, w = shape
    check_scalar(n_coils, "n_coils", min_val=1, integer=True)
    jitter = np.zeros(n_coils) if seed is None else check_random_state(seed).uniform(-0.2, 0.2, n_coils)
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    maps = np.empty((n_coils, h, w), dtype=np.complex128)
    for c in range(n_coils):
        theta = 2 * np.pi * c / n_coils + jitter[c]
        py, px = 0.9 * np.sin(theta), 0.9 * np.cos(theta)
        mag = np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * width ** 2))
        phase = np.pi / 4 * (np.cos(theta) * yy - np.sin(theta) * xx)
        maps[c] = mag * np.exp(1j * phase)
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps / rss


class LinearOperator:
    """Base class: ``scale * A_raw`` acting on images of shape ``self.shape``."""

    shape = None
    range_shape = None
    scale = 1.0

    # subclasses implement the unscaled maps
    def _forward(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError

    def _gram_fourier_diagonal(self):
        """Return d with A_raw^H A_raw = F^H diag(d) F, or None if not diagonal."""
        return None

    def apply(self, x):
        x = check_image(x, self.shape)
        return self.scale * self._forward(x)

    def adjoint(self, y):
        y = check_measurement(y, self.range_shape)
        return self.scale * self._adjoint(y)

    def gram(self, x):
        x = check_image(x, self.shape)
        return self.scale ** 2 * self._adjoint(self._forward(x))

    def layout(self):
        """``(coil, flat_location)`` index pairs, one per measurement entry."""
        n_coils, n_samples = self.range_shape
        coils = np.repeat(np.arange(n_coils), n_samples)
        locs = np.tile(np.arange(n_samples), n_coils)
        return np.stack([coils, locs], axis=1)

    def with_scale(self, scale):
        return replace(self, scale=float(scale))

    def normalized(self, seed=0):
        """Copy whose spectral norm is one (zero operators are returned unchanged).

        The norm comes from a Lanczos eigensolve of the Gram operator, which is
        accurate to round-off even where power iteration stalls on clustered
        top eigenvalues.
        """
        raw = self.with_scale(1.0)
        norm = _lanczos_norm(raw, seed)
        if norm == 0.0:
            return raw
        return self.with_scale(1.0 / norm)

    def solve_q(self, y, alpha, lam, tol=CG_TOL, max_iter=CG_MAX_ITER):
        """Solve ``(I + alpha*lam*A^H A) z = y``."""
        check_scalar(alpha, "alpha", min_val=0.0)
        check_scalar(lam, "lam", min_val=0.0)
        y = check_image(y, self.shape, name="y")
        c = alpha * lam * self.scale ** 2
        if c == 0.0:
            return y.copy()
        d = self._gram_fourier_diagonal()
        if d is not None:
            return ifft2c(fft2c(y) / (1.0 + c * d))
        return conjugate_gradient(lambda v: v + c * self._adjoint(self._forward(v)), y,
                                  tol=tol, max_iter=max_iter)


@dataclass(frozen=True, eq=False)
class IdentityOp(LinearOperator):
    shape: tuple = (8, 8)
    scale: float = 1.0

    @property
    def range_shape(self):
        return (1, self.shape[0] * self.shape[1])

    def _forward(self, x):
        return x.reshape(1, -1).copy()

    def _adjoint(self, y):
        return y.reshape(self.shape).copy()

    def _gram_fourier_diagonal(self):
        return np.ones(self.shape)


@dataclass(frozen=True, eq=False)
class MaskedFourierOp(LinearOperator):
    """Single-coil Cartesian sampling: ``A x = M F x`` with unitary ``F``."""

    mask: MaskSpec = None
    scale: float = 1.0

    def __post_init__(self):
        if not isinstance(self.mask, MaskSpec):
            object.__setattr__(self, "mask", MaskSpec(pattern=self.mask))
        object.__setattr__(self, "_idx", np.flatnonzero(self.mask.pattern))

    @property
    def shape(self):
        return self.mask.shape

    @property
    def range_shape(self):
        return (1, self._idx.size)

    def layout(self):
        return np.stack([np.zeros(self._idx.size, dtype=int), self._idx], axis=1)

    def _forward(self, x):
        return fft2c(x).reshape(-1)[self._idx][None, :]

    def _adjoint(self, y):
        k = np.zeros(self.shape[0] * self.shape[1], dtype=np.complex128)
        k[self._idx] = y[0]
        return ifft2c(k.reshape(self.shape))

    def _gram_fourier_diagonal(self):
        return self.mask.pattern.astype(float)


@dataclass(frozen=True, eq=False)
class MultiCoilFourierOp(LinearOperator):
    """Parallel imaging model: coil ``c`` measures ``M F (S_c x)``."""

    mask: MaskSpec = None
    coil_maps: np.ndarray = None
    scale: float = 1.0

    def __post_init__(self):
        if not isinstance(self.mask, MaskSpec):
            object.__setattr__(self, "mask", MaskSpec(pattern=self.mask))
        maps = np.asarray(self.coil_maps, dtype=np.complex128)
        if maps.ndim != 3 or maps.shape[1:] != self.mask.shape:
            raise DimensionError(f"coil maps of shape {maps.shape} do not match mask {self.mask.shape}")
        object.__setattr__(self, "coil_maps", maps)
        object.__setattr__(self, "_idx", np.flatnonzero(self.mask.pattern))

    @property
    def shape(self):
        return self.mask.shape

    @property
    def n_coils(self):
        return self.coil_maps.shape[0]

    @property
    def range_shape(self):
        return (self.n_coils, self._idx.size)

    def layout(self):
        n = self._idx.size
        return np.stack([np.repeat(np.arange(self.n_coils), n), np.tile(self._idx, self.n_coils)], axis=1)

    def _forward(self, x):
        k = fft2c(self.coil_maps * x[None])
        return k.reshape(self.n_coils, -1)[:, self._idx]

    def _adjoint(self, y):
        h, w = self.shape
        k = np.zeros((self.n_coils, h * w), dtype=np.complex128)
        k[:, self._idx] = y
        return np.sum(np.conj(self.coil_maps) * ifft2c(k.reshape(self.n_coils, h, w)), axis=0)


@dataclass(frozen=True, eq=False)
class DenseGaussianOp(LinearOperator):
    """Dense matrix acting on the flattened image (row-major)."""

    matrix: np.ndarray = None
    shape: tuple = None
    seed: int = None
    scale: float = 1.0

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.complex128)
        if mat.ndim != 2 or self.shape is None or mat.shape[1] != self.shape[0] * self.shape[1]:
            raise DimensionError(f"matrix of shape {mat.shape} does not act on images of shape {self.shape}")
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "shape", tuple(self.shape))

    @classmethod
    def random(cls, n_measurements, shape, seed=0, complex_valued=False):
        rng = np.random.default_rng(seed)
        n = shape[0] * shape[1]
        mat = rng.standard_normal((n_measurements, n))
        if complex_valued:
            mat = (mat + 1j * rng.standard_normal((n_measurements, n))) / np.sqrt(2)
        return cls(matrix=mat / np.sqrt(n_measurements), shape=tuple(shape), seed=seed)

    @property
    def range_shape(self):
        return (1, self.matrix.shape[0])

    def _forward(self, x):
        return (self.matrix @ x.reshape(-1))[None, :]

    def _adjoint(self, y):
        return (self.matrix.conj().T @ y[0]).reshape(self.shape)


def conjugate_gradient(matvec, rhs, tol=CG_TOL, max_iter=CG_MAX_ITER, x0=None):
    """Conjugate gradients for a Hermitian positive definite ``matvec``.

    Stops when ``||rhs - matvec(x)|| <= tol * ||rhs||``; raises
    :class:`SolverError` carrying the final relative residual otherwise.
    """
    b_norm = np.linalg.norm(rhs)
    if b_norm == 0.0:
        return np.zeros_like(rhs)
    x = np.zeros_like(rhs) if x0 is None else x0.copy()
    r = rhs - matvec(x) if x0 is not None else rhs.copy()
    p = r.copy()
    rs = np.vdot(r, r).real
    for it in range(1, max_iter + 1):
        if np.sqrt(rs) <= tol * b_norm:
            return x
        ap = matvec(p)
        step = rs / np.vdot(p, ap).real
        x += step * p
        r -= step * ap
        rs_new = np.vdot(r, r).real
        p = r + (rs_new / rs) * p
        rs = rs_new
    rel = np.sqrt(rs) / b_norm
    if rel <= tol:
        return x
    raise SolverError(f"CG did not reach tol {tol:g} in {max_iter} iterations (residual {rel:.3e})",
                      residual=rel, iterations=max_iter)


def spectral_norm_estimate(op, iters=100, seed=0):
    """Power-iteration estimate of ``||A||_2`` (a lower bound that increases with ``iters``)."""
    check_scalar(iters, "iters", min_val=1, integer=True)
    rng = check_random_state(seed)
    v = rng.standard_normal(op.shape) + 1j * rng.standard_normal(op.shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = op.gram(v)
        rq = max(np.vdot(v, w).real, 0.0)
        est = max(est, np.sqrt(rq))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    return float(est)


def _lanczos_norm(op, seed=0):
    n = op.shape[0] * op.shape[1]
    if n <= 256:
        mat = np.stack([op.gram(np.eye(n)[:, j].reshape(op.shape)).ravel() for j in range(n)], axis=1)
        return float(np.sqrt(max(np.linalg.eigvalsh(0.5 * (mat + mat.conj().T))[-1], 0.0)))
    from scipy.sparse.linalg import LinearOperator as ScipyOp, eigsh

    gram_op = ScipyOp((n, n), matvec=lambda v: op.gram(v.reshape(op.shape)).ravel(), dtype=np.complex128)
    v0 = check_random_state(seed).standard_normal(n).astype(np.complex128)
    top = eigsh(gram_op, k=1, which="LA", v0=v0, tol=1e-14, return_eigenvectors=False)[0]
    return float(np.sqrt(max(top, 0.0)))


def apply_forward(op, x):
    return op.apply(x)


def apply_adjoint(op, y):
    return op.adjoint(y)


def gram(op, x):
    return op.gram(x)


def solve_q(op, y, alpha, lam):
    return op.solve_q(y, alpha, lam)
