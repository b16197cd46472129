"""The learned operator ``H``: a plain convolutional network on two real channels.

A complex image enters as its (real, imag) planes and leaves the same way, so
``H`` maps complex images of a fixed size to complex images of that size.
Layers are zero-padded "same" convolutions; every layer except the last is
followed by the activation. Gradients are exact vector-Jacobian products
written out by hand, no autodiff engine involved.
"""
from dataclasses import dataclass, replace

import numpy as np

from ._validation import check_image, check_random_state, check_scalar
from .exceptions import DimensionError, ParameterError

__all__ = [
    "NetworkConfig",
    "NetworkWeights",
    "WeightGradient",
    "init_weights",
    "h_forward",
    "h_vjp_input",
    "h_vjp_params",
    "spectral_normalize",
    "layer_spectral_norms",
    "global_lipschitz_bound",
    "identity_like_weights",
    "zero_weights",
]

ACTIVATIONS = ("relu", "leaky_relu", "identity")


@dataclass(frozen=True)
class NetworkConfig:
    num_layers: int = 5
    channels: int = 64
    kernel_size: int = 3
    activation: str = "relu"
    slope: float = 0.01
    image_shape: tuple = (32, 32)
    io_channels: int = 2

    def __post_init__(self):
        check_scalar(self.num_layers, "num_layers", min_val=2, integer=True)
        check_scalar(self.channels, "channels", min_val=1, integer=True)
        check_scalar(self.kernel_size, "kernel_size", min_val=1, integer=True)
        if self.kernel_size % 2 == 0:
            raise ParameterError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.io_channels != 2:
            raise ParameterError("io_channels is fixed at 2 (real and imaginary planes)")
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))


@dataclass(frozen=True, eq=False)
class NetworkWeights:
    """Immutable parameter set. ``spectral_state`` holds per-layer power vectors."""

    kernels: tuple
    biases: tuple
    activation: str = "relu"
    slope: float = 0.01
    image_shape: tuple = (32, 32)
    spectral_state: tuple = None

    def __post_init__(self):
        kernels = tuple(np.asarray(k, dtype=np.float64) for k in self.kernels)
        biases = tuple(np.asarray(b, dtype=np.float64) for b in self.biases)
        if len(kernels) != len(biases) or not kernels:
            raise DimensionError("need one bias vector per kernel and at least one layer")
        for i, (k, b) in enumerate(zip(kernels, biases)):
            if k.ndim != 4 or k.shape[2] != k.shape[3] or k.shape[2] % 2 == 0:
                raise DimensionError(f"layer {i}: kernel must be (out, in, k, k) with odd k, got {k.shape}")
            if b.shape != (k.shape[0],):
                raise DimensionError(f"layer {i}: bias shape {b.shape} does not match {k.shape[0]} outputs")
            if i > 0 and k.shape[1] != kernels[i - 1].shape[0]:
                raise DimensionError(f"layer {i}: expects {k.shape[1]} inputs, previous layer gives "
                                     f"{kernels[i - 1].shape[0]}")
        if kernels[0].shape[1] != 2 or kernels[-1].shape[0] != 2:
            raise DimensionError("first layer must take 2 channels and last layer must emit 2")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        state = self.spectral_state
        if state is None:
            state = (None,) * len(kernels)
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        object.__setattr__(self, "spectral_state", tuple(state))

    @property
    def num_layers(self):
        return len(self.kernels)

    def parameters_vector(self):
        return np.concatenate([a.ravel() for pair in zip(self.kernels, self.biases) for a in pair])

    def with_parameters(self, vector):
        kernels, biases = _split_vector(vector, self.kernels, self.biases)
        return replace(self, kernels=kernels, biases=biases)

    def scaled(self, factor):
        """Multiply every kernel by ``factor`` (biases untouched)."""
        return replace(self, kernels=tuple(factor * k for k in self.kernels))

    def allclose(self, other, atol=0.0):
        return all(np.allclose(a, b, rtol=0, atol=atol) for a, b in
                   zip(self.kernels + self.biases, other.kernels + other.biases))


@dataclass(frozen=True, eq=False)
class WeightGradient:
    kernels: tuple
    biases: tuple

    @classmethod
    def zeros_like(cls, weights):
        return cls(tuple(np.zeros_like(k) for k in weights.kernels),
                   tuple(np.zeros_like(b) for b in weights.biases))

    def __add__(self, other):
        return WeightGradient(tuple(a + b for a, b in zip(self.kernels, other.kernels)),
                              tuple(a + b for a, b in zip(self.biases, other.biases)))

    def __sub__(self, other):
        return self + (-1.0) * other

    def __mul__(self, c):
        return WeightGradient(tuple(c * a for a in self.kernels), tuple(c * a for a in self.biases))

    __rmul__ = __mul__

    def vector(self):
        return np.concatenate([a.ravel() for pair in zip(self.kernels, self.biases) for a in pair])

    def norm(self):
        return float(np.linalg.norm(self.vector()))


def _split_vector(vector, kernels, biases):
    vector = np.asarray(vector, dtype=np.float64)
    expected = sum(k.size + b.size for k, b in zip(kernels, biases))
    if vector.shape != (expected,):
        raise DimensionError(f"parameter vector has shape {vector.shape}, expected ({expected},)")
    out_k, out_b, off = [], [], 0
    for k, b in zip(kernels, biases):
        out_k.append(vector[off:off + k.size].reshape(k.shape))
        off += k.size
        out_b.append(vector[off:off + b.size].reshape(b.shape))
        off += b.size
    if off != vector.size:
        raise DimensionError(f"parameter vector has {vector.size} entries, expected {off}")
    return tuple(out_k), tuple(out_b)


# --- convolution primitives on (N, C, H, W) real arrays -------------------

def _im2col(x, k):
    n, c, h, w = x.shape
    p = k // 2
    cols = np.zeros((n, c, k, k, h, w))
    for dy in range(k):
        oy = dy - p
        ys, yd = slice(max(oy, 0), h + min(oy, 0)), slice(max(-oy, 0), h - max(oy, 0))
        for dx in range(k):
            ox = dx - p
            xs, xd = slice(max(ox, 0), w + min(ox, 0)), slice(max(-ox, 0), w - max(ox, 0))
            cols[:, :, dy, dx, yd, xd] = x[:, :, ys, xs]
    return cols.reshape(n, c * k * k, h * w)


def _conv(x, kernel):
    n, _, h, w = x.shape
    out = np.matmul(kernel.reshape(kernel.shape[0], -1), _im2col(x, kernel.shape[-1]))
    return out.reshape(n, kernel.shape[0], h, w)


def _conv_transpose(g, kernel):
    flipped = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return _conv(g, np.ascontiguousarray(flipped))


def _conv_kernel_grad(g, x, k):
    n, o, h, w = g.shape
    cols = _im2col(x, k)
    grad = np.tensordot(g.reshape(n, o, h * w), cols, axes=([0, 2], [0, 2]))
    return grad.reshape(o, x.shape[1], k, k)


def _activate(z, activation, slope):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "leaky_relu":
        return np.where(z > 0, z, slope * z)
    return z


def _activation_grad(a, g, activation, slope):
    # a is the post-activation value; a > 0 iff z > 0 for both ReLU variants
    if activation == "relu":
        return np.where(a > 0, g, 0.0)
    if activation == "leaky_relu":
        return np.where(a > 0, g, slope * g)
    return g


def _to_channels(x):
    return np.stack([x.real, x.imag], axis=1)


def _from_channels(y):
    return y[:, 0] + 1j * y[:, 1]


def _as_batch(w, x, name="x"):
    x = check_image(x, allow_batch=True, name=name)
    return (x[None] if x.ndim == 2 else x), x.ndim == 2


def forward_tape(w, x2):
    """Run the network on real (N, 2, H, W) input; return output and layer inputs."""
    tape = [x2]
    a = x2
    last = w.num_layers - 1
    for i, (k, b) in enumerate(zip(w.kernels, w.biases)):
        z = _conv(a, k) + b[None, :, None, None]
        if i == last:
            return z, tape
        a = _activate(z, w.activation, w.slope)
        tape.append(a)


def backward_tape(w, tape, g, need_input=True, need_params=True):
    """Pull the output cotangent ``g`` back through a recorded tape."""
    dk, db = [None] * w.num_layers, [None] * w.num_layers
    for i in range(w.num_layers - 1, -1, -1):
        if i < w.num_layers - 1:
            g = _activation_grad(tape[i + 1], g, w.activation, w.slope)
        if need_params:
            dk[i] = _conv_kernel_grad(g, tape[i], w.kernels[i].shape[-1])
            db[i] = g.sum(axis=(0, 2, 3))
        if i > 0 or need_input:
            g = _conv_transpose(g, w.kernels[i])
    grad_w = WeightGradient(tuple(dk), tuple(db)) if need_params else None
    return (g if need_input else None), grad_w


def h_forward(w, x):
    """Evaluate ``H(x)`` for a complex image or a batch of them."""
    xb, single = _as_batch(w, x)
    out, _ = forward_tape(w, _to_channels(xb))
    y = _from_channels(out)
    return y[0] if single else y


def h_vjp_input(w, x, v):
    """Return ``(dH/dx)^T v`` at ``x`` (real inner product on complex images)."""
    xb, single = _as_batch(w, x)
    vb, _ = _as_batch(w, v, name="v")
    if vb.shape != xb.shape:
        raise DimensionError(f"v has shape {vb.shape}, x has shape {xb.shape}")
    _, tape = forward_tape(w, _to_channels(xb))
    gx, _ = backward_tape(w, tape, _to_channels(vb), need_params=False)
    gx = _from_channels(gx)
    return gx[0] if single else gx


def h_vjp_params(w, x, v):
    """Return ``(dH/dw)^T v`` at ``(w, x)`` as a :class:`WeightGradient`."""
    xb, _ = _as_batch(w, x)
    vb, _ = _as_batch(w, v, name="v")
    if vb.shape != xb.shape:
        raise DimensionError(f"v has shape {vb.shape}, x has shape {xb.shape}")
    _, tape = forward_tape(w, _to_channels(xb))
    _, grad = backward_tape(w, tape, _to_channels(vb), need_input=False)
    return grad


# --- spectral norms --------------------------------------------------------

def _layer_power_iteration(kernel, shape, v, iters):
    if v is None:
        rng = np.random.default_rng(0)
        v = rng.standard_normal((kernel.shape[1],) + tuple(shape))
    v = v[None]
    nv = np.linalg.norm(v)
    if nv == 0.0 or not np.any(kernel):
        return 0.0, v[0]
    v = v / nv
    est = 0.0
    for _ in range(iters):
        u = _conv(v, kernel)
        est = max(est, float(np.linalg.norm(u)))
        v_new = _conv_transpose(u, kernel)
        n = np.linalg.norm(v_new)
        if n == 0.0:
            return 0.0, v[0]
        v = v_new / n
    return est, v[0]


def layer_spectral_norms(w, power_iters=50):
    """Per-layer operator-norm estimates at ``w.image_shape`` and updated power vectors."""
    norms, state = [], []
    for k, s in zip(w.kernels, w.spectral_state):
        est, v = _layer_power_iteration(k, w.image_shape, s, power_iters)
        norms.append(est)
        state.append(v)
    return norms, tuple(state)


def spectral_normalize(w, target=1.0, power_iters=50, passes=3):
    """Rescale each layer whose norm estimate exceeds ``target ** (1/L)``.

    Power iteration approaches the norm from below, so the estimate is
    refreshed (warm-started) and layers rescaled again for up to ``passes``
    rounds. Returns new weights with the power vectors in ``spectral_state``.
    """
    check_scalar(target, "target", min_val=0.0, include_min=False)
    check_scalar(passes, "passes", min_val=1, integer=True)
    per_layer = target ** (1.0 / w.num_layers)
    for _ in range(passes):
        norms, state = layer_spectral_norms(w, power_iters)
        over = [n > per_layer for n in norms]
        kernels = tuple(k * (per_layer / n) if o else k for k, n, o in zip(w.kernels, norms, over))
        w = replace(w, kernels=kernels, spectral_state=state)
        if not any(over):
            break
    return w


def global_lipschitz_bound(w, power_iters=50):
    """Product of per-layer spectral norms (activations have slope at most one)."""
    norms, _ = layer_spectral_norms(w, power_iters)
    return float(np.prod(norms))


def init_weights(cfg, seed=0):
    """He-scaled Gaussian kernels, zero biases, then per-layer normalization to norm <= 1."""
    rng = check_random_state(seed)
    c, k, n = cfg.channels, cfg.kernel_size, cfg.num_layers
    dims = [2] + [c] * (n - 1) + [2]
    kernels = tuple(rng.standard_normal((dims[i + 1], dims[i], k, k)) * np.sqrt(2.0 / (dims[i] * k * k))
                    for i in range(n))
    biases = tuple(np.zeros(dims[i + 1]) for i in range(n))
    w = NetworkWeights(kernels=kernels, biases=biases, activation=cfg.activation, slope=cfg.slope,
                       image_shape=cfg.image_shape)
    return spectral_normalize(w, target=1.0, power_iters=200)


def identity_like_weights(cfg, gain=1.0, offset=10.0, noise=0.0, seed=0):
    """Network that computes ``gain * x`` for inputs with entries below ``offset``.

    Hidden activations are shifted by ``offset`` so the ReLUs stay in their
    linear region, which makes the layer-norm product a tight Lipschitz bound
    (random initializations sit far below theirs). ``noise`` adds a Gaussian
    perturbation to every kernel.
    """
    rng = check_random_state(seed)
    c, k, n = cfg.channels, cfg.kernel_size, cfg.num_layers
    if c < 2:
        raise ParameterError("identity_like_weights needs at least 2 hidden channels")
    check_scalar(gain, "gain", min_val=0.0)
    s = gain ** (1.0 / n)
    ctr = k // 2
    kernels, biases = [], []
    dims = [2] + [c] * (n - 1) + [2]
    for i in range(n):
        kk = np.zeros((dims[i + 1], dims[i], k, k))
        kk[0, 0, ctr, ctr] = kk[1, 1, ctr, ctr] = s
        if noise:
            kk = kk + noise * rng.standard_normal(kk.shape) / np.sqrt(dims[i] * k * k)
        b = np.zeros(dims[i + 1])
        if i == 0:
            b[:2] = offset
        elif i < n - 1:
            b[:2] = offset * (1.0 - s)
        else:
            b[:2] = -s * offset
        kernels.append(kk)
        biases.append(b)
    return NetworkWeights(kernels=tuple(kernels), biases=tuple(biases), activation=cfg.activation,
                          slope=cfg.slope, image_shape=cfg.image_shape)


def zero_weights(cfg):
    """Weights for ``H = 0`` (the unlearned baseline)."""
    c, k, n = cfg.channels, cfg.kernel_size, cfg.num_layers
    dims = [2] + [c] * (n - 1) + [2]
    return NetworkWeights(kernels=tuple(np.zeros((dims[i + 1], dims[i], k, k)) for i in range(n)),
                          biases=tuple(np.zeros(dims[i + 1]) for i in range(n)),
                          activation=cfg.activation, slope=cfg.slope, image_shape=cfg.image_shape)
