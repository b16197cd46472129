"""Synthetic data, the training loop, an unrolled reference and image metrics."""
import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import check_image, check_random_state, check_scalar
from .analysis import lipschitz_penalty_grad, local_lipschitz
from .exceptions import ConvergenceError, DimensionError, NumericError, ParameterError
from .linops import MaskedFourierOp, MultiCoilFourierOp, make_coil_maps, make_mask
from .network import (NetworkWeights, WeightGradient, _from_channels, _to_channels, backward_tape,
                      forward_tape, spectral_normalize)
from .solver import BufferMeter, SolverConfig, deq_backward, solve_fixed_point

__all__ = [
    "ComplexitySpec",
    "Dataset",
    "TrainConfig",
    "TrainState",
    "Adam",
    "make_phantom",
    "make_synthetic_dataset",
    "loss",
    "init_state",
    "train_epoch",
    "evaluate",
    "unrolled_reference",
    "psnr",
    "ssim",
    "named_seed",
    "MODES",
    "PSNR_CAP",
]

MODES = ("mol-lr", "mol-sn", "unconstrained")
PSNR_CAP = 200.0


def named_seed(seed, *names):
    """Derive a 32-bit sub-seed from a base seed and a path of names."""
    key = "/".join([str(int(seed))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


@dataclass(frozen=True)
class ComplexitySpec:
    min_shapes: int = 3
    max_shapes: int = 7
    rect_fraction: float = 0.3
    phase_strength: float = 1.0


def make_phantom(shape, rng, spec=None):
    """Piecewise-constant magnitude (ellipses and rectangles) with a smooth phase, peak 1."""
    spec = spec or ComplexitySpec()
    h, w = shape
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    mag = np.zeros(shape)
    # a large background body first so most of the field of view is occupied
    body = ((yy / rng.uniform(0.7, 0.9)) ** 2 + (xx / rng.uniform(0.6, 0.85)) ** 2) <= 1.0
    mag[body] = rng.uniform(0.3, 0.6)
    for _ in range(rng.integers(spec.min_shapes, spec.max_shapes + 1)):
        cy, cx = rng.uniform(-0.5, 0.5, 2)
        ay, ax = rng.uniform(0.08, 0.4, 2)
        value = rng.uniform(-0.3, 0.5)
        if rng.uniform() < spec.rect_fraction:
            region = (np.abs(yy - cy) <= ay) & (np.abs(xx - cx) <= ax)
        else:
            t = rng.uniform(0, np.pi)
            u = (yy - cy) * np.cos(t) + (xx - cx) * np.sin(t)
            v = -(yy - cy) * np.sin(t) + (xx - cx) * np.cos(t)
            region = (u / ay) ** 2 + (v / ax) ** 2 <= 1.0
        mag[region & body] += value
    mag = np.clip(mag, 0.0, None)
    peak = mag.max()
    if peak > 0:
        mag /= peak
    c = rng.normal(0, 1, 3) * spec.phase_strength
    phase = c[0] * yy + c[1] * xx + 0.5 * c[2] * yy * xx
    return mag * np.exp(1j * phase)


@dataclass(eq=False)
class Dataset:
    images: np.ndarray
    masks: list
    measurements: list
    noise_sigma: float
    split: np.ndarray
    coil_maps: np.ndarray = None
    seed: int = 0

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]

    def operator(self, i):
        if self.coil_maps is None:
            return MaskedFourierOp(mask=self.masks[i])
        return MultiCoilFourierOp(mask=self.masks[i], coil_maps=self.coil_maps)

    def indices(self, split):
        return np.flatnonzero(self.split == split)


def make_synthetic_dataset(count, shape=(32, 32), complexity_spec=None, acceleration=4.0,
                           noise_sigma=0.0, seed=0, n_coils=1, density_decay=2.0,
                           split_fractions=(0.7, 0.15, 0.15)):
    """Phantoms, per-image variable-density masks and noisy measurements.

    ``n_coils=1`` uses a single-coil masked Fourier model; more coils use the
    synthetic sensitivities of :func:`make_coil_maps`. Noise is circular
    complex Gaussian with ``E|n|^2 = noise_sigma^2`` per entry.
    """
    check_scalar(count, "count", min_val=1, integer=True)
    check_scalar(noise_sigma, "noise_sigma", min_val=0.0)
    rng = np.random.default_rng(named_seed(seed, "phantoms"))
    noise_rng = np.random.default_rng(named_seed(seed, "noise"))
    images = np.stack([make_phantom(shape, rng, complexity_spec) for _ in range(count)])
    masks = [make_mask(shape, acceleration, density_decay, seed=named_seed(seed, "mask", i))
             for i in range(count)]
    maps = None if n_coils == 1 else make_coil_maps(shape, n_coils)
    n_train = int(round(split_fractions[0] * count))
    n_val = int(round(split_fractions[1] * count))
    split = np.array(["train"] * n_train + ["validation"] * n_val + ["test"] * (count - n_train - n_val))
    data = Dataset(images=images, masks=masks, measurements=[], noise_sigma=float(noise_sigma),
                   split=split, coil_maps=maps, seed=seed)
    for i in range(count):
        b = data.operator(i).apply(images[i])
        if noise_sigma > 0:
            b = b + noise_sigma / np.sqrt(2) * (noise_rng.standard_normal(b.shape)
                                                + 1j * noise_rng.standard_normal(b.shape))
        data.measurements.append(b)
    return data


def loss(recon, target, lip_value_squared=0.0, lip_weight=1.0):
    """Squared reconstruction error plus the weighted Lipschitz penalty."""
    recon = check_image(recon, name="recon")
    target = check_image(target, recon.shape, name="target")
    return float(np.sum(np.abs(recon - target) ** 2) + lip_weight * lip_value_squared)


# --- metrics ---------------------------------------------------------------

def psnr(x, ref):
    """``10 log10(peak^2 / MSE)`` with ``peak = max|ref|``; identical inputs give 200 dB."""
    x = np.asarray(x, dtype=np.complex128)
    ref = np.asarray(ref, dtype=np.complex128)
    if x.shape != ref.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {ref.shape}")
    peak = np.abs(ref).max()
    if peak == 0:
        raise ParameterError("reference image is identically zero")
    mse = np.mean(np.abs(x - ref) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak ** 2 / mse), PSNR_CAP))


def ssim(x, ref, window=7, constants=(0.01, 0.03)):
    """Mean SSIM over all ``window x window`` patches of the magnitude images.

    Uses uniform weights, unbiased (n-1) variances, ``data range = max|ref|``
    and stabilizers ``(k1 * range)^2, (k2 * range)^2``.
    """
    a = np.abs(np.asarray(x))
    r = np.abs(np.asarray(ref))
    if a.shape != r.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {r.shape}")
    if window > min(a.shape):
        raise ParameterError(f"window {window} exceeds image size {a.shape}")
    peak = r.max()
    c1, c2 = (constants[0] * peak) ** 2, (constants[1] * peak) ** 2
    wa = sliding_window_view(a, (window, window))
    wr = sliding_window_view(r, (window, window))
    n = window * window
    mu_a, mu_r = wa.mean(axis=(2, 3)), wr.mean(axis=(2, 3))
    corr = n / (n - 1.0)
    var_a = wa.var(axis=(2, 3)) * corr
    var_r = wr.var(axis=(2, 3)) * corr
    cov = ((wa - mu_a[..., None, None]) * (wr - mu_r[..., None, None])).mean(axis=(2, 3)) * corr
    s = ((2 * mu_a * mu_r + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_r ** 2 + c1) * (var_a + var_r + c2))
    return float(s.mean())


# --- optimisation ----------------------------------------------------------

class Adam:
    def __init__(self, learning_rate=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate, self.beta1, self.beta2, self.eps = learning_rate, beta1, beta2, eps

    def init(self, params):
        return {"t": 0, "m": np.zeros_like(params), "v": np.zeros_like(params)}

    def step(self, params, grad, state):
        t = state["t"] + 1
        m = self.beta1 * state["m"] + (1 - self.beta1) * grad
        v = self.beta2 * state["v"] + (1 - self.beta2) * grad ** 2
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps), {"t": t, "m": m, "v": v}


class SGD:
    def __init__(self, learning_rate=1e-3):
        self.learning_rate = learning_rate

    def init(self, params):
        return {"t": 0}

    def step(self, params, grad, state):
        return params - self.learning_rate * grad, {"t": state["t"] + 1}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lip_weight: float = 1.0
    lip_ascent_steps: int = 10
    lip_step_size: float = 1.0
    mode: str = "mol-lr"
    m_target: float = 0.1
    sn_power_iters: int = 10
    seed: int = 0

    def __post_init__(self):
        check_scalar(self.epochs, "epochs", min_val=0, integer=True)
        check_scalar(self.batch_size, "batch_size", min_val=1, integer=True)
        check_scalar(self.learning_rate, "learning_rate", min_val=0.0)
        check_scalar(self.lip_weight, "lip_weight", min_val=0.0)
        check_scalar(self.lip_ascent_steps, "lip_ascent_steps", min_val=1, integer=True)
        check_scalar(self.m_target, "m_target", min_val=0.0, max_val=1.0, include_min=False,
                     include_max=False)
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return SGD(self.learning_rate)
        return Adam(self.learning_rate, self.beta1, self.beta2, self.adam_eps)


@dataclass
class TrainState:
    weights: NetworkWeights
    optimizer_state: dict
    epoch: int = 0
    history: list = field(default_factory=list)


def init_state(weights, train_cfg):
    if train_cfg.mode == "mol-sn":
        weights = spectral_normalize(weights, 1.0 - train_cfg.m_target, power_iters=100)
    return TrainState(weights=weights, optimizer_state=train_cfg.make_optimizer().init(
        weights.parameters_vector()))


def _sample_grad(w, data, i, solver_cfg, train_cfg, epoch):
    op, b, target = data.operator(i), data.measurements[i], data.images[i]
    res = solve_fixed_point(w, op, b, cfg=solver_cfg)
    if res.diverged:
        return None, res, None
    x = res.solution
    grad, _ = deq_backward(w, op, b, x, 2.0 * (x - target), solver_cfg)
    mse = float(np.sum(np.abs(x - target) ** 2))
    lip = local_lipschitz(w, x, steps=train_cfg.lip_ascent_steps, step_size=train_cfg.lip_step_size,
                          seed=named_seed(train_cfg.seed, "ascent", epoch, i))
    value = mse
    if train_cfg.mode == "mol-lr" and train_cfg.lip_weight > 0 and lip.value_squared > 0:
        _, g_lip = lipschitz_penalty_grad(w, x, lip.perturbation)
        grad = grad + train_cfg.lip_weight * g_lip
        value = loss(x, target, lip.value_squared, train_cfg.lip_weight)
    return grad, res, (value, lip.value)


def train_epoch(state, data, solver_cfg, train_cfg, validation=True):
    """One pass over the training split; returns a new :class:`TrainState`.

    A batch in which any sample diverges (or fails numerically) is skipped
    and counted; the epoch raises :class:`ConvergenceError` only if every
    batch was skipped.
    """
    idx = data.indices("train")
    if idx.size == 0:
        raise ParameterError("dataset has no training samples")
    epoch = state.epoch + 1
    order = np.random.default_rng(named_seed(train_cfg.seed, "shuffle", epoch)).permutation(idx)
    opt = train_cfg.make_optimizer()
    w, opt_state = state.weights, state.optimizer_state
    losses, lips, nfes, diverged = [], [], [], 0
    batches = [order[s:s + train_cfg.batch_size] for s in range(0, order.size, train_cfg.batch_size)]
    for batch in batches:
        total, batch_losses, batch_lips, ok = None, [], [], True
        for i in batch:
            try:
                g, res, stats = _sample_grad(w, data, int(i), solver_cfg, train_cfg, epoch)
            except (NumericError, ConvergenceError):
                g, res, stats = None, None, None
            if res is not None:
                nfes.append(res.nFE)
            if g is None:
                ok = False
                break
            total = g if total is None else total + g
            batch_losses.append(stats[0])
            batch_lips.append(stats[1])
        if not ok:
            diverged += 1
            continue
        total = (1.0 / len(batch)) * total
        params, opt_state = opt.step(w.parameters_vector(), total.vector(), opt_state)
        w = w.with_parameters(params)
        if train_cfg.mode == "mol-sn":
            w = spectral_normalize(w, 1.0 - train_cfg.m_target, power_iters=train_cfg.sn_power_iters)
        losses += batch_losses
        lips += batch_lips
    if diverged == len(batches):
        raise ConvergenceError(f"all {diverged} batches diverged in epoch {epoch}")
    record = {
        "epoch": epoch,
        "train_loss": float(np.mean(losses)),
        "val_psnr": float("nan"),
        "val_ssim": float("nan"),
        "mean_lip": float(np.mean(lips)),
        "mean_nFE": float(np.mean(nfes)) if nfes else float("nan"),
        "diverged_batches": diverged,
    }
    if validation and data.indices("validation").size:
        ev = evaluate(w, data, "validation", solver_cfg)
        record["val_psnr"], record["val_ssim"] = ev["psnr"], ev["ssim"]
    return TrainState(weights=w, optimizer_state=opt_state, epoch=epoch, history=state.history + [record])


def evaluate(w, data, split="test", solver_cfg=None):
    """Reconstruct a split and return mean magnitude PSNR/SSIM, nFE and per-image records."""
    solver_cfg = solver_cfg or SolverConfig()
    idx = data.indices(split) if isinstance(split, str) else np.asarray(split)
    records = []
    for i in idx:
        res = solve_fixed_point(w, data.operator(int(i)), data.measurements[int(i)], cfg=solver_cfg)
        ref = data.images[int(i)]
        records.append({
            "index": int(i),
            "psnr": psnr(np.abs(res.solution), np.abs(ref)) if not res.diverged else float("nan"),
            "ssim": ssim(res.solution, ref) if not res.diverged else float("nan"),
            "nFE": res.nFE,
            "converged": res.converged,
            "diverged": res.diverged,
        })
    return {
        "psnr": float(np.nanmean([r["psnr"] for r in records])) if records else float("nan"),
        "ssim": float(np.nanmean([r["ssim"] for r in records])) if records else float("nan"),
        "nFE": float(np.mean([r["nFE"] for r in records])) if records else float("nan"),
        "records": records,
    }


def unrolled_reference(w, op, b, unrolls, cfg=None, cotangent=None, x0=None, meter=None):
    """Run ``unrolls`` forward-backward steps keeping every intermediate, then backpropagate.

    Returns ``(x_K, gradient of <cotangent, x_K>, buffers_retained)`` where the
    buffer count is the peak number of stored image-sized arrays: one network
    tape (input plus hidden feature maps) per step and the running adjoint.
    """
    check_scalar(unrolls, "unrolls", min_val=1, integer=True)
    cfg = cfg or SolverConfig()
    meter = meter or BufferMeter()
    alpha, lam = cfg.alpha, cfg.lam
    atb = op.adjoint(b)
    data_term = alpha * lam * atb
    x = atb if x0 is None else check_image(x0, op.shape, name="x0")
    tapes = []
    for _ in range(unrolls):
        out, tape = forward_tape(w, _to_channels(x[None]))
        tapes.append(tape)
        meter.hold(len(tape))
        x = op.solve_q((1 - alpha) * x + alpha * _from_channels(out)[0] + data_term, alpha, lam)
    grad = WeightGradient.zeros_like(w)
    if cotangent is None:
        meter.release(sum(len(t) for t in tapes))
        return x, grad, meter.peak
    a = check_image(cotangent, op.shape, name="cotangent")
    meter.hold()
    for tape in reversed(tapes):
        qa = op.solve_q(a, alpha, lam)
        gx, gw = backward_tape(w, tape, _to_channels(qa[None]))
        grad = grad + alpha * gw
        a = (1 - alpha) * qa + alpha * _from_channels(gx)[0]
        meter.release(len(tape))
    meter.release()
    return x, grad, meter.peak
