"""Forward-backward fixed-point solver and implicit (DEQ) gradients.

The map being iterated is::

    T(x) = Q^{-1} ((1 - alpha) x + alpha H(x) + alpha lam A^H b),
    Q = I + alpha lam A^H A,

whose fixed points solve ``lam A^H (A x - b) + x - H(x) = 0``.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_image, check_scalar, real_inner
from .exceptions import ConvergenceError, NumericError, ParameterError
from .network import (WeightGradient, _from_channels, _to_channels, backward_tape,
                      forward_tape, h_forward)

__all__ = [
    "SolverConfig",
    "FixedPointResult",
    "BufferMeter",
    "step_size_bound",
    "contraction_rate",
    "default_alpha",
    "fb_step",
    "solve_fixed_point",
    "fixed_point_residual",
    "deq_backward",
    "anderson_accelerate",
]


def step_size_bound(m):
    """Supremum ``2m / (2-m)^2`` of step sizes with guaranteed convergence."""
    check_scalar(m, "m", min_val=0.0, max_val=1.0, include_min=False)
    return 2.0 * m / (2.0 - m) ** 2


def contraction_rate(m, alpha):
    """Contraction factor ``sqrt(1 - 2 alpha m + alpha^2 (2-m)^2)`` of the explicit step."""
    radicand = 1.0 - 2.0 * alpha * m + alpha ** 2 * (2.0 - m) ** 2
    if radicand < 0.0:
        if radicand > -1e-12:
            return 0.0
        raise ParameterError(f"negative radicand {radicand:g} for m={m}, alpha={alpha}")
    return float(np.sqrt(radicand))


def default_alpha(m, backoff=0.99):
    return backoff * step_size_bound(m)


@dataclass(frozen=True)
class SolverConfig:
    """Parameters of the fixed-point iteration.

    ``alpha=None`` resolves to ``0.99 * step_size_bound(m)``. With ``strict``
    set, ``alpha`` must lie strictly below ``step_size_bound(m)``.
    ``anderson_depth=0`` disables acceleration. ``anderson_backward`` also
    mixes the adjoint iterates of :func:`deq_backward` (the adjoint equation
    is linear, so mixing only changes the path, not the solution).
    """

    lam: float = 1.0
    m: float = 0.1
    alpha: float = None
    tol_fwd: float = 1e-6
    tol_bwd: float = 1e-6
    max_iter_fwd: int = 200
    max_iter_bwd: int = 200
    anderson_depth: int = 0
    anderson_backward: bool = False
    divergence_threshold: float = 1e6
    strict: bool = False

    def __post_init__(self):
        check_scalar(self.lam, "lam", min_val=0.0)
        check_scalar(self.m, "m", min_val=0.0, max_val=1.0, include_min=False, include_max=False)
        if self.alpha is None:
            object.__setattr__(self, "alpha", default_alpha(self.m))
        check_scalar(self.alpha, "alpha", min_val=0.0, include_min=False)
        if self.strict and self.alpha >= step_size_bound(self.m):
            raise ParameterError(f"alpha={self.alpha} violates alpha < {step_size_bound(self.m)} (strict mode)")
        check_scalar(self.tol_fwd, "tol_fwd", min_val=0.0, include_min=False)
        check_scalar(self.tol_bwd, "tol_bwd", min_val=0.0, include_min=False)
        check_scalar(self.max_iter_fwd, "max_iter_fwd", min_val=1, integer=True)
        check_scalar(self.max_iter_bwd, "max_iter_bwd", min_val=1, integer=True)
        check_scalar(self.anderson_depth, "anderson_depth", min_val=0, integer=True)
        check_scalar(self.divergence_threshold, "divergence_threshold", min_val=0.0, include_min=False)


@dataclass
class FixedPointResult:
    solution: np.ndarray
    nFE: int
    residual_trace: list
    converged: bool
    diverged: bool
    peak_buffers: int = 0

    @property
    def final_residual(self):
        return self.residual_trace[-1] if self.residual_trace else float("inf")


class BufferMeter:
    """Counts image-sized arrays held simultaneously by an algorithm.

    Callers ``hold``/``release`` counts as they keep or drop arrays; ``peak``
    is the high-water mark. Feature maps recorded on a network tape count as
    one buffer each.
    """

    def __init__(self):
        self.current = 0
        self.peak = 0

    def hold(self, n=1):
        self.current += n
        self.peak = max(self.peak, self.current)

    def release(self, n=1):
        self.current -= n


def _rhs_data(op, b, cfg):
    return cfg.alpha * cfg.lam * op.adjoint(b)


def _apply_map(w, op, x, data_term, cfg, iteration=-1):
    v = (1.0 - cfg.alpha) * x + cfg.alpha * h_forward(w, x) + data_term
    if not np.all(np.isfinite(v)):
        raise NumericError(f"non-finite iterate at iteration {iteration}", iteration=iteration)
    return op.solve_q(v, cfg.alpha, cfg.lam)


def fb_step(x, w, op, b, cfg):
    """One forward-backward update (one ``H`` evaluation, one ``Q`` solve)."""
    x = check_image(x, op.shape)
    return _apply_map(w, op, x, _rhs_data(op, b, cfg), cfg)


def _rel_update(new, old):
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(old), 1.0))


def _flat(x):
    return np.ascontiguousarray(x).view(np.float64).ravel()


def anderson_accelerate(history, depth, damping=1e-8, max_cond=1e12):
    """Anderson mixing over ``(iterate, residual)`` pairs, residual = T(x) - x.

    Solves the damped least-squares problem on residual differences with a QR
    factorization and returns the mixed next iterate. Falls back to the plain
    step ``x_k + r_k`` when ``depth`` is one or the system is ill-conditioned.
    """
    if not history:
        raise ParameterError("history must not be empty")
    check_scalar(depth, "depth", min_val=1, integer=True)
    hist = history[-depth:]
    x_k, r_k = hist[-1]
    plain = x_k + r_k
    if len(hist) < 2:
        return plain
    xs = np.stack([_flat(x) for x, _ in hist], axis=1)
    rs = np.stack([_flat(r) for _, r in hist], axis=1)
    gs = xs + rs
    d_r = np.diff(rs, axis=1)
    d_g = np.diff(gs, axis=1)
    scale = np.linalg.norm(d_r)
    if scale == 0.0:
        return plain
    k = d_r.shape[1]
    system = np.vstack([d_r, np.sqrt(damping) * scale * np.eye(k)])
    target = np.concatenate([rs[:, -1], np.zeros(k)])
    q, r = np.linalg.qr(system)
    if np.linalg.cond(r) > max_cond:
        return plain
    gamma = np.linalg.solve(r, q.T @ target)
    mixed = gs[:, -1] - d_g @ gamma
    if not np.all(np.isfinite(mixed)):
        return plain
    return mixed.view(np.complex128).reshape(x_k.shape)


def solve_fixed_point(w, op, b, x0=None, cfg=None, trace=None, meter=None):
    """Iterate the forward-backward map to a fixed point.

    Stops when the relative update ``||x_{k+1}-x_k|| / max(||x_k||, 1)`` drops
    to ``cfg.tol_fwd`` and the returned iterate also has
    :func:`fixed_point_residual` at most ``10 * cfg.tol_fwd`` (for small
    ``alpha`` the update alone understates the residual by about ``1/alpha``).
    It also stops after ``cfg.max_iter_fwd`` maps, or when the iterate norm
    exceeds ``cfg.divergence_threshold``. ``x0`` defaults to ``A^H b``.
    ``trace`` is an optional text sink receiving ``iteration,residual,seconds``
    CSV lines.
    """
    cfg = cfg or SolverConfig()
    meter = meter or BufferMeter()
    atb = op.adjoint(b)
    data_term = cfg.alpha * cfg.lam * atb
    x = atb if x0 is None else check_image(x0, op.shape, name="x0").copy()
    meter.hold(2)  # data term and current iterate
    trace_res, history = [], []
    converged = diverged = False
    t0 = time.perf_counter()
    for k in range(1, cfg.max_iter_fwd + 1):
        x_new = _apply_map(w, op, x, data_term, cfg, k)
        if cfg.anderson_depth > 1:
            if len(history) == cfg.anderson_depth:
                history.pop(0)
            else:
                meter.hold(2)
            history.append((x, x_new - x))
            x_new = anderson_accelerate(history, cfg.anderson_depth)
        res = _rel_update(x_new, x)
        norm = np.linalg.norm(x_new)
        if np.isnan(norm):
            raise NumericError(f"non-finite iterate at iteration {k}", iteration=k)
        trace_res.append(res)
        if trace is not None:
            trace.write(f"{k},{res:.17g},{time.perf_counter() - t0:.6f}\n")
        x = x_new
        if norm > cfg.divergence_threshold:
            diverged = True
            break
        if res <= cfg.tol_fwd and fixed_point_residual(x, w, op, b, cfg.lam) <= 10 * cfg.tol_fwd:
            converged = True
            break
    meter.release(2 + 2 * len(history))
    return FixedPointResult(solution=x, nFE=len(trace_res), residual_trace=trace_res,
                            converged=converged, diverged=diverged, peak_buffers=meter.peak)


def fixed_point_residual(x, w, op, b, lam):
    """``||lam A^H (A x - b) + x - H(x)|| / max(||x||, 1)``."""
    x = check_image(x, op.shape)
    g = lam * op.adjoint(op.apply(x) - b) + x - h_forward(w, x)
    return float(np.linalg.norm(g) / max(np.linalg.norm(x), 1.0))


def deq_backward(w, op, b, x_star, cotangent, cfg=None, meter=None):
    """Implicit gradient of ``<cotangent, x*(w)>`` with respect to the weights.

    Solves ``u = cotangent + J_T^T u`` by fixed-point iteration, where
    ``J_T^T u = Q^{-1}((1-alpha) u) + alpha J_H^T Q^{-1} u`` at ``x_star``
    (``Q`` is self-adjoint), then returns ``alpha (dH/dw)^T Q^{-1} u``.
    Only the network tape at ``x_star`` and the running iterate are kept.

    Returns ``(gradient, nBE)``.
    """
    cfg = cfg or SolverConfig()
    meter = meter or BufferMeter()
    x_star = check_image(x_star, op.shape, name="x_star")
    g = check_image(cotangent, op.shape, name="cotangent")
    alpha, lam = cfg.alpha, cfg.lam
    _, tape = forward_tape(w, _to_channels(x_star[None]))
    meter.hold(len(tape))
    u = g.copy()
    meter.hold()
    depth = cfg.anderson_depth if cfg.anderson_backward else 0
    history = []
    for k in range(1, cfg.max_iter_bwd + 1):
        qu = op.solve_q(u, alpha, lam)
        jh, _ = backward_tape(w, tape, _to_channels(qu[None]), need_params=False)
        u_new = g + (1.0 - alpha) * qu + alpha * _from_channels(jh)[0]
        if not np.all(np.isfinite(u_new)):
            raise NumericError(f"non-finite backward iterate at iteration {k}", iteration=k)
        delta = np.linalg.norm(u_new - u)
        scale = np.linalg.norm(u_new)
        if delta <= cfg.tol_bwd * scale or delta == 0.0:
            u = u_new
            break
        if depth > 1:
            if len(history) == depth:
                history.pop(0)
            else:
                meter.hold(2)
            history.append((u, u_new - u))
            u_new = anderson_accelerate(history, depth)
        u = u_new
    else:
        meter.release(2 * len(history))
        raise ConvergenceError(f"backward iteration did not converge in {cfg.max_iter_bwd} steps "
                               f"(relative change {delta / max(scale, 1e-300):.3e})",
                               residual=delta / max(scale, 1e-300), iterations=cfg.max_iter_bwd)
    meter.release(2 * len(history))
    qu = op.solve_q(u, alpha, lam)
    _, grad = backward_tape(w, tape, _to_channels(qu[None]), need_input=False)
    meter.release(len(tape) + 1)
    return alpha * grad, k
