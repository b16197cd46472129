"""Certificates for a learned operator: local Lipschitz constant, monotone
margin of ``F = I - H``, and the perturbation bound on fixed points."""
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_image, check_random_state, check_scalar, real_inner
from .exceptions import ConvergenceError, NumericError, ParameterError
from .network import (_from_channels, _to_channels, backward_tape, forward_tape,
                      global_lipschitz_bound, h_forward)
from .solver import contraction_rate, solve_fixed_point, step_size_bound

__all__ = [
    "LipschitzEstimate",
    "MonotoneEstimate",
    "RobustnessReport",
    "SamplingSpec",
    "local_lipschitz",
    "lipschitz_penalty_grad",
    "monotone_margin",
    "robustness_bound",
    "verify_robustness",
]


@dataclass
class LipschitzEstimate:
    value_squared: float
    value: float
    perturbation: np.ndarray
    ascent_steps: int
    history: list = field(default_factory=list)


@dataclass
class MonotoneEstimate:
    m_hat: float
    num_pairs: int
    worst_pair: tuple
    lipschitz_f: float = 0.0


@dataclass
class RobustnessReport:
    bound_factor: float
    empirical_ratios: list
    max_ratio: float
    violated: bool
    m_used: float = float("nan")
    skipped: int = 0
    non_converged: int = 0

    @property
    def certified(self):
        return math.isfinite(self.bound_factor)

    def to_text(self):
        """Key/value lines followed by the ratio array, one value per line."""
        lines = [
            f"bound_factor = {self.bound_factor!r}",
            f"max_ratio = {self.max_ratio!r}",
            f"violated = {str(self.violated).lower()}",
            f"m_used = {self.m_used!r}",
            f"skipped = {self.skipped}",
            f"non_converged = {self.non_converged}",
            f"empirical_ratios = [{len(self.empirical_ratios)}]",
        ]
        lines += [repr(float(r)) for r in self.empirical_ratios]
        return "\n".join(lines) + "\n"


def _difference_ratio(w, f_star, h_star, eps):
    d = h_forward(w, f_star + eps) - h_star
    return float(np.sum(np.abs(d) ** 2) / np.sum(np.abs(eps) ** 2)), d


def local_lipschitz(w, f_star, steps=10, step_size=1.0, seed=0, radius=0.1):
    """Maximize ``||H(f*+e) - H(f*)||^2 / ||e||^2`` over perturbations ``e``.

    Each ascent step moves ``e`` along the ratio's gradient rescaled by
    ``||e||^2 / (2 * ratio)``; with ``step_size=1`` this is a power-method
    update ``e <- J^T (H(f*+e) - H(f*)) / ratio``. ``e`` starts as Gaussian
    noise of norm ``1e-2 ||f*||``, is projected back to norm
    ``radius * ||f*||`` when it grows beyond it, and is re-inflated when its
    norm drops below 1e-8. The largest ratio seen is returned.
    """
    check_scalar(steps, "steps", min_val=1, integer=True)
    f_star = check_image(f_star)
    rng = check_random_state(seed)
    ref = max(np.linalg.norm(f_star), 1.0)
    max_norm = radius * ref
    eps = rng.standard_normal(f_star.shape) + 1j * rng.standard_normal(f_star.shape)
    eps *= 1e-2 * ref / np.linalg.norm(eps)
    h_star = h_forward(w, f_star)
    best, best_eps, history = -1.0, eps, []
    for _ in range(steps):
        ratio, d = _difference_ratio(w, f_star, h_star, eps)
        history.append(ratio)
        if ratio > best:
            best, best_eps = ratio, eps
        if ratio == 0.0:
            break
        _, tape = forward_tape(w, _to_channels((f_star + eps)[None]))
        jt_d, _ = backward_tape(w, tape, _to_channels(d[None]), need_params=False)
        direction = _from_channels(jt_d)[0] / ratio - eps
        eps = eps + step_size * direction
        n = np.linalg.norm(eps)
        if not np.isfinite(n):
            raise NumericError("perturbation became non-finite during Lipschitz ascent")
        if n > max_norm:
            eps *= max_norm / n
        elif n < 1e-8:
            eps = rng.standard_normal(f_star.shape) + 1j * rng.standard_normal(f_star.shape)
            eps *= 1e-2 * ref / np.linalg.norm(eps)
    # the last update is evaluated too, so ``steps`` ascent moves are all scored
    ratio, _ = _difference_ratio(w, f_star, h_star, eps)
    history.append(ratio)
    if ratio > best:
        best, best_eps = ratio, eps
    best = max(best, 0.0)
    return LipschitzEstimate(value_squared=best, value=math.sqrt(best), perturbation=best_eps,
                             ascent_steps=steps, history=history)


def lipschitz_penalty_grad(w, f_star, eps):
    """Gradient in the weights of ``||H(f*+e) - H(f*)||^2 / ||e||^2`` at fixed ``f*`` and ``e``."""
    x2 = _to_channels(np.stack([f_star + eps, f_star]))
    out, tape = forward_tape(w, x2)
    d = out[0] - out[1]
    scale = 2.0 / float(np.sum(np.abs(eps) ** 2))
    g = np.stack([scale * d, -scale * d])
    _, grad = backward_tape(w, tape, g, need_input=False)
    return float(np.sum(d ** 2)) * scale / 2.0, grad


@dataclass(frozen=True)
class SamplingSpec:
    """Where monotonicity is probed.

    ``random_fraction`` of the pairs are independent complex Gaussian images
    with per-pixel scale ``scale``; the rest are anchors (typically fixed
    points) each paired with a copy perturbed by relative size ``perturb``.
    """

    shape: tuple = (32, 32)
    scale: float = 1.0
    anchors: tuple = ()
    perturb: float = 0.1
    random_fraction: float = 0.5


def _sample_pairs(spec, samples, rng):
    n_rand = samples if not spec.anchors else int(round(spec.random_fraction * samples))
    shape = spec.shape
    for _ in range(n_rand):
        x = spec.scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        y = spec.scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        yield x, y
    for i in range(samples - n_rand):
        a = np.asarray(spec.anchors[i % len(spec.anchors)], dtype=np.complex128)
        size = spec.perturb * max(np.linalg.norm(a), 1.0) / math.sqrt(a.size)
        x = a + size * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        y = a + size * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        yield x, y


def monotone_margin(w, samples=1000, seed=0, sampling_spec=None, batch=64):
    """Smallest sampled ``Re<x-y, F(x)-F(y)> / ||x-y||^2`` with ``F = I - H``.

    Also records the largest sampled ``||F(x)-F(y)|| / ||x-y||``.
    """
    check_scalar(samples, "samples", min_val=2, integer=True)
    spec = sampling_spec or SamplingSpec(shape=w.image_shape)
    rng = check_random_state(seed)
    pairs = [(x, y) for x, y in _sample_pairs(spec, samples, rng) if not np.array_equal(x, y)]
    m_hat, lip_f, worst = math.inf, 0.0, None
    for start in range(0, len(pairs), batch):
        chunk = pairs[start:start + batch]
        xs = np.stack([p[0] for p in chunk])
        ys = np.stack([p[1] for p in chunk])
        dx = xs - ys
        df = dx - (h_forward(w, xs) - h_forward(w, ys))
        nd = np.sum(np.abs(dx) ** 2, axis=(1, 2))
        ratios = np.real(np.sum(np.conj(dx) * df, axis=(1, 2))) / nd
        lips = np.sqrt(np.sum(np.abs(df) ** 2, axis=(1, 2)) / nd)
        i = int(np.argmin(ratios))
        if ratios[i] < m_hat:
            m_hat, worst = float(ratios[i]), chunk[i]
        lip_f = max(lip_f, float(lips.max()))
    return MonotoneEstimate(m_hat=m_hat, num_pairs=len(pairs), worst_pair=worst, lipschitz_f=lip_f)


def robustness_bound(alpha, lam, m):
    """``alpha lam / (1 - contraction_rate(m, alpha))``; infinite at the step-size limit."""
    limit = step_size_bound(m)
    if alpha > limit * (1 + 1e-12):
        raise ParameterError(f"alpha={alpha} exceeds the admissible step size {limit} for m={m}")
    check_scalar(alpha, "alpha", min_val=0.0, include_min=False)
    denom = 1.0 - contraction_rate(m, min(alpha, limit))
    if denom <= 0.0 or alpha >= limit:
        return math.inf
    return alpha * lam / denom


def verify_robustness(w, op, base_measurement, trials=100, perturb_scale=1e-2, cfg=None, seed=0,
                      m=None, margin_samples=500):
    """Compare measured fixed-point sensitivity against :func:`robustness_bound`.

    Each trial adds complex Gaussian noise of relative norm ``perturb_scale``
    to the measurement and records ``||f*(a) - f*(b)|| / ||a - b||``. ``m``
    defaults to the sampled margin from :func:`monotone_margin` around the
    base fixed point. When ``cfg.alpha`` is not admissible for that margin the
    bound is infinite and ``report.certified`` is false.
    """
    from .solver import SolverConfig

    cfg = cfg or SolverConfig()
    rng = check_random_state(seed)
    base = solve_fixed_point(w, op, base_measurement, cfg=cfg)
    if not base.converged:
        raise ConvergenceError("solver did not converge on the base measurement",
                               residual=base.final_residual, iterations=base.nFE)
    if m is None:
        spec = SamplingSpec(shape=op.shape, scale=float(np.abs(base.solution).mean()) or 1.0,
                            anchors=(base.solution,))
        m = monotone_margin(w, margin_samples, seed=rng.integers(2 ** 32), sampling_spec=spec).m_hat
    m = min(float(m), 1.0)
    if m > 0.0 and cfg.alpha < step_size_bound(m):
        bound = robustness_bound(cfg.alpha, cfg.lam, m)
    else:
        bound = math.inf
    b = np.asarray(base_measurement)
    ratios, skipped, non_conv = [], 0, 0
    for _ in range(trials):
        noise = rng.standard_normal(b.shape) + 1j * rng.standard_normal(b.shape)
        n = np.linalg.norm(noise)
        delta = noise * (perturb_scale * np.linalg.norm(b) / n) if n > 0 else noise
        dn = np.linalg.norm(delta)
        if dn == 0.0:
            skipped += 1
            continue
        res = solve_fixed_point(w, op, b + delta, cfg=cfg)
        if not res.converged:
            non_conv += 1
        ratios.append(float(np.linalg.norm(res.solution - base.solution) / dn))
    max_ratio = max(ratios) if ratios else 0.0
    return RobustnessReport(bound_factor=bound, empirical_ratios=ratios, max_ratio=max_ratio,
                            violated=max_ratio > bound * (1 + 1e-6), m_used=m, skipped=skipped,
                            non_converged=non_conv)
