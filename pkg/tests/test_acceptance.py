"""Exit criteria. Each test records one PASS/FAIL line shown in the terminal summary.

The desk-scale training comparison (criteria 8 and 10) trains two networks
through the command line once per session; it dominates the runtime.
"""
import csv
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import spearmanr

from mol.analysis import SamplingSpec, local_lipschitz, monotone_margin, robustness_bound, verify_robustness
from mol.cli import bundled_checkpoint, main
from mol.config import load_config
from mol.fileio import read_checkpoint
from mol.linops import DenseGaussianOp, IdentityOp, MaskedFourierOp, MultiCoilFourierOp, make_coil_maps, make_mask
from mol.network import (NetworkConfig, NetworkWeights, global_lipschitz_bound, identity_like_weights,
                         init_weights, layer_spectral_norms, spectral_normalize, zero_weights)
from mol.solver import (BufferMeter, SolverConfig, contraction_rate, deq_backward, fixed_point_residual,
                        solve_fixed_point, step_size_bound)
from mol.training import evaluate, make_synthetic_dataset, named_seed, unrolled_reference

pytestmark = pytest.mark.acceptance

CONFIGS = __import__("pathlib").Path(__file__).resolve().parents[1] / "configs"


def crandn(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def dense_of(op):
    n = op.shape[0] * op.shape[1]
    return np.stack([op.apply(np.eye(n)[:, j].reshape(op.shape)).ravel() for j in range(n)], axis=1)


def with_bound(w, target, power_iters=200):
    """Rescale all kernels uniformly so the layer-norm product equals ``target``."""
    for _ in range(3):
        bound = float(np.prod(layer_spectral_norms(w, power_iters)[0]))
        w = w.scaled((target / bound) ** (1.0 / w.num_layers))
    return replace(w, spectral_state=None)


def tight_net(shape, gain, seed, noise=0.05):
    """Identity-like network with channel mixing noise; its bound is nearly attained."""
    w = identity_like_weights(NetworkConfig(channels=4, image_shape=shape), 1.0, noise=noise, seed=seed)
    return with_bound(w, gain)


def random_problem(rng, shape, seed, acceleration=4.0):
    op = MaskedFourierOp(mask=make_mask(shape, acceleration, seed=seed))
    return op, op.apply(crandn(rng, shape))


# --- 1 ---------------------------------------------------------------------

def test_criterion_01_contraction(report):
    t0 = time.perf_counter()
    m = 0.1
    alpha = 0.9 * step_size_bound(m)
    rate = contraction_rate(m, alpha)
    fresh = init_weights(NetworkConfig(channels=8, image_shape=(32, 32)), 11).scaled(2.0)
    nets = [read_checkpoint(bundled_checkpoint()), spectral_normalize(fresh, 1 - m, 200)]
    bounds = [global_lipschitz_bound(w, 200) for w in nets]
    rng = np.random.default_rng(1)
    worst, failures = 0.0, 0
    for i in range(20):
        w = nets[i % 2]
        op, b = random_problem(rng, (32, 32), named_seed(1, i))
        res = solve_fixed_point(w, op, b, cfg=SolverConfig(lam=1.0, m=m, alpha=alpha, tol_fwd=1e-6,
                                                           max_iter_fwd=200))
        tr = res.residual_trace
        worst = max([worst] + [tr[k] / tr[k - 1] for k in range(3, len(tr))])
        failures += not res.converged
    elapsed = time.perf_counter() - t0
    ok = max(bounds) <= (1 - m) * (1 + 1e-4) and worst <= rate + 0.05 and failures == 0 and elapsed <= 120
    assert report(1, ok, f"max ratio {worst:.4f} <= {rate + 0.05:.4f}, non-converged {failures}/20, "
                         f"bounds {max(bounds):.4f}, {elapsed:.1f}s")


# --- 2 ---------------------------------------------------------------------

def test_criterion_02_fixed_point_correctness(report):
    rng = np.random.default_rng(2)
    tol = 1e-6
    worst_res = 0.0
    w = read_checkpoint(bundled_checkpoint())
    for i in range(10):
        op, b = random_problem(rng, (32, 32), named_seed(2, i))
        cfg = SolverConfig(lam=10.0, m=0.1, tol_fwd=tol, anderson_depth=5 if i % 2 else 0)
        res = solve_fixed_point(w, op, b, cfg=cfg)
        if res.converged:
            worst_res = max(worst_res, fixed_point_residual(res.solution, w, op, b, cfg.lam))
    shape = (8, 8)
    ops = [IdentityOp(shape), MaskedFourierOp(mask=make_mask(shape, 2.0, seed=3)),
           DenseGaussianOp.random(40, shape, seed=4, complex_valued=True).normalized(),
           MultiCoilFourierOp(mask=make_mask(shape, 3.0, seed=5), coil_maps=make_coil_maps(shape, 4))]
    zero = zero_weights(NetworkConfig(channels=2, image_shape=shape))
    worst_err = 0.0
    for op in ops:
        for lam in (0.5, 1.0, 4.0):
            b = crandn(rng, op.range_shape)
            a = dense_of(op)
            ref = np.linalg.solve(np.eye(64) + lam * a.conj().T @ a, lam * a.conj().T @ b.ravel())
            res = solve_fixed_point(zero, op, b, cfg=SolverConfig(lam=lam, m=0.5, tol_fwd=1e-10, max_iter_fwd=5000))
            worst_err = max(worst_err, np.linalg.norm(res.solution.ravel() - ref) / np.linalg.norm(ref))
    ok = worst_res <= 10 * tol and worst_err <= 1e-6
    assert report(2, ok, f"max residual {worst_res:.2e} <= {10 * tol:.0e}, H=0 closed-form error {worst_err:.2e}")


# --- 3 ---------------------------------------------------------------------

def test_criterion_03_implicit_gradient(report):
    t0 = time.perf_counter()
    shape = (8, 8)
    rng = np.random.default_rng(3)
    w = init_weights(NetworkConfig(num_layers=5, channels=8, activation="leaky_relu", image_shape=shape), 3)
    w = NetworkWeights(kernels=w.kernels, biases=tuple(0.05 * rng.standard_normal(b.shape) for b in w.biases),
                       activation=w.activation, slope=w.slope, image_shape=shape)
    w = spectral_normalize(w, 0.9)
    op = MultiCoilFourierOp(mask=make_mask(shape, 2.0, seed=3), coil_maps=make_coil_maps(shape, 4))
    b = op.apply(crandn(rng, shape))
    target = crandn(rng, shape)
    cfg = SolverConfig(lam=2.0, m=0.5, tol_fwd=1e-13, tol_bwd=1e-13, max_iter_fwd=5000, max_iter_bwd=5000,
                       anderson_depth=5, anderson_backward=True)

    def objective(weights):
        return float(np.sum(np.abs(solve_fixed_point(weights, op, b, cfg=cfg).solution - target) ** 2))

    x = solve_fixed_point(w, op, b, cfg=cfg).solution
    grad, _ = deq_backward(w, op, b, x, 2 * (x - target), cfg)
    gv, v = grad.vector(), w.parameters_vector()
    idx = rng.choice(v.size, 20, replace=False)
    fd = []
    for i in idx:
        h = 1e-6
        vp, vm = v.copy(), v.copy()
        vp[i] += h
        vm[i] -= h
        fd.append((objective(w.with_parameters(vp)) - objective(w.with_parameters(vm))) / (2 * h))
    fd = np.array(fd)
    fd_err = np.linalg.norm(fd - gv[idx]) / np.linalg.norm(fd)
    _, g_unrolled, _ = unrolled_reference(w, op, b, 600, cfg, cotangent=2 * (x - target))
    unr_err = (g_unrolled - grad).norm() / grad.norm()
    elapsed = time.perf_counter() - t0
    ok = fd_err <= 1e-3 and unr_err <= 1e-4 and elapsed <= 300
    assert report(3, ok, f"finite-difference rel. error {fd_err:.2e} <= 1e-3, unrolled rel. error "
                         f"{unr_err:.2e} <= 1e-4, {elapsed:.1f}s")


# --- 4 ---------------------------------------------------------------------

def test_criterion_04_robustness_bound(report):
    w = read_checkpoint(bundled_checkpoint())
    rng = np.random.default_rng(4)
    op, b = random_problem(rng, (32, 32), 4)
    cfg = SolverConfig(lam=10.0, m=0.1, tol_fwd=1e-8, max_iter_fwd=2000, anderson_depth=5)
    rep = verify_robustness(w, op, b, trials=100, perturb_scale=1e-2, cfg=cfg, seed=4, margin_samples=1000)
    m_hat = rep.m_used
    limit = robustness_bound(1e-6 * step_size_bound(m_hat), cfg.lam, m_hat)
    limit_err = abs(limit - cfg.lam / m_hat) / (cfg.lam / m_hat)
    violations = sum(r > rep.bound_factor * (1 + 1e-6) for r in rep.empirical_ratios)
    ok = (len(rep.empirical_ratios) == 100 and violations == 0 and not rep.violated and rep.certified
          and limit_err <= 1e-3)
    assert report(4, ok, f"{violations} violations in {len(rep.empirical_ratios)} trials (max ratio "
                         f"{rep.max_ratio:.4f}, bound {rep.bound_factor:.4f}, m_hat {m_hat:.4f}), "
                         f"small-alpha limit error {limit_err:.1e}")


# --- 5 ---------------------------------------------------------------------

def test_criterion_05_monotone_margin(report):
    m = 0.1
    shape = (32, 32)
    nets = [read_checkpoint(bundled_checkpoint()),
            spectral_normalize(tight_net(shape, 1.3, 5), 1 - m, 200),
            spectral_normalize(init_weights(NetworkConfig(channels=8, image_shape=shape), 5).scaled(3.0), 1 - m, 200)]
    rng = np.random.default_rng(5)
    worst_m, worst_gap = math.inf, -math.inf
    for k, w in enumerate(nets):
        op, b = random_problem(rng, shape, named_seed(5, k))
        x = solve_fixed_point(w, op, b, cfg=SolverConfig(lam=10.0, m=m, anderson_depth=5)).solution
        spec = SamplingSpec(shape=shape, scale=float(np.abs(x).mean()), anchors=(x,))
        est = monotone_margin(w, samples=1000, seed=k, sampling_spec=spec)
        worst_m = min(worst_m, est.m_hat)
        worst_gap = max(worst_gap, est.lipschitz_f - (2 - est.m_hat))
    ok = worst_m >= m - 0.02 and worst_gap <= 0.02
    assert report(5, ok, f"min m_hat {worst_m:.4f} >= {m - 0.02:.2f}, max Lip(F) - (2 - m_hat) "
                         f"{worst_gap:.4f} <= 0.02")


# --- 6 ---------------------------------------------------------------------

def test_criterion_06_alpha_one_regime(report):
    shape = (32, 32)
    rng = np.random.default_rng(6)
    small_ok = large_bad = 0
    for i in range(20):
        op, b = random_problem(rng, shape, named_seed(6, i))
        cfg = SolverConfig(lam=1.0, m=0.1, alpha=1.0, tol_fwd=1e-6, max_iter_fwd=200)
        small = tight_net(shape, 0.23, seed=i)
        large = tight_net(shape, 1.5, seed=100 + i)
        small_ok += solve_fixed_point(small, op, b, cfg=cfg).converged
        res = solve_fixed_point(large, op, b, cfg=cfg)
        large_bad += res.diverged or not res.converged
    ok = small_ok >= 19 and large_bad >= 18
    assert report(6, ok, f"bound 0.23 converged {small_ok}/20 (need 19), bound 1.5 diverged or capped "
                         f"{large_bad}/20 (need 18)")


# --- 7 ---------------------------------------------------------------------

def test_criterion_07_memory(report):
    w = read_checkpoint(bundled_checkpoint())
    rng = np.random.default_rng(7)
    op, b = random_problem(rng, (32, 32), 7)
    target = crandn(rng, (32, 32))
    peaks, nfes = [], []
    for tol in (1e-2, 1e-4, 1e-6, 1e-8):
        cfg = SolverConfig(lam=10.0, m=0.1, tol_fwd=tol, tol_bwd=tol, max_iter_fwd=2000, max_iter_bwd=2000)
        meter = BufferMeter()
        res = solve_fixed_point(w, op, b, cfg=cfg, meter=meter)
        deq_backward(w, op, b, res.solution, res.solution - target, cfg, meter=meter)
        peaks.append(meter.peak)
        nfes.append(res.nFE)
    _, _, unrolled = unrolled_reference(w, op, b, 10, SolverConfig(lam=10.0, m=0.1), cotangent=target)
    ratio = unrolled / peaks[0]
    ok = len(set(peaks)) == 1 and len(set(nfes)) > 1 and 8 <= ratio <= 12
    assert report(7, ok, f"DEQ buffers {peaks} at nFE {nfes}, unrolled(10) {unrolled}, ratio {ratio:.2f} in [8, 12]")


# --- 8 and 10 --------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    codes = {}
    for name in ("desk_mol_lr", "desk_mol_sn"):
        codes[name] = main(["train", "--config", str(CONFIGS / f"{name}.json"), "--out", str(root / name)])
    elapsed = time.perf_counter() - t0
    cfg = load_config(CONFIGS / "desk_mol_lr.json")
    d, o = cfg.dataset, cfg.operator
    data = make_synthetic_dataset(d.count, tuple(d.shape), acceleration=o.acceleration, noise_sigma=d.noise_sigma,
                                  seed=named_seed(cfg.seed, "dataset"), n_coils=o.n_coils,
                                  density_decay=o.density_decay, split_fractions=tuple(d.split_fractions))
    baseline = evaluate(zero_weights(cfg.network_config()), data, "test", cfg.solver_config())["psnr"]
    return {"root": root, "codes": codes, "seconds": elapsed, "baseline": baseline, "config": cfg}


def _history(path):
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def test_criterion_08_desk_scale_ordering(desk_runs, report):
    root, cfg = desk_runs["root"], desk_runs["config"]
    lr = json.loads((root / "desk_mol_lr" / "test_metrics.json").read_text())["psnr"]
    sn = json.loads((root / "desk_mol_sn" / "test_metrics.json").read_text())["psnr"]
    base = desk_runs["baseline"]
    epochs = max(load_config(CONFIGS / f"{n}.json").training.epochs for n in ("desk_mol_lr", "desk_mol_sn"))
    ok = (all(c == 0 for c in desk_runs["codes"].values()) and cfg.dataset.count == 200
          and cfg.operator.acceleration == 4.0 and epochs <= 50 and lr >= sn + 0.5 and lr >= base + 1.0
          and desk_runs["seconds"] <= 1800)
    assert report(8, ok, f"test PSNR MOL-LR {lr:.2f} dB, MOL-SN {sn:.2f} dB, H=0 {base:.2f} dB "
                         f"({epochs} epochs, {desk_runs['seconds']:.0f}s for both runs)")


def test_criterion_10_lipschitz_nfe_rank_correlation(desk_runs, report):
    hist = _history(desk_runs["root"] / "desk_mol_lr" / "history.csv")
    rho = spearmanr([h["mean_lip"] for h in hist], [h["mean_nFE"] for h in hist]).statistic
    ok = len(hist) >= 3 and rho >= 0
    assert report(10, ok, f"Spearman rho(mean_lip, mean_nFE) = {rho:.3f} over {len(hist)} MOL-LR epochs")


def test_mol_lr_lipschitz_estimate_stays_bounded(desk_runs):
    hist = _history(desk_runs["root"] / "desk_mol_lr" / "history.csv")
    assert max(h["mean_lip"] for h in hist) <= 0.95


# --- 9 ---------------------------------------------------------------------

def test_criterion_09_lipschitz_estimator(report):
    rng = np.random.default_rng(9)
    shape = (16, 16)
    diag = NetworkWeights(kernels=(np.diag([2.0, 1.0]).reshape(2, 2, 1, 1),), biases=(np.zeros(2),),
                          activation="identity", image_shape=shape)
    kernel = rng.standard_normal((2, 2, 3, 3))
    conv = NetworkWeights(kernels=(kernel,), biases=(np.zeros(2),), activation="identity", image_shape=shape)
    sigma_conv = layer_spectral_norms(conv, 2000)[0][0]
    linear_err = 0.0
    for w, sigma in ((diag, 2.0), (conv, sigma_conv)):
        est = local_lipschitz(w, crandn(rng, shape), steps=50, seed=1)
        linear_err = max(linear_err, abs(est.value_squared - sigma ** 2) / sigma ** 2)

    nets = [read_checkpoint(bundled_checkpoint()), tight_net((32, 32), 0.9, 9)]
    bounds = [global_lipschitz_bound(w, 200) for w in nets]
    excess = -math.inf
    for i in range(50):
        w, bound = nets[i % 2], bounds[i % 2]
        op, b = random_problem(rng, (32, 32), named_seed(9, i))
        x = solve_fixed_point(w, op, b, cfg=SolverConfig(lam=10.0, m=0.1, anderson_depth=5)).solution
        est = local_lipschitz(w, x, steps=10, seed=i)
        excess = max(excess, est.value - bound)
    ok = linear_err <= 1e-2 and excess <= 1e-3
    assert report(9, ok, f"linear-layer error {linear_err:.2e} <= 1e-2, max(value - bound) over 50 fixed "
                         f"points {excess:.2e} <= 1e-3")
