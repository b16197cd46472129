"""``mol`` command line: train, reconstruct, verify and bench.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure,
4 verification failure. ``MOL_THREADS`` caps the BLAS thread pool.
"""
import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import local_lipschitz, monotone_margin, SamplingSpec, verify_robustness
from .config import ExperimentConfig, load_config
from .exceptions import ConfigError, ConvergenceError, MOLError, NumericError, SolverError
from .fileio import read_checkpoint, read_image, read_mask, write_checkpoint, write_image
from .linops import IdentityOp, MaskedFourierOp, MultiCoilFourierOp, make_coil_maps, make_mask
from .network import global_lipschitz_bound, init_weights
from .solver import (BufferMeter, SolverConfig, contraction_rate, deq_backward,
                     fixed_point_residual, solve_fixed_point, step_size_bound)
from .training import (ComplexitySpec, evaluate, init_state, make_synthetic_dataset, named_seed,
                       psnr, ssim, train_epoch, unrolled_reference)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

HISTORY_FIELDS = ["epoch", "train_loss", "val_psnr", "val_ssim", "mean_lip", "mean_nFE",
                  "diverged_batches"]
BENCH_FIELDS = ["mode", "unrolls", "buffers", "seconds", "nFE"]


def bundled_checkpoint():
    """Path of the shipped spectrally normalized checkpoint (bound 0.9, 16 channels)."""
    return resources.files("mol") / "data" / "constrained.molnet"


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Tracks an output directory and writes its manifest."""

    def __init__(self, command, cfg, out, config_path):
        self.command = command
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.started = datetime.now(timezone.utc).isoformat()
        self.files = []
        if config_path is not None:
            self.copy("config.input.json", Path(config_path).read_bytes())
        self.write_text("config.resolved.json", cfg.to_json())

    def path(self, name):
        p = self.out / name
        if name not in self.files:
            self.files.append(name)
        return p

    def write_text(self, name, text):
        self.path(name).write_text(text, encoding="utf-8")

    def copy(self, name, data):
        self.path(name).write_bytes(data)

    def finish(self, status):
        manifest = {
            "command": self.command,
            "status": status,
            "config": self.cfg.to_dict(),
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "version": __version__,
            "files": [{"path": f, "sha256": _sha256(self.out / f)} for f in self.files],
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _dataset(cfg):
    d, o = cfg.dataset, cfg.operator
    spec = ComplexitySpec(min_shapes=d.min_shapes, max_shapes=d.max_shapes)
    return make_synthetic_dataset(d.count, tuple(d.shape), spec, acceleration=o.acceleration,
                                  noise_sigma=d.noise_sigma, seed=named_seed(cfg.seed, "dataset"),
                                  n_coils=o.n_coils, density_decay=o.density_decay,
                                  split_fractions=tuple(d.split_fractions))


def _problem_operator(cfg, seed, shape=None):
    shape = tuple(shape or cfg.dataset.shape)
    mask = make_mask(shape, cfg.operator.acceleration, cfg.operator.density_decay, seed=seed)
    if cfg.operator.n_coils == 1:
        return MaskedFourierOp(mask=mask)
    return MultiCoilFourierOp(mask=mask, coil_maps=make_coil_maps(shape, cfg.operator.n_coils))


def _load_weights(path, cfg):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        w = read_checkpoint(path)
    except (ValueError, OSError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc
    shape = tuple(cfg.dataset.shape)
    if w.image_shape != shape:
        w = replace(w, image_shape=shape, spectral_state=None)
    return w


# --- train -----------------------------------------------------------------

def run_train(cfg, out, config_path=None):
    run = Run("train", cfg, out, config_path)
    data = _dataset(cfg)
    train_cfg, solver_cfg = cfg.train_config(), cfg.solver_config()
    state = init_state(init_weights(cfg.network_config(), named_seed(cfg.seed, "init")), train_cfg)
    write_checkpoint(run.path("checkpoint_0000.molnet"), state.weights)
    history = io.StringIO()
    writer = csv.DictWriter(history, HISTORY_FIELDS, lineterminator="\n")
    writer.writeheader()
    status = EXIT_OK
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            state = train_epoch(state, data, solver_cfg, train_cfg)
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in state.history[-1].items()})
            run.write_text("history.csv", history.getvalue())
            if epoch % cfg.training.checkpoint_every == 0 or epoch == train_cfg.epochs:
                write_checkpoint(run.path(f"checkpoint_{epoch:04d}.molnet"), state.weights)
    except (ConvergenceError, NumericError) as exc:
        print(f"mol train: {exc}", file=sys.stderr)
        status = EXIT_NUMERIC
    if train_cfg.epochs > 0:
        run.write_text("history.csv", history.getvalue())
        if status == EXIT_OK:
            ev = evaluate(state.weights, data, "test", solver_cfg)
            summary = {k: ev[k] for k in ("psnr", "ssim", "nFE")}
            run.write_text("test_metrics.json", json.dumps(summary, indent=2) + "\n")
    write_checkpoint(run.path("final.molnet"), state.weights)
    run.finish(status)
    return status


# --- reconstruct -----------------------------------------------------------

def _operator_for(cfg, mask_path, meas_shape, image_shape):
    if mask_path is None:
        if meas_shape[0] != 1:
            raise ConfigError("a measurement without --mask must be a single identity row")
        return IdentityOp(image_shape)
    pattern = read_mask(mask_path)
    if cfg.operator.n_coils == 1:
        return MaskedFourierOp(mask=pattern)
    return MultiCoilFourierOp(mask=pattern, coil_maps=make_coil_maps(pattern.shape, cfg.operator.n_coils))


def run_reconstruct(cfg, out, checkpoint, measurements, masks=None, ground_truth=None,
                    config_path=None):
    """Reconstruct each measurement file. Without masks the operator is the identity."""
    w = _load_weights(checkpoint, cfg)
    masks = masks or [None] * len(measurements)
    ground_truth = ground_truth or [None] * len(measurements)
    if len(masks) == 1 and len(measurements) > 1:
        masks = masks * len(measurements)
    if len(masks) != len(measurements) or len(ground_truth) != len(measurements):
        raise ConfigError("need one mask and one ground truth (or none) per measurement")
    solver_cfg = cfg.solver_config()
    run = Run("reconstruct", cfg, out, config_path)
    failures = 0
    for i, (mpath, kpath, gpath) in enumerate(zip(measurements, masks, ground_truth)):
        b = read_image(mpath)
        op = _operator_for(cfg, kpath, b.shape, tuple(cfg.dataset.shape))
        if op.range_shape != b.shape:
            raise ConfigError(f"{mpath}: measurement shape {b.shape} does not match operator {op.range_shape}")
        try:
            res = solve_fixed_point(w, op, b, cfg=solver_cfg)
        except NumericError as exc:
            failures += 1
            record = {"input": str(mpath), "converged": False, "error": str(exc)}
        else:
            failures += not res.converged
            write_image(run.path(f"recon_{i:04d}.molimg"), res.solution)
            record = {
                "input": str(mpath),
                "nFE": res.nFE,
                "converged": res.converged,
                "diverged": res.diverged,
                "final_update": res.final_residual,
                "residual": fixed_point_residual(res.solution, w, op, b, solver_cfg.lam),
            }
            if gpath is not None:
                ref = read_image(gpath)
                record["psnr"] = psnr(np.abs(res.solution), np.abs(ref))
                record["ssim"] = ssim(res.solution, ref)
        run.write_text(f"recon_{i:04d}.json", json.dumps(record, indent=2) + "\n")
    status = EXIT_NUMERIC if measurements and failures == len(measurements) else EXIT_OK
    run.finish(status)
    return status


# --- verify ----------------------------------------------------------------

def _check(name, passed, value, threshold, **detail):
    return {"name": name, "passed": bool(passed), "value": value, "threshold": threshold, **detail}


def adjoint_check(op, trials, rng, tol=1e-10):
    """Largest relative mismatch of ``<Ax, y>`` and ``<x, A^H y>``."""
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(op.shape) + 1j * rng.standard_normal(op.shape)
        y = rng.standard_normal(op.range_shape) + 1j * rng.standard_normal(op.range_shape)
        lhs, rhs = np.vdot(y, op.apply(x)), np.vdot(op.adjoint(y), x)
        scale = max(abs(lhs), abs(rhs))
        worst = max(worst, abs(lhs - rhs) / scale if scale > 0 else abs(lhs - rhs))
    return _check("adjoint", worst <= tol, worst, tol)


def q_solve_check(op, alpha, lam, rng, tol=1e-8):
    """Relative residual of ``Q z = y`` for ``z = solve_q(y)``."""
    y = rng.standard_normal(op.shape) + 1j * rng.standard_normal(op.shape)
    z = op.solve_q(y, alpha, lam)
    err = float(np.linalg.norm(z + alpha * lam * op.gram(z) - y) / np.linalg.norm(y))
    return _check("q_solve", err <= tol, err, tol)


def _gradient_check(w, cfg, rng):
    """DEQ gradient against central differences on a small problem."""
    a = cfg.analysis
    shape = (8, 8)
    op = _problem_operator(cfg, int(rng.integers(2 ** 32)), shape)
    x = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    b = op.apply(x)
    target = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    small = replace(w, image_shape=shape, spectral_state=None)
    tight = replace(cfg.solver_config(), tol_fwd=1e-13, tol_bwd=1e-13, max_iter_fwd=5000,
                    max_iter_bwd=5000, anderson_depth=5, anderson_backward=True)

    def objective(weights):
        sol = solve_fixed_point(weights, op, b, cfg=tight).solution
        return float(np.sum(np.abs(sol - target) ** 2))

    res = solve_fixed_point(small, op, b, cfg=tight)
    grad, _ = deq_backward(small, op, b, res.solution, 2.0 * (res.solution - target), tight)
    gv, v = grad.vector(), small.parameters_vector()
    # probe the largest-gradient entries so the comparison is not swamped by rounding
    idx = np.argsort(-np.abs(gv))[:a.gradcheck_params]
    worst = 0.0
    for i in idx:
        h = 1e-6 * max(1.0, abs(v[i]))
        vp, vm = v.copy(), v.copy()
        vp[i] += h
        vm[i] -= h
        fd = (objective(small.with_parameters(vp)) - objective(small.with_parameters(vm))) / (2 * h)
        worst = max(worst, abs(fd - gv[i]) / max(abs(fd), abs(gv[i]), 1e-12))
    return _check("gradient", worst <= a.gradcheck_tol, worst, a.gradcheck_tol)


def run_checks(w, cfg, seed=None):
    """Run the invariant suite for ``w`` under ``cfg``; returns a list of check records."""
    a = cfg.analysis
    solver_cfg = cfg.solver_config()
    rng = np.random.default_rng(named_seed(cfg.seed if seed is None else seed, "verify"))
    ops = [_problem_operator(cfg, named_seed(cfg.seed, "verify-mask", i)) for i in range(a.problems)]
    checks = []
    for op in ops[:1] + [MaskedFourierOp(mask=np.zeros(op.shape, bool)) for op in ops[:1]]:
        checks.append(adjoint_check(op, a.adjoint_trials, rng))
        checks.append(q_solve_check(op, solver_cfg.alpha, solver_cfg.lam, rng))

    m = solver_cfg.m
    bound = global_lipschitz_bound(w, power_iters=100)
    m_cert = 1.0 - bound
    checks.append(_check("lipschitz_certificate", bound <= 1.0 - m + 1e-6, bound, 1.0 - m))

    rate = contraction_rate(m, min(solver_cfg.alpha, step_size_bound(m)))
    worst_ratio, residual, lip_excess, non_conv, problems = 0.0, 0.0, -math.inf, 0, []
    for i, op in enumerate(ops):
        x_true = rng.standard_normal(op.shape) + 1j * rng.standard_normal(op.shape)
        b = op.apply(x_true)
        res = solve_fixed_point(w, op, b, cfg=replace(solver_cfg, anderson_depth=0))
        tr = res.residual_trace
        ratios = [tr[k] / tr[k - 1] for k in range(3, len(tr)) if tr[k - 1] > 0]
        worst_ratio = max([worst_ratio] + ratios)
        non_conv += not res.converged
        if res.converged:
            residual = max(residual, fixed_point_residual(res.solution, w, op, b, solver_cfg.lam))
            problems.append((op, b, res.solution))
            lip = local_lipschitz(w, res.solution, steps=a.lip_steps,
                                  seed=named_seed(cfg.seed, "ascent", i))
            lip_excess = max(lip_excess, lip.value - bound)
    checks.append(_check("contraction", bound <= 1.0 - m + 1e-6 and non_conv == 0
                         and worst_ratio <= rate + 0.05, worst_ratio, rate + 0.05,
                         non_converged=non_conv, lipschitz_bound=bound))
    checks.append(_check("fixed_point_residual", bool(problems) and residual <= 10 * solver_cfg.tol_fwd,
                         residual, 10 * solver_cfg.tol_fwd))
    checks.append(_check("local_lipschitz", bool(problems) and lip_excess <= 1e-3, lip_excess, 1e-3))

    if problems:
        op, b, x = problems[0]
        spec = SamplingSpec(shape=op.shape, scale=float(np.abs(x).mean()) or 1.0, anchors=(x,))
        mono = monotone_margin(w, a.margin_samples, seed=named_seed(cfg.seed, "margin"),
                               sampling_spec=spec)
        checks.append(_check("monotone_margin", mono.m_hat >= m - 0.02, mono.m_hat, m - 0.02))
        try:
            rep = verify_robustness(w, op, b, trials=a.robustness_trials, perturb_scale=a.perturb_scale,
                                    cfg=solver_cfg, seed=named_seed(cfg.seed, "trials"),
                                    m=max(m_cert, 1e-12))
            checks.append(_check("robustness", rep.certified and not rep.violated, rep.max_ratio,
                                 rep.bound_factor, m_used=rep.m_used, certified=rep.certified))
        except (ConvergenceError, NumericError) as exc:
            checks.append(_check("robustness", False, float("nan"), float("nan"), error=str(exc)))
    else:
        checks.append(_check("monotone_margin", False, float("nan"), m - 0.02, error="no converged problem"))
        checks.append(_check("robustness", False, float("nan"), float("nan"), error="no converged problem"))
    try:
        checks.append(_gradient_check(w, cfg, rng))
    except (ConvergenceError, NumericError) as exc:
        checks.append(_check("gradient", False, float("nan"), a.gradcheck_tol, error=str(exc)))
    return checks


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def run_verify(cfg, out, checkpoint=None, config_path=None):
    w = _load_weights(checkpoint or bundled_checkpoint(), cfg)
    run = Run("verify", cfg, out, config_path)
    checks = run_checks(w, cfg)
    failures = [c["name"] for c in checks if not c["passed"]]
    report = {"checks": checks, "failures": len(failures), "failed": failures}
    run.write_text("verify.json", json.dumps(_json_safe(report), indent=2) + "\n")
    status = EXIT_VERIFY if failures else EXIT_OK
    run.finish(status)
    return status


# --- bench -----------------------------------------------------------------

def bench_rows(w, cfg):
    """Buffer counts and timings for the DEQ solver and the unrolled reference."""
    a = cfg.analysis
    solver_cfg = cfg.solver_config()
    rng = np.random.default_rng(named_seed(cfg.seed, "bench"))
    rows = []
    for r in range(a.bench_repeats):
        op = _problem_operator(cfg, named_seed(cfg.seed, "bench-mask", r))
        x_true = rng.standard_normal(op.shape) + 1j * rng.standard_normal(op.shape)
        b = op.apply(x_true)
        target = rng.standard_normal(op.shape) + 1j * rng.standard_normal(op.shape)
        meter = BufferMeter()
        t0 = time.perf_counter()
        res = solve_fixed_point(w, op, b, cfg=solver_cfg, meter=meter)
        deq_backward(w, op, b, res.solution, res.solution - target, solver_cfg, meter=meter)
        rows.append({"mode": "deq", "unrolls": 0, "buffers": meter.peak,
                     "seconds": time.perf_counter() - t0, "nFE": res.nFE})
        for k in a.bench_unrolls:
            t0 = time.perf_counter()
            x, _, peak = unrolled_reference(w, op, b, k, solver_cfg, cotangent=target)
            rows.append({"mode": "unrolled", "unrolls": k, "buffers": peak,
                         "seconds": time.perf_counter() - t0, "nFE": k})
    return rows


def run_bench(cfg, out, checkpoint=None, config_path=None):
    w = _load_weights(checkpoint or bundled_checkpoint(), cfg)
    run = Run("bench", cfg, out, config_path)
    rows = bench_rows(w, cfg)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, BENCH_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    run.write_text("bench.csv", buf.getvalue())
    deq = max(r["buffers"] for r in rows if r["mode"] == "deq")
    unrolled = {r["unrolls"]: r["buffers"] for r in rows if r["mode"] == "unrolled"}
    summary = {"deq_buffers": deq, "unrolled_buffers": unrolled,
               "ratio_max_unrolls": unrolled[max(unrolled)] / deq if unrolled and deq else None}
    run.write_text("bench.json", json.dumps({str(k) if isinstance(k, int) else k: v
                                             for k, v in summary.items()}, indent=2) + "\n")
    run.finish(EXIT_OK)
    return EXIT_OK


# --- entry point -----------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="mol", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "reconstruct", "verify", "bench"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--checkpoint", help="MOLNET checkpoint (verify/bench default: bundled)")
        p.add_argument("--seed", type=int, help="override the configuration seed")
        if name == "reconstruct":
            p.add_argument("--measurement", nargs="+", required=True, help="MOLIMG measurement files")
            p.add_argument("--mask", nargs="+", help="MOLIMG mask per measurement (omit for identity)")
            p.add_argument("--ground-truth", nargs="+", help="MOLIMG reference images")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = os.environ.get("MOL_THREADS")
    try:
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ValueError
    except ValueError:
        print(f"mol: MOL_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed).validate()
        with threadpool_limits(limits=limit):
            if args.command == "train":
                if args.checkpoint:
                    raise ConfigError("train does not take --checkpoint")
                return run_train(cfg, args.out, args.config)
            if args.command == "reconstruct":
                if not args.checkpoint:
                    raise ConfigError("reconstruct requires --checkpoint")
                return run_reconstruct(cfg, args.out, args.checkpoint, args.measurement, args.mask,
                                       args.ground_truth, args.config)
            if args.command == "verify":
                return run_verify(cfg, args.out, args.checkpoint, args.config)
            return run_bench(cfg, args.out, args.checkpoint, args.config)
    except ConfigError as exc:
        print(f"mol {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ConvergenceError, SolverError) as exc:
        print(f"mol {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MOLError, ValueError, OSError) as exc:
        print(f"mol {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
