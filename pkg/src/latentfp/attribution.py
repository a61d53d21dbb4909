"""Key decoding by penalized, multi-start optimization-based inversion."""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .fingerprint import FingerprintConfig, KeyRegistry, embed_batch, project_alpha
from .latent_model import Generator, ImageGrid
from .metrics import MetricHandle, distance_batch
from .postprocess import PostprocessSpec, apply_array

log = logging.getLogger(__name__)

CSV_COLUMNS = ("key_id", "seed_index", "postprocess", "bit_accuracy", "exact_match",
               "nearest_key_id", "nearest_hamming", "residual", "alpha_err_norm", "restarts_failed")


def lhs_initial_guesses(bounds, n: int, rng_seed: int) -> np.ndarray:
    """Latin hypercube sample of ``n`` points inside per-coordinate ``bounds`` (d, 2).

    Each coordinate puts exactly one point in each of ``n`` equal-width strata,
    jittered uniformly inside its stratum.
    """
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    if n < 1:
        raise ValueError("need at least one initial guess")
    lo, hi = bounds[:, 0], bounds[:, 1]
    if np.any(hi < lo):
        raise ValueError("lower bound exceeds upper bound")
    if not len(bounds):
        return np.zeros((n, 0))
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 11]))
    u = qmc.LatinHypercube(len(bounds), seed=rng).random(n)
    return lo + u * (hi - lo)


@dataclass
class OptimizerSettings:
    step_size: float = 0.2
    max_iterations: int = 400
    rel_tol: float = 1e-8
    patience: int = 20
    beta1: float = 0.9
    beta2: float = 0.9
    eps: float = 1e-8
    grow: float = 1.2
    shrink: float = 0.5
    max_step_factor: float = 4.0


@dataclass
class AttributionProblem:
    target: ImageGrid
    cfg: FingerprintConfig
    handle: Generator
    metric: MetricHandle = field(default_factory=MetricHandle)
    restarts: int = 20
    penalty_weight: Optional[float] = None
    settings: OptimizerSettings = field(default_factory=OptimizerSettings)
    rng_seed: int = 0
    tag: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.penalty_weight is not None and self.penalty_weight < 0:
            raise ValueError("penalty_weight must be nonnegative")


@dataclass
class AttributionResult:
    alpha_hat: Optional[np.ndarray]
    phi_relaxed: Optional[np.ndarray]
    phi_hat: Optional[np.ndarray]
    residual: float
    best_restart: int
    per_restart_residuals: list
    iterations_used: list
    penalty_weight: float
    constraint_violation: float = 0.0
    restarts_failed: int = 0
    alpha_error: Optional[float] = None
    # penalized objective of the best restart after every iteration
    objective_trace: Optional[np.ndarray] = None

    @property
    def failed(self) -> bool:
        return self.phi_hat is None


def _violation(alpha, lower, upper) -> np.ndarray:
    return np.maximum(alpha - upper, 0.0) + np.maximum(lower - alpha, 0.0)


class _Objective:
    """Metric between the generated image and the target plus the box penalty, batched over restarts."""

    def __init__(self, problem: AttributionProblem):
        self.p = problem
        cfg = problem.cfg
        self.d_alpha = cfg.d_alpha
        self.target = np.asarray(problem.target, dtype=float)
        self.shape = problem.handle.spec.image_shape
        if self.target.shape != self.shape:
            raise ValueError(f"target shape {self.target.shape} does not match generator output {self.shape}")
        self.lam = 0.0

    def __call__(self, theta):
        cfg, handle = self.p.cfg, self.p.handle
        alpha, phi = theta[:, :self.d_alpha], theta[:, self.d_alpha:]
        W = embed_batch(cfg, alpha, phi)
        n = len(theta)

        def cotangent(Y):
            values, g = distance_batch(self.p.metric, Y.reshape((n,) + self.shape), self.target)
            return values, g.reshape(n, -1)

        with np.errstate(all="ignore"):
            _, values, grad_w = handle.value_and_vjp(W, cotangent)
            over = np.maximum(alpha - cfg.alpha_upper, 0.0)
            under = np.maximum(cfg.alpha_lower - alpha, 0.0)
            pen = np.sum(over**2 + under**2, axis=1)
            grad = np.empty_like(theta)
            grad[:, :self.d_alpha] = grad_w @ cfg.U + 2.0 * self.lam * (over - under)
            grad[:, self.d_alpha:] = cfg.sigma * (grad_w @ cfg.V)
        return values + self.lam * pen, values, grad


def decode(problem: AttributionProblem) -> AttributionResult:
    """Recover ``(alpha, phi)`` from ``problem.target``.

    Every restart runs adaptive-step gradient descent (Adam-style scaling) on
    the penalized objective; trial steps that do not decrease the objective are
    rejected and the restart's step size shrinks, so accepted iterates are
    monotone.  ``phi`` is relaxed to the reals, starts at 0.5 and is rounded at 0.5.
    """
    cfg, s = problem.cfg, problem.settings
    obj = _Objective(problem)
    R = problem.restarts
    alpha0 = lhs_initial_guesses(cfg.bounds, R, problem.rng_seed)
    theta = np.hstack([alpha0, np.full((R, cfg.d_phi), 0.5)])

    f, metric_vals, grad = obj(theta)
    if problem.penalty_weight is None:
        width = float(np.mean(cfg.alpha_upper - cfg.alpha_lower)) if cfg.d_alpha else 1.0
        finite = metric_vals[np.isfinite(metric_vals)]
        init = float(np.mean(finite)) if finite.size else 1.0
        lam = 10.0 * init / max(width, 1e-12) ** 2
    else:
        lam = float(problem.penalty_weight)
    obj.lam = lam
    f, metric_vals, grad = obj(theta)

    failed = ~np.isfinite(f) | ~np.all(np.isfinite(grad), axis=1)
    active = ~failed
    lr = np.full(R, s.step_size)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    t = np.zeros(R)
    fresh = np.ones(R, dtype=bool)
    history = [f.copy()]
    iters = np.zeros(R, dtype=int)

    for it in range(s.max_iterations):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        upd = idx[fresh[idx]]
        t[upd] += 1
        m[upd] = s.beta1 * m[upd] + (1 - s.beta1) * grad[upd]
        v[upd] = s.beta2 * v[upd] + (1 - s.beta2) * grad[upd] ** 2
        mhat = m[idx] / (1 - s.beta1 ** t[idx])[:, None]
        vhat = v[idx] / (1 - s.beta2 ** t[idx])[:, None]
        trial = theta[idx] - lr[idx, None] * mhat / (np.sqrt(vhat) + s.eps)
        f_new, mv_new, g_new = obj(trial)
        ok = np.isfinite(f_new) & np.all(np.isfinite(g_new), axis=1) & (f_new <= f[idx])
        acc, rej = idx[ok], idx[~ok]
        theta[acc], f[acc], metric_vals[acc], grad[acc] = trial[ok], f_new[ok], mv_new[ok], g_new[ok]
        lr[acc] = np.minimum(lr[acc] * s.grow, s.step_size * s.max_step_factor)
        lr[rej] *= s.shrink
        fresh[:] = False
        fresh[acc] = True
        iters[idx] += 1
        history.append(f.copy())
        if it + 1 >= s.patience:
            old = history[-1 - s.patience]
            stalled = (old - f) <= s.rel_tol * np.maximum(np.abs(old), 1e-300)
            active &= ~stalled
        active &= (lr > 1e-14) & (f > 0)

    residuals = [float(x) if not bad else float("nan") for x, bad in zip(f, failed)]
    if failed.all():
        log.warning("all %d restarts failed", R)
        return AttributionResult(None, None, None, float("nan"), -1, residuals, iters.tolist(), lam,
                                 restarts_failed=int(R))
    best = int(np.nanargmin(np.where(failed, np.nan, f)))
    alpha_hat = theta[best, :cfg.d_alpha].copy()
    phi_relaxed = theta[best, cfg.d_alpha:].copy()
    return AttributionResult(
        alpha_hat=alpha_hat,
        phi_relaxed=phi_relaxed,
        phi_hat=(phi_relaxed >= 0.5).astype(int),
        residual=float(f[best]),
        best_restart=best,
        per_restart_residuals=residuals,
        iterations_used=iters.tolist(),
        penalty_weight=lam,
        constraint_violation=float(_violation(alpha_hat, cfg.alpha_lower, cfg.alpha_upper).max(initial=0.0)),
        restarts_failed=int(failed.sum()),
        objective_trace=np.array([h[best] for h in history]),
    )


# -- accuracy harness -----------------------------------------------------

@dataclass
class AccuracyReport:
    rows: list
    accuracy: float
    per_key: dict
    bit_accuracy: float
    mean_alpha_error: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in self.rows:
            writer.writerow(row)
        return buf.getvalue()


def _stream(rng_seed: int, purpose: int, key_id: int, seed_index: int) -> int:
    ss = np.random.SeedSequence([int(rng_seed), purpose, int(key_id), int(seed_index)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def trial_rng(rng_seed, key_id, seed_index) -> np.random.Generator:
    """Generator for the latent seed ``z`` of one (key, seed index) trial."""
    return np.random.default_rng(_stream(rng_seed, 1, key_id, seed_index))


def _run_trial(job):
    (handle, cfg, key, seed_index, postprocess, rng_seed, metric, restarts, settings,
     penalty_weight, decoder, registry) = job
    z = trial_rng(rng_seed, key.id, seed_index).standard_normal(handle.spec.d_z)
    w = handle.map_latent_batch(z[None])
    alpha = project_alpha(cfg, w)[0]
    pixels = handle.evaluate_batch(embed_batch(cfg, alpha[None], key.phi[None]))[0]
    pixels = pixels.reshape(handle.spec.image_shape)
    label = "identity"
    provenance = "generated"
    if postprocess is not None and postprocess.kind != "identity":
        pixels = apply_array(postprocess, pixels, _stream(rng_seed, 2, key.id, seed_index),
                             handle.spec.output_range)
        label = postprocess.label
        provenance = "postprocessed"
    problem = AttributionProblem(
        ImageGrid(pixels, provenance), cfg, handle, metric, restarts, penalty_weight, settings,
        rng_seed=_stream(rng_seed, 3, key.id, seed_index), tag={"key_id": key.id, "seed_index": seed_index},
    )
    result = (decoder or decode)(problem)
    if result.failed:
        bit_acc, exact, err = 0.0, 0, float("nan")
        nearest_id, hamming = -1, -1
    else:
        phi_hat = np.asarray(result.phi_hat)
        bit_acc = float(np.mean(phi_hat == key.phi))
        exact = int(np.array_equal(phi_hat, key.phi.astype(int)))
        nearest, hamming = registry.nearest(phi_hat)
        nearest_id = nearest.id
        err = float(np.linalg.norm(result.alpha_hat - alpha)) if result.alpha_hat is not None else float("nan")
        result.alpha_error = err
    return {
        "key_id": key.id, "seed_index": seed_index, "postprocess": label,
        "bit_accuracy": bit_acc, "exact_match": exact,
        "nearest_key_id": nearest_id, "nearest_hamming": hamming, "residual": result.residual,
        "alpha_err_norm": err, "restarts_failed": result.restarts_failed,
    }


def evaluate_accuracy(handle: Generator, cfg: FingerprintConfig, registry: KeyRegistry, n_seeds: int,
                      postprocess: Optional[PostprocessSpec] = None, rng_seed: int = 0,
                      metric: Optional[MetricHandle] = None, restarts: int = 20,
                      settings: Optional[OptimizerSettings] = None, penalty_weight: Optional[float] = None,
                      decoder: Optional[Callable] = None, jobs: int = 1) -> AccuracyReport:
    """Exact-match attribution accuracy over ``n_seeds`` generated images per registered key."""
    if len(registry) == 0:
        raise ValueError("registry is empty")
    metric = metric or MetricHandle()
    settings = settings or OptimizerSettings()
    work = [(handle, cfg, key, s, postprocess, rng_seed, metric, restarts, settings, penalty_weight, decoder,
             registry) for key in registry for s in range(n_seeds)]
    if jobs > 1 and decoder is None:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_trial, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        rows = [_run_trial(job) for job in work]
    exact = np.array([r["exact_match"] for r in rows], dtype=float)
    per_key = {}
    for r in rows:
        per_key.setdefault(r["key_id"], []).append(r["exact_match"])
    errs = np.array([r["alpha_err_norm"] for r in rows], dtype=float)
    return AccuracyReport(
        rows=rows,
        accuracy=float(exact.mean()),
        per_key={k: float(np.mean(v)) for k, v in per_key.items()},
        bit_accuracy=float(np.mean([r["bit_accuracy"] for r in rows])),
        mean_alpha_error=float(np.nanmean(errs)) if np.isfinite(errs).any() else float("nan"),
    )
