"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed in the terminal summary."""
import time

import numpy as np
import pytest
from scipy.stats import bootstrap

from latentfp import GeneratorSpec, build_generator
from latentfp.attribution import AttributionResult, evaluate_accuracy
from latentfp.experiment import ExperimentConfig, run
from latentfp.fingerprint import make_config, sample_keys
from latentfp.metrics import MetricHandle, train_robust_metric
from latentfp.postprocess import PostprocessSpec, apply_array, jpeg_like, jpeg_step_bound, preset, strongest
from latentfp.spectral import (estimate_mean_gram, estimate_stats, random_subspace, sample_seeds, select_basis,
                               sorted_eigh, subspace_alignment)
from latentfp.theory import check_prop1, check_prop2


@pytest.fixture
def record(acceptance_log):
    def _record(number, title, ok, detail):
        acceptance_log.append(f"[{'PASS' if ok else 'FAIL'}] C{number:>2} {title}: {detail}")
        assert ok, detail

    return _record


def _unit(n, norm, seed=0):
    e = np.random.default_rng(seed).standard_normal(n)
    return e * norm / np.linalg.norm(e)


def test_c01_gradient_correctness(gen, record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    W = gen.map_latent_batch(sample_seeds(64, 100, 55)) + 0.5 * rng.standard_normal((100, 64))
    D = rng.standard_normal((100, 64))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    eps = 1e-5
    fd = (gen.evaluate_batch(W + eps * D) - gen.evaluate_batch(W - eps * D)) / (2 * eps)
    an = np.einsum("nij,nj->ni", gen.jacobian_batch(W), D)
    rel = np.linalg.norm(fd - an, axis=1) / np.linalg.norm(an, axis=1)
    dt = time.perf_counter() - t0
    record(1, "Jacobian vs central differences", rel.max() <= 1e-4 and dt < 10,
           f"max rel err {rel.max():.2e} over 100 probes (<=1e-4), {dt:.2f}s (<10s)")


def test_c02_basis_algebra(stats, record):
    ranges = sorted({(0, d) for d in (8, 16, 32)} | {(64 - d, 64) for d in (8, 16, 32)}
                    | {(24, 32), (24, 40)})
    worst_orth, worst_rt = 0.0, 0.0
    for i, j in ranges:
        b = select_basis(stats, i, j)
        B = np.hstack([b.U, b.V])
        worst_orth = max(worst_orth, np.abs(B.T @ B - np.eye(64)).max())
        lam = np.concatenate([b.lambda_u(), b.lambda_v()])
        rt = np.linalg.norm(B @ np.diag(lam) @ B.T - stats.covariance) / np.linalg.norm(stats.covariance)
        worst_rt = max(worst_rt, rt)
    record(2, "basis algebra", worst_orth <= 1e-8 and worst_rt <= 1e-6,
           f"{len(ranges)} pc ranges, orthonormality {worst_orth:.1e} (<=1e-8), round-trip {worst_rt:.1e} (<=1e-6)")


def test_c03_prop1_affine_oracle(record):
    t0 = time.perf_counter()
    g = build_generator(GeneratorSpec(affine=True, seed=5))
    basis = select_basis(estimate_stats(g, 5000, 1), 48, 64)
    worst = 0.0
    for sigma in (0.01, 0.1, 1.0, 10.0):
        for draw in range(20):
            rng = np.random.default_rng([draw, 7])
            phi = rng.integers(0, 2, 16).astype(float)
            rep = check_prop1(g, basis, sigma, rng.standard_normal(48) * 0.1, n_alpha_samples=50,
                              rng_seed=draw, phi=phi)
            worst = max(worst, np.abs(rep.measured_phi_error - rep.predicted_phi_error).max())
    dt = time.perf_counter() - t0
    record(3, "key-error formula on affine generator", worst <= 1e-6 and dt < 30,
           f"max |measured - predicted| {worst:.1e} over 4 sigmas x 20 draws (<=1e-6), {dt:.1f}s (<30s)")


def test_c04_prop1_taylor_regime(gen, major16, record):
    eps = _unit(48, 0.01)
    g1 = check_prop1(gen, major16, 0.01, eps).relative_gap
    g2 = check_prop1(gen, major16, 0.1, eps).relative_gap
    record(4, "key-error formula in Taylor regime", g1 <= 0.2 and g2 >= g1,
           f"gap(0.01)={g1:.3e} (<=0.2), gap(0.1)={g2:.3e} (>= gap(0.01))")


def test_c05_prop2_bounds(gen, minor16, record):
    t0 = time.perf_counter()
    g = build_generator(GeneratorSpec(affine=True, seed=5))
    b_aff = select_basis(estimate_stats(g, 5000, 1), 48, 64)
    slack = max(max(r.mean_gap_lhs - r.mean_gap_bound, r.trace_gap_lhs - r.trace_gap_bound)
                for r in (check_prop2(g, b_aff, s, tau=0.0, rng_seed=k) for k, s in enumerate((0.05, 0.5, 2.0))))
    held = sum(all(check_prop2(gen, minor16, 0.05, rng_seed=rep).holds) for rep in range(100))
    dt = time.perf_counter() - t0
    record(5, "quality-gap bounds", slack <= 1e-8 and held >= 95 and dt < 300,
           f"affine max(lhs - bound) {slack:.2e} (<=1e-8), nonlinear held {held}/100 (>=95), {dt:.0f}s (<300s)")


def test_c06_round_trip_attribution(gen, minor16, record):
    t0 = time.perf_counter()
    rep = evaluate_accuracy(gen, make_config(minor16, 1.0), sample_keys(16, 20, 6), 25, rng_seed=6)
    dt = time.perf_counter() - t0
    record(6, "round-trip attribution", rep.accuracy >= 0.95 and dt < 900,
           f"exact-match accuracy {rep.accuracy:.3f} over {len(rep.rows)} trials (>=0.95), "
           f"bit accuracy {rep.bit_accuracy:.4f}, {dt:.0f}s (<900s)")


def test_c07_random_guess_floor(gen, stats, record):
    cfg = make_config(select_basis(stats, 56, 64), 1.0)

    def guess(problem):
        phi = np.random.default_rng(problem.rng_seed).integers(0, 2, 8)
        return AttributionResult(None, phi.astype(float), phi, 0.0, 0, [0.0], [0], 0.0)

    rep = evaluate_accuracy(gen, cfg, sample_keys(8, 50, 7), 100, rng_seed=7, decoder=guess)
    n, p = len(rep.rows), 2.0**-8
    sd = np.sqrt(p * (1 - p) / n)
    record(7, "random-guess floor", n >= 5000 and abs(rep.accuracy - p) <= 3 * sd,
           f"accuracy {rep.accuracy:.5f} vs 2^-8={p:.5f}, |diff|={abs(rep.accuracy - p):.5f} <= 3 SD={3 * sd:.5f}, "
           f"n={n}")


def _sweep(tmp_path, **kw):
    base = dict(stats_samples=10_000, keys_per_cell=10, seeds_per_key=10, quality_samples=1000, master_seed=8)
    base.update(kw)
    return run(ExperimentConfig(**base), out_dir=tmp_path).rows


def test_c08_tradeoff_direction(tmp_path, record):
    rows = _sweep(tmp_path, pc_ranges=["major", "minor"], sigmas=[1.0], d_phis=[16],
                  attacks=[preset("strongest-combo")])
    major, minor = (next(r for r in rows if r["pc_range"] == pc) for pc in ("0:16", "48:64"))
    ok = major["frechet_distance"] > minor["frechet_distance"] and major["accuracy"] >= minor["accuracy"]
    record(8, "tradeoff direction", ok,
           f"FD major {major['frechet_distance']:.3f} > minor {minor['frechet_distance']:.3f}; "
           f"strongest-combo accuracy major {major['accuracy']:.3f} >= minor {minor['accuracy']:.3f}")


def _monotone(values, ses, decreasing):
    """Adjacent pairs that break the trend, and whether each break lies within two standard errors."""
    breaks = []
    for k in range(len(values) - 1):
        step = values[k + 1] - values[k]
        if (step > 0) if decreasing else (step < 0):
            breaks.append(abs(step) <= 2 * np.hypot(ses[k], ses[k + 1]))
    return len(breaks) == 0 or (len(breaks) == 1 and breaks[0])


def test_c09_capacity_effect(tmp_path, record):
    rows = _sweep(tmp_path, pc_ranges=["minor"], sigmas=[1.0], d_phis=[8, 16, 32])
    rows = sorted(rows, key=lambda r: r["d_phi"])
    acc = [r["accuracy"] for r in rows]
    fd = [r["frechet_distance"] for r in rows]
    acc_se = [np.sqrt(max(a * (1 - a), 1e-12) / r["n_trials"]) for a, r in zip(acc, rows)]
    ok = _monotone(acc, acc_se, True) and _monotone(fd, [0.0] * 3, False)
    record(9, "capacity effect", ok,
           "d_phi 8/16/32: accuracy " + "/".join(f"{a:.3f}" for a in acc) + " (non-increasing), FD "
           + "/".join(f"{f:.3f}" for f in fd) + " (non-decreasing)")


def test_c10_robust_metric_benefit(gen, stats, record):
    cfg = make_config(select_basis(stats, 24, 40), 1.0)
    attack = strongest("jpeg")
    metric = train_robust_metric(gen, cfg, [attack], 400, 10)
    reg = sample_keys(16, 20, 10)
    l2 = evaluate_accuracy(gen, cfg, reg, 10, attack, rng_seed=10, metric=MetricHandle())
    rob = evaluate_accuracy(gen, cfg, reg, 10, attack, rng_seed=10, metric=metric)
    diff = np.array([b["exact_match"] - a["exact_match"] for a, b in zip(l2.rows, rob.rows)], dtype=float)
    ci = bootstrap((diff,), np.mean, confidence_level=0.95, n_resamples=5000, method="percentile",
                   random_state=np.random.default_rng(10)).confidence_interval
    ok = rob.accuracy >= l2.accuracy and (l2.accuracy >= 0.9 or ci.low > 0)
    record(10, "robust metric benefit", ok,
           f"{len(diff)} paired trials under {attack.label}: robust {rob.accuracy:.3f} vs l2 {l2.accuracy:.3f}, "
           f"95% CI of difference [{ci.low:.3f}, {ci.high:.3f}]")


def test_c11_gram_covariance_alignment(gen, stats, record):
    H = estimate_mean_gram(gen, 500, 11).H
    score = subspace_alignment(stats.eigenvectors[:, :8], sorted_eigh(H)[1][:, :8]).mean_sq_cosine
    rng = np.random.default_rng(11)
    null = np.median([subspace_alignment(random_subspace(rng, 64, 8), random_subspace(rng, 64, 8)).mean_sq_cosine
                      for _ in range(100)])
    record(11, "Gram/covariance alignment", score > null,
           f"top-8 mean squared cosine {score:.3f} > random median {null:.3f}")


def test_c12_determinism_and_resume(tmp_path, record, monkeypatch):
    from latentfp import experiment as ex

    cfg = ExperimentConfig(stats_samples=3000, pc_ranges=["major", "minor"], sigmas=[0.5, 1.0], d_phis=[8],
                           keys_per_cell=3, seeds_per_key=2, restarts=5, max_iterations=200, quality_samples=300,
                           master_seed=12)

    def strip(path):
        return [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]

    run(cfg, out_dir=tmp_path / "a")
    run(cfg, out_dir=tmp_path / "b")
    same = strip(tmp_path / "a" / "report.csv") == strip(tmp_path / "b" / "report.csv")

    real, calls = ex.run_cell, []

    def dies_after_two(*args, **kwargs):
        if len(calls) == 2:
            raise KeyboardInterrupt
        calls.append(1)
        return real(*args, **kwargs)

    monkeypatch.setattr(ex, "run_cell", dies_after_two)
    with pytest.raises(KeyboardInterrupt):
        run(cfg, out_dir=tmp_path / "c")
    monkeypatch.setattr(ex, "run_cell", real)
    done = len(list((tmp_path / "c" / "cells").glob("*.json")))
    run(cfg, out_dir=tmp_path / "c", resume=True)
    resumed = strip(tmp_path / "a" / "report.csv") == strip(tmp_path / "c" / "report.csv")
    record(12, "determinism and resumability", same and resumed and done == 2,
           f"repeat run identical={same}; interrupted after {done} of 4 cells, resumed identical={resumed}")


def test_c13_postprocess_invariants(gen, record):
    X = gen.evaluate_batch(gen.map_latent_batch(sample_seeds(64, 50, 13))).reshape(50, 1, 16, 16)
    ident = all(np.array_equal(apply_array(PostprocessSpec(), x, i), x) for i, x in enumerate(X))
    zero = all(np.array_equal(apply_array(PostprocessSpec("noising", noise_sigma=0.0), x, i), x)
               for i, x in enumerate(X))
    const = np.full((1, 16, 16), 0.3)
    blur_ok = all(np.allclose(apply_array(PostprocessSpec("blurring", blur_kernel_size=k, blur_sigma=s), const),
                              const, rtol=0, atol=1e-14)
                  for k in (3, 7, 9, 16, 25) for s in (0.5, 1.0, 1.5, 2.0))
    worst = max(np.abs(jpeg_like(jpeg_like(X, q), q) - jpeg_like(X, q)).max() / jpeg_step_bound(q)
                for q in (80, 70, 60, 50))
    record(13, "postprocess invariants", ident and zero and blur_ok and worst <= 1.0,
           f"identity bitwise={ident}, zero-noise bitwise={zero}, blur keeps constants={blur_ok}, "
           f"JPEG re-application max change {worst:.3f} quantization steps (<=1)")
