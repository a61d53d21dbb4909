"""Command-line entry point: ``latentfp VERB [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .experiment import ConfigError, ExperimentConfig, SweepReport, run
from .latent_model import build_generator
from .spectral import estimate_mean_gram, estimate_stats, select_basis, subspace_alignment

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_text(Path(args.config).read_text()) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.out:
        cfg.output_dir = args.out
    cfg.validate()
    return cfg


def _first_basis(cfg: ExperimentConfig, stats):
    cell = cfg.cells()[0]
    return select_basis(stats, *cell.pc_range), cell


def cmd_stats(cfg, args) -> int:
    handle = build_generator(cfg.generator)
    stats = estimate_stats(handle, cfg.stats_samples, cfg.stats_seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats.save(out / "latent_stats.npz")
    gram = estimate_mean_gram(handle, min(cfg.stats_samples, 500), cfg.stats_seed + 1)
    k = min(8, cfg.generator.d_w)
    top_h = np.linalg.eigh(gram.H)[1][:, ::-1][:, :k]
    align = subspace_alignment(stats.eigenvectors[:, :k], top_h)
    ev = stats.eigenvalues
    summary = {"d_w": int(len(ev)), "samples": stats.sample_count,
               "eigenvalue_max": float(ev[0]), "eigenvalue_min": float(ev[-1]),
               "condition": float(ev[0] / ev[-1]) if ev[-1] > 0 else float("inf"),
               f"top{k}_mean_sq_cosine_cov_vs_gram": align.mean_sq_cosine}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_sweep(cfg, args) -> int:
    report = run(cfg, resume=args.resume, jobs=args.jobs)
    from .report import render_table

    print(render_table(report.rows), end="")
    failed = [r for r in report.rows if r["status"] != "ok"]
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_prop1(cfg, args) -> int:
    from .theory import check_prop1

    handle = build_generator(cfg.generator)
    stats = estimate_stats(handle, cfg.stats_samples, cfg.stats_seed)
    basis, cell = _first_basis(cfg, stats)
    rng = np.random.default_rng(cfg.master_seed)
    eps = rng.standard_normal(cfg.generator.d_w - cell.d_phi)
    eps *= args.eps_norm / np.linalg.norm(eps)
    rep = check_prop1(handle, basis, args.sigma if args.sigma is not None else cell.sigma, eps,
                      rng_seed=cfg.master_seed)
    print(rep.to_json())
    return EXIT_OK


def cmd_prop2(cfg, args) -> int:
    from .theory import check_prop2

    handle = build_generator(cfg.generator)
    stats = estimate_stats(handle, cfg.stats_samples, cfg.stats_seed)
    basis, cell = _first_basis(cfg, stats)
    rep = check_prop2(handle, basis, args.sigma if args.sigma is not None else cell.sigma,
                      n_mc=args.n_mc, rng_seed=cfg.master_seed)
    print(rep.to_json())
    return EXIT_OK if rep.holds else EXIT_PARTIAL


def cmd_train_metric(cfg, args) -> int:
    from .fingerprint import make_config
    from .metrics import train_robust_metric

    handle = build_generator(cfg.generator)
    stats = estimate_stats(handle, cfg.stats_samples, cfg.stats_seed)
    basis, cell = _first_basis(cfg, stats)
    metric = train_robust_metric(handle, make_config(basis, cell.sigma), cfg.attacks, cfg.robust_triplets,
                                 cfg.master_seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metric.save(out / "robust_metric.txt")
    print(json.dumps(metric.train_info, indent=2))
    return EXIT_OK


def cmd_report(cfg, args) -> int:
    from .report import render_report

    out = Path(cfg.output_dir)
    path = out / "report.csv"
    if not path.exists():
        print(f"no report at {path}", file=sys.stderr)
        return EXIT_CONFIG
    report = SweepReport.from_csv(path.read_text())
    text, svg = render_report(report)
    (out / "report.txt").write_text(text)
    (out / "tradeoff.svg").write_text(svg)
    print(text, end="")
    return EXIT_PARTIAL if any(r["status"] != "ok" for r in report.rows) else EXIT_OK


COMMANDS = {"stats": cmd_stats, "sweep": cmd_sweep, "prop1": cmd_prop1, "prop2": cmd_prop2,
            "train-metric": cmd_train_metric, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentfp", description="Latent-space fingerprinting experiments.")
    p.add_argument("verb", choices=sorted(COMMANDS))
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--resume", action="store_true", help="skip cells with completion markers")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--sigma", type=float, help="strength for prop1/prop2 (default: first configured)")
    p.add_argument("--eps-norm", type=float, default=0.01, help="norm of the injected alpha error for prop1")
    p.add_argument("--n-mc", type=int, default=2000, help="Monte Carlo samples for prop2")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return COMMANDS[args.verb](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
