"""Declarative sweeps over fingerprint direction, strength, key length, attack and metric."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .attribution import OptimizerSettings, evaluate_accuracy
from .fingerprint import embed_batch, make_config, project_alpha, sample_keys
from .latent_model import GeneratorSpec, build_generator
from .metrics import MetricHandle, quality_report, train_robust_metric
from .postprocess import PRESETS, PostprocessSpec, apply_array, preset
from .report import render_report
from .spectral import LatentStats, estimate_stats, sample_seeds, select_basis

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("cell_id", "method", "pc_range", "sigma", "d_phi", "attack", "metric", "accuracy",
                  "bit_accuracy", "frechet_distance", "ssim_mean", "ssim_std", "mean_alpha_err",
                  "n_trials", "status", "wall_time")
NUMERIC = {"sigma": float, "d_phi": int, "accuracy": float, "bit_accuracy": float, "frechet_distance": float,
           "ssim_mean": float, "ssim_std": float, "mean_alpha_err": float, "n_trials": int, "wall_time": float}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    stats_samples: int = 10000
    stats_seed: int = 1
    # (i, j) tuples, or "major" / "minor" resolved against each d_phi
    pc_ranges: list = field(default_factory=lambda: ["minor"])
    sigmas: list = field(default_factory=lambda: [1.0])
    d_phis: list = field(default_factory=lambda: [16])
    attacks: list = field(default_factory=lambda: [PostprocessSpec()])
    metrics: list = field(default_factory=lambda: ["l2"])
    keys_per_cell: int = 20
    seeds_per_key: int = 25
    restarts: int = 20
    max_iterations: int = 400
    quality_samples: int = 1000
    robust_triplets: int = 400
    baseline_deltas: list = field(default_factory=list)
    output_dir: str = "sweep_out"
    master_seed: int = 0

    def validate(self) -> None:
        for name in ("pc_ranges", "sigmas", "d_phis", "attacks", "metrics"):
            if not getattr(self, name):
                raise ConfigError(f"sweep axis {name} is empty")
        d_w = self.generator.d_w
        for d in self.d_phis:
            if not 1 <= d <= d_w:
                raise ConfigError(f"d_phi={d} outside [1, d_w={d_w}]")
        for pc in self.pc_ranges:
            if isinstance(pc, str):
                if pc not in ("major", "minor"):
                    raise ConfigError(f"unknown pc_range preset {pc!r}")
            else:
                i, j = pc
                if not 0 <= i < j <= d_w:
                    raise ConfigError(f"pc_range {i}:{j} outside [0, {d_w}]")
                if (j - i) not in self.d_phis:
                    raise ConfigError(f"pc_range {i}:{j} matches no configured d_phi")
        for s in self.sigmas:
            if not s > 0:
                raise ConfigError("sigmas must be positive")
        for m in self.metrics:
            if m not in ("l2", "robust"):
                raise ConfigError(f"unknown metric {m!r}")
        if self.stats_samples < d_w + 1:
            raise ConfigError("stats.n_samples must exceed d_w")
        if self.quality_samples < self.generator.d_x + 1 and self.generator.d_x <= 1024:
            raise ConfigError("quality_samples must exceed the feature dimension")
        for name in ("keys_per_cell", "seeds_per_key", "restarts", "max_iterations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for d in self.d_phis:
            if self.keys_per_cell > 2**d:
                raise ConfigError(f"keys_per_cell exceeds capacity 2^{d}")

    def cells(self) -> list["Cell"]:
        out = []
        for pc in self.pc_ranges:
            for d in self.d_phis:
                if isinstance(pc, str):
                    rng = (0, d) if pc == "major" else (self.generator.d_w - d, self.generator.d_w)
                else:
                    rng = tuple(pc)
                    if rng[1] - rng[0] != d:
                        continue
                for s in self.sigmas:
                    for a in self.attacks:
                        for m in self.metrics:
                            out.append(Cell("latent", rng, float(s), int(d), a, m))
        for delta in self.baseline_deltas:
            for d in self.d_phis:
                for a in self.attacks:
                    out.append(Cell("shallow", None, float(delta), int(d), a, "correlation"))
        return out

    # -- flat key=value text format -------------------------------------

    def to_text(self) -> str:
        lines = [f"generator.{k}={_fmt(v)}" for k, v in self.generator.to_dict().items()]
        lines += [f"stats.n_samples={self.stats_samples}", f"stats.seed={self.stats_seed}"]
        for pc in self.pc_ranges:
            lines.append(f"pc_range={pc if isinstance(pc, str) else f'{pc[0]}:{pc[1]}'}")
        lines += [f"sigma={s!r}" for s in self.sigmas]
        lines += [f"d_phi={d}" for d in self.d_phis]
        for a in self.attacks:
            name = _preset_name(a)
            if name:
                lines.append(f"attack={name}")
            else:
                lines.append("attack=" + ";".join(f"{k}={v}" for k, v in a.to_items()))
        lines += [f"metric={m}" for m in self.metrics]
        lines += [f"baseline_delta={d!r}" for d in self.baseline_deltas]
        for name in ("keys_per_cell", "seeds_per_key", "restarts", "max_iterations", "quality_samples",
                     "robust_triplets", "output_dir", "master_seed"):
            lines.append(f"{name}={getattr(self, name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        gen, lists, scalars = {}, {}, {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key.startswith("generator."):
                gen[key[len("generator."):]] = value
            elif key in ("pc_range", "sigma", "d_phi", "attack", "metric", "baseline_delta"):
                lists.setdefault(key, []).append(value)
            else:
                scalars[key] = value
        try:
            return cls._build(gen, lists, scalars)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def _build(cls, gen, lists, scalars) -> "ExperimentConfig":
        base = GeneratorSpec()
        fields = {}
        for k, v in gen.items():
            if not hasattr(base, k):
                raise ConfigError(f"unknown generator field {k!r}")
            cur = getattr(base, k)
            if isinstance(cur, bool):
                fields[k] = v.lower() in ("1", "true", "yes")
            elif isinstance(cur, tuple):
                conv = float if k == "output_range" else int
                fields[k] = tuple(conv(x) for x in v.split(",") if x.strip())
            else:
                fields[k] = type(cur)(v)
        cfg = cls(generator=replace(base, **fields))
        if "pc_range" in lists:
            cfg.pc_ranges = [v if v in ("major", "minor") else tuple(int(x) for x in v.split(":"))
                             for v in lists["pc_range"]]
        if "sigma" in lists:
            cfg.sigmas = [float(v) for v in lists["sigma"]]
        if "d_phi" in lists:
            cfg.d_phis = [int(v) for v in lists["d_phi"]]
        if "attack" in lists:
            cfg.attacks = [_parse_attack(v) for v in lists["attack"]]
        if "metric" in lists:
            cfg.metrics = list(lists["metric"])
        if "baseline_delta" in lists:
            cfg.baseline_deltas = [float(v) for v in lists["baseline_delta"]]
        attack_items = {k: v for k, v in scalars.items() if k.startswith("attack.")}
        if attack_items:
            single = PostprocessSpec.from_items(attack_items)
            cfg.attacks = cfg.attacks + [single] if "attack" in lists else [single]
        scalars = {k: v for k, v in scalars.items() if not k.startswith("attack.")}
        mapping = {"stats.n_samples": "stats_samples", "stats.seed": "stats_seed"}
        for k, v in scalars.items():
            name = mapping.get(k, k)
            if name == "output_dir":
                cfg.output_dir = v
            elif hasattr(cfg, name) and isinstance(getattr(cfg, name), int):
                setattr(cfg, name, int(v))
            else:
                raise ConfigError(f"unknown config key {k!r}")
        return cfg


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _preset_name(a: PostprocessSpec) -> Optional[str]:
    for name, make in PRESETS.items():
        if make() == a:
            return name
    return None


_ATTACK_KEYS = {k for k, _ in PostprocessSpec(combo_parts=("noising",)).to_items()}


def _parse_attack(value: str) -> PostprocessSpec:
    if "=" not in value:
        return preset(value)
    items = {}
    for part in filter(None, (p.strip() for p in value.split(";"))):
        k, _, v = part.partition("=")
        k = k.strip() if k.strip().startswith("attack.") else "attack." + k.strip()
        if k not in _ATTACK_KEYS:
            raise ConfigError(f"unknown attack parameter {k!r}")
        items[k] = v.strip()
    return PostprocessSpec.from_items(items)


@dataclass(frozen=True)
class Cell:
    method: str
    pc_range: Optional[tuple]
    sigma: float
    d_phi: int
    attack: PostprocessSpec
    metric: str

    @property
    def coords(self) -> tuple:
        pc = "-" if self.pc_range is None else f"{self.pc_range[0]}:{self.pc_range[1]}"
        return (self.method, pc, repr(self.sigma), str(self.d_phi), self.attack.label, self.metric)

    @property
    def cell_id(self) -> str:
        return hashlib.blake2b("|".join(self.coords).encode(), digest_size=8).hexdigest()


def cell_seed(master_seed: int, cell: Cell) -> int:
    """Stable 63-bit seed from the master seed and the cell coordinates."""
    h = hashlib.blake2b(f"{master_seed}|{'|'.join(cell.coords)}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)

    def to_csv(self, include_wall_time: bool = True) -> str:
        cols = [c for c in REPORT_COLUMNS if include_wall_time or c != "wall_time"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SweepReport":
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            rows.append({k: NUMERIC[k](v) if k in NUMERIC else v for k, v in r.items()})
        return cls(rows)

    def find(self, **match) -> list:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]


class _Context:
    """Shared immutable objects for one config: generator and latent statistics."""

    def __init__(self, config: ExperimentConfig, stats: Optional[LatentStats] = None):
        self.config = config
        self.handle = build_generator(config.generator)
        self.stats = stats or estimate_stats(self.handle, config.stats_samples, config.stats_seed)


def _quality(ctx: _Context, make_images, seed: int):
    n = ctx.config.quality_samples
    spec = ctx.handle.spec
    Z = sample_seeds(spec.d_z, n, seed)
    W = ctx.handle.map_latent_batch(Z)
    clean = ctx.handle.evaluate_batch(W).reshape((n,) + spec.image_shape)
    return quality_report(clean, make_images(W, clean), spec.output_range[1] - spec.output_range[0])


def _latent_cell(ctx: _Context, cell: Cell, seed: int, jobs: int = 1):
    config, handle = ctx.config, ctx.handle
    basis = select_basis(ctx.stats, *cell.pc_range)
    cfg = make_config(basis, cell.sigma)
    registry = sample_keys(cell.d_phi, config.keys_per_cell, seed)
    metric = MetricHandle()
    if cell.metric == "robust":
        metric = train_robust_metric(handle, cfg, [cell.attack], config.robust_triplets, seed)
    settings = OptimizerSettings(max_iterations=config.max_iterations)
    acc = evaluate_accuracy(handle, cfg, registry, config.seeds_per_key, cell.attack, seed, metric,
                            config.restarts, settings, jobs=jobs)
    keys = np.array([k.phi for k in registry])

    def fingerprinted(W, clean):
        phi = keys[np.arange(len(W)) % len(keys)]
        out = handle.evaluate_batch(embed_batch(cfg, project_alpha(cfg, W), phi))
        return out.reshape(clean.shape)

    quality = _quality(ctx, fingerprinted, seed ^ 0x5EED)
    return acc, quality


# -- shallow baseline -------------------------------------------------------

def shallow_patterns(spec: GeneratorSpec, d_phi: int, seed: int) -> np.ndarray:
    """Seeded per-bit +/-1 pixel patterns, shape (d_phi, C, H, W)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 99]))
    return rng.choice([-1.0, 1.0], size=(d_phi,) + spec.image_shape)


def shallow_embed(clean: np.ndarray, phi: np.ndarray, patterns: np.ndarray, delta: float, output_range):
    signs = 2.0 * np.asarray(phi, dtype=float) - 1.0
    pattern = np.tensordot(signs, patterns, axes=(-1, 0)) * delta / np.sqrt(len(patterns))
    return np.clip(clean + pattern, *output_range)


def shallow_decode(image: np.ndarray, patterns: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Per-bit sign of the correlation between the residual and each pattern."""
    corr = np.tensordot(patterns, image - reference, axes=((1, 2, 3), (0, 1, 2)))
    return (corr > 0).astype(int)


def _shallow_cell(ctx: _Context, cell: Cell, seed: int):
    config, handle = ctx.config, ctx.handle
    spec = handle.spec
    registry = sample_keys(cell.d_phi, config.keys_per_cell, seed)
    patterns = shallow_patterns(spec, cell.d_phi, seed)
    n_ref = config.quality_samples
    ref_W = handle.map_latent_batch(sample_seeds(spec.d_z, n_ref, seed ^ 0xBA5E))
    reference = handle.evaluate_batch(ref_W).mean(0).reshape(spec.image_shape)
    rows = []
    for key in registry:
        for s in range(config.seeds_per_key):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 1, key.id, s]))
            clean = handle.evaluate_batch(handle.map_latent_batch(rng.standard_normal(spec.d_z)[None]))[0]
            img = shallow_embed(clean.reshape(spec.image_shape), key.phi, patterns, cell.sigma, spec.output_range)
            if cell.attack.kind != "identity":
                img = apply_array(cell.attack, img, int(rng.integers(2**62)), spec.output_range)
            phi_hat = shallow_decode(img, patterns, reference)
            rows.append((float(np.mean(phi_hat == key.phi)), int(np.array_equal(phi_hat, key.phi.astype(int)))))
    keys = np.array([k.phi for k in registry])

    def patterned(W, clean):
        phi = keys[np.arange(len(W)) % len(keys)]
        return np.stack([shallow_embed(c, p, patterns, cell.sigma, spec.output_range) for c, p in zip(clean, phi)])

    quality = _quality(ctx, patterned, seed ^ 0x5EED)
    bits, exact = np.array(rows).T
    return float(exact.mean()), float(bits.mean()), len(rows), quality


def run_cell(ctx: _Context, cell: Cell, jobs: int = 1) -> dict:
    seed = cell_seed(ctx.config.master_seed, cell)
    start = time.perf_counter()
    row = {"cell_id": cell.cell_id, "method": cell.method, "pc_range": cell.coords[1], "sigma": cell.sigma,
           "d_phi": cell.d_phi, "attack": cell.attack.label, "metric": cell.metric}
    try:
        if cell.method == "latent":
            acc, q = _latent_cell(ctx, cell, seed, jobs)
            row.update(accuracy=acc.accuracy, bit_accuracy=acc.bit_accuracy, mean_alpha_err=acc.mean_alpha_error,
                       n_trials=len(acc.rows))
            row["_decode_csv"] = acc.to_csv()
        else:
            accuracy, bit_acc, n, q = _shallow_cell(ctx, cell, seed)
            row.update(accuracy=accuracy, bit_accuracy=bit_acc, mean_alpha_err=float("nan"), n_trials=n)
        row.update(frechet_distance=q.frechet_distance, ssim_mean=q.ssim_mean, ssim_std=q.ssim_std, status="ok")
    except Exception as exc:  # a failing cell must not abort the sweep
        log.exception("cell %s failed", cell.cell_id)
        row.update(accuracy=float("nan"), bit_accuracy=float("nan"), frechet_distance=float("nan"),
                   ssim_mean=float("nan"), ssim_std=float("nan"), mean_alpha_err=float("nan"), n_trials=0,
                   status=f"failed: {type(exc).__name__}: {exc}")
    row["wall_time"] = time.perf_counter() - start
    return {k: v.item() if isinstance(v, np.generic) else v for k, v in row.items()}


def _worker(args):
    config, cell = args
    return run_cell(_Context(config), cell)


def _execute(config: ExperimentConfig, cells: list, jobs: int):
    """Yield rows in ``cells`` order; a worker pool is used across cells when ``jobs > 1``."""
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            yield from pool.map(_worker, [(config, c) for c in cells])
    else:
        ctx = _Context(config)
        for c in cells:
            yield run_cell(ctx, c, jobs)


def run(config: ExperimentConfig, resume: bool = False, jobs: int = 1, out_dir=None) -> SweepReport:
    """Execute every cell, persisting per-cell markers, decode logs and the final report."""
    config.validate()
    out = Path(out_dir or config.output_dir)
    cell_dir = out / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    cells = sorted(config.cells(), key=lambda c: c.coords)
    rows: dict[str, dict] = {}
    todo = []
    for cell in cells:
        marker = cell_dir / f"{cell.cell_id}.json"
        if resume and marker.exists():
            rows[cell.cell_id] = json.loads(marker.read_text())
        else:
            todo.append(cell)
    if todo:
        for cell, row in zip(todo, _execute(config, todo, jobs)):
            # persist each cell as soon as it finishes so an interrupted sweep can resume
            decode_csv = row.pop("_decode_csv", None)
            if decode_csv is not None:
                (cell_dir / f"{cell.cell_id}.decode.csv").write_text(decode_csv)
            (cell_dir / f"{cell.cell_id}.json").write_text(json.dumps(row, sort_keys=True))
            rows[cell.cell_id] = row
    report = SweepReport([rows[c.cell_id] for c in cells])
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.json").write_text(json.dumps(report.rows, indent=1, sort_keys=True))
    text, svg = render_report(report)
    (out / "report.txt").write_text(text)
    (out / "tradeoff.svg").write_text(svg)
    return report


def run_baseline_shallow(config: ExperimentConfig, deltas=None) -> SweepReport:
    """Shallow pixel-pattern rows for every (delta, d_phi, attack), same schema as ``run``."""
    deltas = list(deltas if deltas is not None else config.baseline_deltas)
    if not deltas:
        raise ConfigError("no baseline deltas configured")
    cfg = replace(config, baseline_deltas=deltas)
    ctx = _Context(cfg)
    cells = sorted((c for c in cfg.cells() if c.method == "shallow"), key=lambda c: c.coords)
    return SweepReport([run_cell(ctx, c) for c in cells])
