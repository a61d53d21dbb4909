import json

import numpy as np
import pytest

from latentfp import cli
from latentfp import experiment as ex
from latentfp.attribution import OptimizerSettings, evaluate_accuracy
from latentfp.experiment import ConfigError, ExperimentConfig, SweepReport, cell_seed, run, run_baseline_shallow
from latentfp.fingerprint import make_config, sample_keys
from latentfp.postprocess import PostprocessSpec, preset
from latentfp.report import render_report, render_table
from latentfp.spectral import estimate_stats, select_basis


def small(**kw):
    base = dict(stats_samples=3000, keys_per_cell=3, seeds_per_key=2, restarts=5, max_iterations=200,
                quality_samples=300, robust_triplets=60)
    base.update(kw)
    return ExperimentConfig(**base)


def no_time(csv_text):
    return [line.rsplit(",", 1)[0] for line in csv_text.splitlines()]


def test_config_text_round_trip():
    cfg = small(pc_ranges=["minor", (24, 40)], sigmas=[0.5, 1.0], d_phis=[16], metrics=["l2", "robust"],
                attacks=[preset("identity"), PostprocessSpec("jpeg", jpeg_quality=60, rng_seed=2)],
                baseline_deltas=[0.1])
    back = ExperimentConfig.from_text(cfg.to_text())
    assert back == cfg
    assert [c.coords for c in back.cells()] == [c.coords for c in cfg.cells()]


def test_config_parses_comments_and_attack_items():
    text = """# demo
generator.seed=3
generator.layer_widths=64,32
pc_range=0:8
d_phi=8
attack.kind=noising
attack.noise_sigma=0.2
sigma=2.0
"""
    cfg = ExperimentConfig.from_text(text)
    assert cfg.generator.seed == 3 and cfg.generator.layer_widths == (64, 32)
    assert cfg.attacks == [PostprocessSpec("noising", noise_sigma=0.2)]
    cfg.validate()


def test_inline_attack_items_with_or_without_prefix():
    cfg = ExperimentConfig.from_text("attack=kind=jpeg; jpeg_quality=60  # note\n"
                                     "attack=attack.kind=blurring;attack.blur=9x1.5\n")
    assert cfg.attacks == [PostprocessSpec("jpeg", jpeg_quality=60),
                           PostprocessSpec("blurring", blur_kernel_size=9, blur_sigma=1.5)]


@pytest.mark.parametrize("text", ["sigma", "bogus=1", "pc_range=0:10\nd_phi=8", "metric=lpips",
                                  "pc_range=2:1\nd_phi=8", "generator.nope=1", "sigma=-1",
                                  "attack=strongest-crop", "attack=kind=jpeg;quality=50", "keys_per_cell=0"])
def test_invalid_configs_rejected(text):
    with pytest.raises((ConfigError, ValueError)):
        ExperimentConfig.from_text(text).validate()


def test_empty_axis_rejected_before_work(tmp_path):
    with pytest.raises(ConfigError):
        run(small(sigmas=[]), out_dir=tmp_path)
    assert not any(tmp_path.iterdir())


def test_cell_seed_is_stable_and_coordinate_sensitive():
    a, b = small().cells()[0], small(sigmas=[2.0]).cells()[0]
    assert cell_seed(0, a) == cell_seed(0, a) and cell_seed(0, a) != cell_seed(1, a)
    assert cell_seed(0, a) != cell_seed(0, b)
    assert 0 <= cell_seed(0, a) < 2**63


def test_one_cell_matches_standalone_evaluation(tmp_path):
    cfg = small()
    report = run(cfg, out_dir=tmp_path)
    assert len(report.rows) == 1
    cell = cfg.cells()[0]
    seed = cell_seed(cfg.master_seed, cell)
    handle = ex._Context(cfg).handle
    stats = estimate_stats(handle, cfg.stats_samples, cfg.stats_seed)
    acc = evaluate_accuracy(handle, make_config(select_basis(stats, 48, 64), 1.0), sample_keys(16, 3, seed), 2,
                            PostprocessSpec(), seed, restarts=5, settings=OptimizerSettings(max_iterations=200))
    assert report.rows[0]["accuracy"] == acc.accuracy
    decode_log = (tmp_path / "cells" / f"{cell.cell_id}.decode.csv").read_text()
    assert decode_log == acc.to_csv()
    assert (tmp_path / "report.json").exists() and (tmp_path / "tradeoff.svg").exists()


def test_tradeoff_and_strength_directions(tmp_path):
    cfg = small(pc_ranges=["major", "minor"], sigmas=[0.25, 1.0, 4.0], attacks=[preset("strongest-combo")])
    report = run(cfg, out_dir=tmp_path)
    assert len(report.rows) == 6
    fd = {(r["pc_range"], r["sigma"]): r["frechet_distance"] for r in report.rows}
    for s in (0.25, 1.0, 4.0):
        assert fd[("0:16", s)] > fd[("48:64", s)]
    minor = sorted((r for r in report.rows if r["pc_range"] == "48:64"), key=lambda r: r["sigma"])
    assert minor[0]["accuracy"] <= minor[1]["accuracy"]
    assert all(a["frechet_distance"] <= b["frechet_distance"] for a, b in zip(minor, minor[1:]))


def test_baseline_extremes():
    cfg = small(d_phis=[4], keys_per_cell=16, seeds_per_key=20)
    big = run_baseline_shallow(cfg, [2.0]).rows[0]
    assert big["accuracy"] == 1.0 and big["method"] == "shallow"
    tiny = run_baseline_shallow(cfg, [1e-9]).rows[0]
    p, n = 2.0**-4, tiny["n_trials"]
    assert abs(tiny["accuracy"] - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_baseline_costs_more_quality_at_matched_accuracy(tmp_path):
    # strongest JPEG: the latent decoder keeps nontrivial accuracy there at desk scale
    cfg = small(pc_ranges=[(24, 32)], d_phis=[8], attacks=[preset("strongest-jpeg")], keys_per_cell=10,
                seeds_per_key=3, max_iterations=400, restarts=20)
    latent = run(cfg, out_dir=tmp_path).rows[0]
    assert latent["accuracy"] > 0.5
    rows = run_baseline_shallow(cfg, [0.05, 0.1, 0.15, 0.2, 0.3, 0.5]).rows
    matched = min((r for r in rows if r["accuracy"] >= latent["accuracy"]), key=lambda r: r["sigma"])
    assert matched["frechet_distance"] > latent["frechet_distance"]


def test_render_empty_and_single_row():
    text, svg = render_report(SweepReport([]))
    assert len(text.splitlines()) == 2 and text.startswith("Method")
    assert svg.startswith("<svg")
    row = {"cell_id": "x", "method": "latent", "pc_range": "0:8", "sigma": 1.0, "d_phi": 8, "attack": "identity",
           "metric": "l2", "accuracy": 0.5, "bit_accuracy": 0.9, "frechet_distance": 1.25, "ssim_mean": 0.9,
           "ssim_std": 0.01, "mean_alpha_err": 0.3, "n_trials": 4, "status": "ok", "wall_time": 1.5}
    lines = render_table([row]).splitlines()
    assert len(lines) == 3 and len(lines[2].split()) == len(lines[0].split())
    assert "<circle" in render_report([row])[1]


def test_csv_round_trip(tmp_path):
    report = run(small(sigmas=[0.5, 1.0]), out_dir=tmp_path)
    back = SweepReport.from_csv((tmp_path / "report.csv").read_text())
    assert back.rows == report.rows


def test_determinism_resume_and_cell_isolation(tmp_path):
    cfg = small(pc_ranges=["major", "minor"], d_phis=[8])
    a = run(cfg, out_dir=tmp_path / "a")
    b = run(cfg, out_dir=tmp_path / "b")
    assert no_time(a.to_csv()) == no_time(b.to_csv())
    # resume skips finished cells entirely: wall times are carried over from the markers
    c = run(cfg, out_dir=tmp_path / "a", resume=True)
    assert c.to_csv() == a.to_csv()
    victim = a.rows[1]["cell_id"]
    (tmp_path / "a" / "cells" / f"{victim}.json").unlink()
    d = run(cfg, out_dir=tmp_path / "a", resume=True)
    for old, new in zip(a.rows, d.rows):
        if old["cell_id"] == victim:
            assert old["wall_time"] != new["wall_time"]
        else:
            assert old == new
    assert no_time(d.to_csv()) == no_time(a.to_csv())


def test_failed_cell_is_recorded_not_fatal(tmp_path, monkeypatch):
    real = ex._latent_cell

    def flaky(ctx, cell, seed, jobs=1):
        if cell.sigma == 2.0:
            raise RuntimeError("boom")
        return real(ctx, cell, seed, jobs)

    monkeypatch.setattr(ex, "_latent_cell", flaky)
    report = run(small(sigmas=[1.0, 2.0]), out_dir=tmp_path)
    status = {r["sigma"]: r["status"] for r in report.rows}
    assert status[1.0] == "ok" and status[2.0].startswith("failed: RuntimeError")
    assert np.isnan([r for r in report.rows if r["sigma"] == 2.0][0]["accuracy"])


def test_robust_metric_cell_runs(tmp_path):
    row = run(small(metrics=["robust"], attacks=[preset("strongest-jpeg")]), out_dir=tmp_path).rows[0]
    assert row["status"] == "ok" and 0 <= row["accuracy"] <= 1


def _write(tmp_path, text):
    p = tmp_path / "cfg.txt"
    p.write_text(text)
    return str(p)


SMALL_TEXT = """stats.n_samples=3000
keys_per_cell=2
seeds_per_key=1
restarts=3
max_iterations=100
quality_samples=300
robust_triplets=40
d_phi=8
"""


def test_cli_exit_codes_and_verbs(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL_TEXT)
    out = str(tmp_path / "out")
    assert cli.main(["sweep", "--config", cfg, "--out", out, "--seed", "3"]) == 0
    assert cli.main(["sweep", "--config", cfg, "--out", out, "--seed", "3", "--resume"]) == 0
    assert cli.main(["report", "--config", cfg, "--out", out]) == 0
    assert "Method" in capsys.readouterr().out
    assert cli.main(["stats", "--config", cfg, "--out", out]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["d_w"] == 64 and summary["condition"] > 10
    assert cli.main(["train-metric", "--config", cfg, "--out", out]) == 0
    assert (tmp_path / "out" / "robust_metric.txt").exists()
    capsys.readouterr()
    assert cli.main(["prop1", "--config", cfg, "--sigma", "0.05"]) == 0
    assert json.loads(capsys.readouterr().out)["relative_gap"] < 0.2
    assert cli.main(["prop2", "--config", cfg, "--sigma", "0.05", "--n-mc", "400"]) in (0, 2)
    assert cli.main(["sweep", "--config", _write(tmp_path, "sigma=abc\n")]) == 1
    assert cli.main(["sweep", "--config", str(tmp_path / "missing.txt")]) == 1
    assert cli.main(["report", "--out", str(tmp_path / "nowhere")]) == 1


def test_cli_partial_failure_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(ex, "_latent_cell", lambda *a, **k: (_ for _ in ()).throw(RuntimeError("x")))
    assert cli.main(["sweep", "--config", _write(tmp_path, SMALL_TEXT), "--out", str(tmp_path / "o")]) == 2
