"""Training loop, logging, checkpoints, evaluation and comparison recipes."""

import csv
import math

import numpy as np
import pytest

from flowloss import denoiser as dn
from flowloss import tensor as tn
from flowloss.config import build_config
from flowloss.edm import gating_fraction
from flowloss.losses import Baseline
from flowloss.metrics import EvalReport
from flowloss.serialize import read_checkpoint, write_checkpoint
from flowloss.train import (
    LOG_HEADER,
    SUMMARY_HEADER,
    Adam,
    TrainingDiverged,
    build_datasets,
    evaluate,
    evaluate_denoiser,
    load_params,
    loss_and_grads,
    sweep,
    train,
    worker_count,
)

SMALL = {
    "data.n_train": 16,
    "data.n_val": 2,
    "data.n_test": 2,
    "model.features": 4,
    "train.batch_size": 4,
    "train.total_steps": 50,
    "train.val_every": 25,
    "sample.n_steps": 4,
}


def small_cfg(tmp_path, name="run", **extra):
    return build_config({**SMALL, "train.output_dir": str(tmp_path / name), **extra})


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    return build_datasets(small_cfg(tmp_path_factory.mktemp("data")))


@pytest.fixture(scope="module")
def baseline_run(tmp_path_factory):
    """50 baseline steps on the default data and model."""
    out = tmp_path_factory.mktemp("base")
    cfg = build_config({"train.output_dir": str(out), "train.total_steps": 50, "train.val_every": 25, "sample.n_steps": 4})
    return cfg, train(cfg, plots=True)


# ------------------------------------------------------------- training


def test_baseline_smoke_run_log_and_trend(baseline_run):
    cfg, result = baseline_run
    rows = read_rows(cfg.output_dir / "log.csv")
    assert list(rows[0]) == LOG_HEADER
    assert [int(r["step"]) for r in rows] == list(range(1, 51))
    recon = [float(r["loss_recon"]) for r in rows]
    assert all(math.isfinite(v) for v in recon)
    assert np.mean(recon[-10:]) < np.mean(recon[:10])
    assert {r["flow_gate_active"] for r in rows} == {"0"} and result.solver_calls == 0
    val_steps = [int(r["step"]) for r in rows if r["val_psnr"]]
    assert val_steps == [25, 50]
    assert all(r["wall_ms"] == "" for r in rows)
    for name in ("ckpt_final.flc", "config.resolved", "curves.png"):
        assert (cfg.output_dir / name).is_file()


def test_total_equals_weighted_sum_in_log(baseline_run):
    cfg, _ = baseline_run
    for r in read_rows(cfg.output_dir / "log.csv"):
        assert float(r["loss_total"]) == 1.0 * float(r["loss_recon"]) + float(r["weight_flow"]) * float(r["loss_flow_raw"])


def test_same_config_gives_identical_files(tmp_path, small_data):
    outputs = []
    for name in ("a", "b"):
        cfg = small_cfg(tmp_path, name, **{"train.total_steps": 6, "train.val_every": 3})
        train(cfg, small_data, plots=False)
        outputs.append(((cfg.output_dir / "log.csv").read_bytes(), (cfg.output_dir / "ckpt_final.flc").read_bytes()))
    assert outputs[0] == outputs[1]


def test_wall_clock_column_is_opt_in(tmp_path, small_data):
    cfg = small_cfg(tmp_path, **{"train.total_steps": 2, "log.wall_ms": True})
    train(cfg, small_data, plots=False)
    assert all(float(r["wall_ms"]) > 0 for r in read_rows(cfg.output_dir / "log.csv"))


def test_gated_run_counts_solver_calls_on_active_rows(tmp_path, small_data):
    cfg = small_cfg(tmp_path, **{"train.total_steps": 30, "loss.strategy": "gated", "loss.psi": 0.25, "train.val_every": 30})
    result = train(cfg, small_data, plots=False)
    active = [int(r["flow_gate_active"]) for r in read_rows(cfg.output_dir / "log.csv")]
    assert sum(active) == result.gate_steps > 0
    # Each active step estimates flow of the prediction once (ground truth comes from the cache).
    assert result.solver_calls == sum(active)
    for r in read_rows(cfg.output_dir / "log.csv"):
        if r["flow_gate_active"] == "0":
            assert float(r["loss_flow_raw"]) == 0.0 and float(r["sigma"]) >= 0.25


@pytest.mark.slow
def test_gate_fraction_over_ten_thousand_training_steps(tmp_path):
    tiny = {
        "data.n_train": 4, "data.n_val": 1, "data.n_test": 1,
        "model.frames": 2, "model.features": 1, "model.blocks": 1,
        "flow.iterations": 1, "flow.warps": 1,
        "train.batch_size": 1, "train.total_steps": 10_000, "train.val_every": 10_000,
        "sample.n_steps": 2, "loss.strategy": "gated", "loss.psi": 0.125,
    }  # fmt: skip
    cfg = build_config({**tiny, "train.output_dir": str(tmp_path / "long")})
    result = train(cfg, plots=False)
    assert result.solver_calls == result.gate_steps
    assert abs(result.gate_fraction - gating_fraction(0.125, cfg.edm)) <= 0.02


def test_non_finite_loss_aborts_with_dump(tmp_path, small_data):
    cfg = small_cfg(tmp_path, **{"train.total_steps": 3})
    data = build_datasets(small_cfg(tmp_path, "fresh"))
    for item in data.train:
        item.clip[1, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(cfg, data, plots=False)
    assert info.value.step == 1
    dump = read_checkpoint(info.value.dump_path)
    assert np.isnan(dump["batch.clean"]).any() and "param.out.w" in dump


def test_adam_first_step_moves_each_weight_by_learning_rate(tmp_path):
    cfg = small_cfg(tmp_path)
    params = {"w": np.array([1.0, -2.0, 0.5])}
    g = np.array([0.3, -4.0, 1e-3])
    new = Adam(params, cfg).step(params, {"w": g})
    # Bias-corrected moments after one step are g and g^2.
    np.testing.assert_allclose(new["w"], params["w"] - 1e-3 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)


def test_batched_gradients_equal_mean_of_single_sample_gradients(tmp_path, small_data):
    cfg = small_cfg(tmp_path)
    params = dn.init(cfg.model, np.random.default_rng(0))
    params = {k: v + 0.05 * np.random.default_rng(1).standard_normal(v.shape) for k, v in params.items()}
    batch = small_data.train[:3]
    grads, *_ = loss_and_grads(params, batch, 0.4, cfg, noise_key=(7,))
    # Sample i keeps its own noise stream when evaluated alone, so the batch mean must match.
    singles = [_single(params, item, i, cfg)[0] for i, item in enumerate(batch)]
    for name in grads:
        np.testing.assert_allclose(grads[name], np.mean([g[name] for g in singles], axis=0), rtol=1e-9, atol=1e-12)


def _single(params, item, i, cfg):
    from flowloss.edm import add_noise
    from flowloss.losses import combined_loss
    from flowloss.rng import stream

    noisy = add_noise(item.clip, 0.4, stream(cfg.train.seed, "noise", 7, i))[None]
    tape = tn.Tape()
    tracked = {k: tape.watch(v, k) for k, v in params.items()}
    y_hat = dn.denoise(tracked, noisy, 0.4, item.clip[None, 0], cfg.model, cfg.edm)
    total, bd = combined_loss(y_hat, item.clip[None], 0.4, Baseline(), cfg.flow)
    return tn.backward(tape, total, list(tracked.values())), bd


# ----------------------------------------------------------- evaluation


def test_oracle_generator_gives_perfect_scores(tmp_path, small_data):
    cfg = small_cfg(tmp_path)
    lookup = {it.clip[0].tobytes(): it.clip for it in small_data.test}
    report, rows = evaluate_denoiser(None, small_data.test, cfg, generator=lambda conds: np.stack([lookup[c.tobytes()] for c in conds]))
    assert report.psnr == 99.0 and report.flow_consistency == 0.0 and report.ssim == 1.0
    assert report.n_clips == len(small_data.test)


def test_untrained_checkpoint_report_is_finite_and_is_the_clip_mean(tmp_path, small_data):
    cfg = small_cfg(tmp_path)
    params = dn.init(cfg.model, np.random.default_rng(3))
    ckpt = tmp_path / "untrained.flc"
    write_checkpoint(ckpt, params)
    report = evaluate(ckpt, "test", cfg, small_data)
    assert all(math.isfinite(getattr(report, f)) for f in ("psnr", "ssim", "epe", "flow_consistency", "jitter"))
    assert report.flow_consistency > 0
    again, rows = evaluate_denoiser(load_params(ckpt, cfg), small_data.test, cfg)
    assert again == report
    for name in ("psnr", "ssim", "epe", "flow_consistency", "jitter"):
        assert getattr(report, name) == pytest.approx(sum(getattr(r, name) for r in rows) / len(rows), abs=1e-12)
    assert isinstance(report, EvalReport)


def test_checkpoint_manifest_mismatch_is_rejected(tmp_path):
    cfg = small_cfg(tmp_path)
    other = build_config({"model.features": 8}, base=cfg)
    ckpt = tmp_path / "wide.flc"
    write_checkpoint(ckpt, dn.init(other.model, np.random.default_rng(0)))
    with pytest.raises(tn.ShapeError, match="expects"):
        load_params(ckpt, cfg)
    write_checkpoint(ckpt, {"only": np.zeros(2)})
    with pytest.raises(tn.ShapeError, match="missing"):
        load_params(ckpt, cfg)


def test_unknown_split(tmp_path, small_data):
    cfg = small_cfg(tmp_path)
    write_checkpoint(tmp_path / "c.flc", dn.init(cfg.model, np.random.default_rng(0)))
    with pytest.raises(ValueError, match="unknown split"):
        evaluate(tmp_path / "c.flc", "holdout", cfg, small_data)


# --------------------------------------------------------------- sweep


def test_empty_sweep_is_baseline_only(tmp_path):
    cfg = small_cfg(tmp_path, "sweep", **{"train.total_steps": 2, "train.val_every": 2})
    result = sweep(cfg, [], plots=True)
    rows = read_rows(result.summary_path)
    assert list(rows[0]) == SUMMARY_HEADER
    assert [r["strategy"] for r in rows] == ["baseline"]
    for name in ("summary.png", "comparison.png", "strategies.png", "sigma_gating.png"):
        assert (cfg.output_dir / name).is_file()


def test_sweep_runs_baseline_plus_one_per_psi(tmp_path):
    cfg = small_cfg(tmp_path, "sweep", **{"train.total_steps": 2, "train.val_every": 2})
    result = sweep(cfg, [0.0625, 0.25], plots=False)
    rows = read_rows(result.summary_path)
    assert [r["strategy"] for r in rows] == ["baseline", "gated_psi0.0625", "gated_psi0.25"]
    assert [r["psi"] for r in rows] == ["", "0.0625", "0.25"]
    with pytest.raises(ValueError):
        sweep(cfg, [0.0], plots=False)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("FLOWLOSS_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("FLOWLOSS_THREADS", "zero")
    with pytest.raises(ValueError):
        worker_count()


def test_threaded_evaluation_matches_sequential(tmp_path, small_data, monkeypatch):
    cfg = small_cfg(tmp_path)
    params = dn.init(cfg.model, np.random.default_rng(5))
    monkeypatch.setenv("FLOWLOSS_THREADS", "1")
    seq = evaluate_denoiser(params, small_data.test, cfg)
    monkeypatch.setenv("FLOWLOSS_THREADS", "2")
    assert evaluate_denoiser(params, small_data.test, cfg) == seq
