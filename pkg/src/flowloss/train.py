"""Training loop, evaluation, and the comparison recipes (sweep, ablation).

Randomness is drawn from named streams keyed by ``train.seed``: one noise
level per step (shared by the batch), one noise stream per sample, one batch
draw per step, and one fixed stream for validation sampling noise.  Runs
with equal configs therefore produce identical logs and checkpoints.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import denoiser as dn
from . import tensor as tn
from .config import TrainConfig, build_config, format_config
from .edm import add_noise, euler_generate, make_sigma_schedule, sample_sigma
from .flow import estimate_flow, estimate_occlusion, solver_counter
from .losses import combined_loss, strategy_label
from .metrics import ClipMetrics, EvalReport, clip_metrics
from .rng import stream
from .serialize import read_checkpoint, read_manifest, write_checkpoint, write_tensor
from .synthdata import LabeledClip, SceneTemplate, make_dataset, split

log = logging.getLogger(__name__)

LOG_HEADER = [
    "step",
    "sigma",
    "loss_recon",
    "loss_flow_raw",
    "weight_flow",
    "loss_total",
    "flow_gate_active",
    "val_psnr",
    "val_ssim",
    "val_epe",
    "val_flow_consistency",
    "val_jitter",
    "wall_ms",
]
SUMMARY_HEADER = [
    "strategy",
    "psi",
    "train_seconds",
    "steps",
    "gate_fraction",
    "solver_calls",
    "val_flow_consistency",
    "val_jitter",
    "test_psnr",
    "test_ssim",
    "test_epe",
    "test_flow_consistency",
    "test_jitter",
]


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the step and the path of the diagnostic dump."""

    def __init__(self, step: int, dump_path: Path):
        super().__init__(f"non-finite loss at step {step}; batch dumped to {dump_path}")
        self.step = step
        self.dump_path = dump_path


def worker_count() -> int:
    """Worker cap from ``FLOWLOSS_THREADS`` (default 1)."""
    raw = os.environ.get("FLOWLOSS_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"FLOWLOSS_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"FLOWLOSS_THREADS must be a positive integer, got {raw!r}")
    return value


def _ordered_map(fn: Callable, items: Sequence) -> list:
    """``map`` fanned out over ``worker_count()`` threads; results in index order."""
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------- data


@dataclass
class Datasets:
    train: list[LabeledClip]
    val: list[LabeledClip]
    test: list[LabeledClip]

    def get(self, name: str) -> list[LabeledClip]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}; expected train, val or test")
        return getattr(self, name)


def template_for(cfg: TrainConfig) -> SceneTemplate:
    m = cfg.model
    return SceneTemplate(height=m.height, width=m.width, channels=m.channels, frames=m.frames)


def build_datasets(cfg: TrainConfig) -> Datasets:
    """Generate, split, and annotate every clip with solver flow and occlusion."""
    d = cfg.data
    total = d.n_train + d.n_val + d.n_test
    clips = make_dataset(total, template_for(cfg), d.seed)
    train, val, test = split(clips, (d.n_train / total, d.n_val / total, d.n_test / total), d.seed)
    for part in (train, val, test):
        annotate_flow(part, cfg)
    return Datasets(train, val, test)


def annotate_flow(items: Sequence[LabeledClip], cfg: TrainConfig) -> None:
    """Cache the solver's flow and occlusion for each clean clip (``item.cache``)."""
    todo = [it for it in items if "flow" not in it.cache]
    if not todo:
        return
    clips = np.stack([it.clip for it in todo])
    flows = estimate_flow(clips, cfg.flow).data
    occ = estimate_occlusion(clips, cfg.flow, flow_fwd=flows)
    for it, f, o in zip(todo, flows, occ):
        it.cache["flow"] = f
        it.cache["occlusion"] = o


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.lr = cfg.optim.learning_rate
        self.b1, self.b2, self.eps = cfg.optim.beta1, cfg.optim.beta2, cfg.optim.epsilon
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            out[k] = p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out


# -------------------------------------------------------------- train step


@dataclass
class StepResult:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]
    breakdown: object
    solver_calls: int


def draw_batch(cfg: TrainConfig, step: int, n_train: int) -> np.ndarray:
    size = min(cfg.train.batch_size, n_train)
    return stream(cfg.train.seed, "batch", step).choice(n_train, size=size, replace=False)


def step_sigma(cfg: TrainConfig, step: int) -> float:
    return sample_sigma(stream(cfg.train.seed, "sigma", step), cfg.edm)


def loss_and_grads(
    params: dict[str, np.ndarray],
    batch: Sequence[LabeledClip],
    sigma: float,
    cfg: TrainConfig,
    noise_key: tuple = (),
):
    """Forward and backward for one batch at one noise level.

    Returns ``(grads, breakdown, noisy, solver_calls)``.  Noise for sample
    ``i`` comes from ``stream(train.seed, "noise", *noise_key, i)``.
    """
    y = np.stack([it.clip for it in batch])
    noisy = np.stack([add_noise(it.clip, sigma, stream(cfg.train.seed, "noise", *noise_key, i)) for i, it in enumerate(batch)])
    flow_y = np.stack([it.cache["flow"] for it in batch]) if all("flow" in it.cache for it in batch) else None
    alpha_y = np.stack([it.cache["occlusion"] for it in batch]) if flow_y is not None else None

    tape = tn.Tape()
    tracked = {k: tape.watch(v, k) for k, v in params.items()}
    y_hat = dn.denoise(tracked, noisy, sigma, y[:, 0], cfg.model, cfg.edm)
    before = solver_counter.calls
    total, breakdown = combined_loss(y_hat, y, sigma, cfg.strategy(), cfg.flow, cfg.loss.scale_s, flow_y, alpha_y)
    calls = solver_counter.calls - before
    if not math.isfinite(breakdown.total):
        return None, breakdown, noisy, calls
    grads = tn.backward(tape, total, list(tracked.values()))
    return grads, breakdown, noisy, calls


def train_step(
    params: dict[str, np.ndarray],
    optimizer: Adam,
    data: Sequence[LabeledClip],
    step: int,
    cfg: TrainConfig,
) -> StepResult:
    batch = [data[i] for i in draw_batch(cfg, step, len(data))]
    sigma = step_sigma(cfg, step)
    grads, breakdown, noisy, calls = loss_and_grads(params, batch, sigma, cfg, noise_key=(step,))
    if grads is None:
        dump = cfg.output_dir / f"diverged_step{step}.flc"
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        tensors = {"batch.clean": np.stack([it.clip for it in batch]), "batch.noisy": noisy, "sigma": np.array([sigma])}
        tensors.update({f"param.{k}": v for k, v in params.items()})
        write_checkpoint(dump, tensors)
        raise TrainingDiverged(step, dump)
    return StepResult(optimizer.step(params, grads), grads, breakdown, calls)


# -------------------------------------------------------------- validation


def generate(params, conds: np.ndarray, cfg: TrainConfig, seed_key: tuple = ("val_noise",)) -> np.ndarray:
    """Euler-sample one clip per conditioning frame (batched)."""
    schedule = make_sigma_schedule(cfg.sample.n_steps, cfg.sample.sigma_min, cfg.sample.sigma_max, cfg.sample.rho)

    def denoiser(x, sigma, cond):
        return dn.denoise(params, x, sigma, cond, cfg.model, cfg.edm).data

    shape = (len(conds),) + cfg.model.clip_shape
    return euler_generate(denoiser, stream(cfg.train.seed, *seed_key), schedule, conds, shape)


def evaluate_generated(generated: np.ndarray, items: Sequence[LabeledClip], cfg: TrainConfig) -> tuple[EvalReport, list[ClipMetrics]]:
    per_clip = _ordered_map(lambda pair: clip_metrics(pair[0], pair[1], cfg.flow), list(zip(generated, items)))
    return EvalReport.mean_of(per_clip), per_clip


def validate(params, items: Sequence[LabeledClip], cfg: TrainConfig) -> tuple[EvalReport, np.ndarray]:
    generated = generate(params, np.stack([it.clip[0] for it in items]), cfg)
    report, _ = evaluate_generated(generated, items, cfg)
    return report, generated


# -------------------------------------------------------------------- train


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    rows: list[dict]
    solver_calls: int
    gate_steps: int
    seconds: float
    last_val: EvalReport | None
    output_dir: Path

    @property
    def gate_fraction(self) -> float:
        return self.gate_steps / max(len(self.rows), 1)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def train(cfg: TrainConfig, data: Datasets | None = None, dump_flow: bool = False, plots: bool = True) -> TrainResult:
    """Run the configured training; writes ``log.csv`` and ``ckpt_final.flc`` to ``train.output_dir``."""
    if not cfg.train.output_dir:
        raise ValueError("train.output_dir must be set")
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(format_config(cfg))
    data = data or build_datasets(cfg)
    annotate_flow(data.train, cfg)
    annotate_flow(data.val, cfg)

    start = time.perf_counter()
    params = dn.init(cfg.model, stream(cfg.train.seed, "init"))
    optimizer = Adam(params, cfg)
    rows, total_calls, gate_steps, last_val = [], 0, 0, None
    with open(out / "log.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for step in range(1, cfg.train.total_steps + 1):
            t0 = time.perf_counter()
            result = train_step(params, optimizer, data.train, step, cfg)
            params = result.params
            b = result.breakdown
            total_calls += result.solver_calls
            gate_steps += int(b.gate_active)
            row = {
                "step": step,
                "sigma": b.sigma,
                "loss_recon": b.loss_recon,
                "loss_flow_raw": b.loss_flow_raw,
                "weight_flow": b.weight_flow,
                "loss_total": b.total,
                "flow_gate_active": int(b.gate_active),
            }
            if step % cfg.train.val_every == 0 or step == cfg.train.total_steps:
                last_val, generated = validate(params, data.val, cfg)
                row.update(
                    val_psnr=last_val.psnr,
                    val_ssim=last_val.ssim,
                    val_epe=last_val.epe,
                    val_flow_consistency=last_val.flow_consistency,
                    val_jitter=last_val.jitter,
                )
                log.info(
                    "%s step %d: flow_consistency=%.4g jitter=%.4g psnr=%.2f",
                    out.name, step, last_val.flow_consistency, last_val.jitter, last_val.psnr,
                )
                if dump_flow:
                    _dump_flow(out / "flow_dump" / f"step{step}", generated, data.val, cfg)
            if cfg.log.wall_ms:
                row["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            writer.writerow([_fmt(row.get(k)) for k in LOG_HEADER])
            rows.append(row)
    seconds = time.perf_counter() - start
    write_checkpoint(out / "ckpt_final.flc", params)
    if plots:
        from .report import plot_run

        plot_run(out / "log.csv", out / "curves.png", title=strategy_label(cfg.strategy()))
    return TrainResult(params, rows, total_calls, gate_steps, seconds, last_val, out)


def _dump_flow(directory: Path, generated: np.ndarray, items: Sequence[LabeledClip], cfg: TrainConfig) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    flows = estimate_flow(generated, cfg.flow).data
    for i, (it, gen, f) in enumerate(zip(items, generated, flows)):
        write_tensor(directory / f"val{i}_generated.flc", gen)
        write_tensor(directory / f"val{i}_flow_generated.flc", f)
        write_tensor(directory / f"val{i}_flow_reference.flc", it.cache["flow"])
        write_tensor(directory / f"val{i}_occlusion_reference.flc", it.cache["occlusion"])
        write_tensor(directory / f"val{i}_flow_analytic.flc", it.gt_flow)


# ----------------------------------------------------------------- evaluate


def load_params(checkpoint: str | Path, cfg: TrainConfig) -> dict[str, np.ndarray]:
    """Read a checkpoint, insisting its manifest matches the configured model."""
    expected = dn.param_shapes(cfg.model)
    manifest = {name: shape for name, _, shape in read_manifest(checkpoint)}
    if set(manifest) != set(expected):
        missing = sorted(set(expected) - set(manifest))
        extra = sorted(set(manifest) - set(expected))
        raise tn.ShapeError(f"checkpoint {checkpoint} does not match the model: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if manifest[name] != shape:
            raise tn.ShapeError(f"checkpoint {checkpoint}: {name} has shape {manifest[name]}, model expects {shape}")
    stored = read_checkpoint(checkpoint)
    return {name: stored[name] for name in expected}


def evaluate_denoiser(params, items: Sequence[LabeledClip], cfg: TrainConfig, generator: Callable | None = None) -> tuple[EvalReport, list[ClipMetrics]]:
    """Generate one clip per item from its first frame and score it.

    ``generator(conds) -> clips`` replaces sampling from ``params`` when given
    (used for stub models in tests).
    """
    annotate_flow(items, cfg)
    conds = np.stack([it.clip[0] for it in items])
    generated = generator(conds) if generator is not None else generate(params, conds, cfg, ("eval_noise",))
    return evaluate_generated(generated, items, cfg)


def evaluate(checkpoint: str | Path, split_name: str, cfg: TrainConfig, data: Datasets | None = None) -> EvalReport:
    params = load_params(checkpoint, cfg)
    data = data or build_datasets(cfg)
    report, _ = evaluate_denoiser(params, data.get(split_name), cfg)
    return report


# --------------------------------------------------------- sweep / ablation


def _run_variant(cfg: TrainConfig, label: str, overrides: dict, data: Datasets, root: Path) -> tuple[TrainResult, EvalReport]:
    run_cfg = build_config({**overrides, "train.output_dir": str(root / label)}, base=cfg)
    result = train(run_cfg, data)
    test_report, _ = evaluate_denoiser(result.params, data.test, run_cfg)
    return result, test_report


def _write_summary(path: Path, entries: list[tuple[str, float | None, TrainResult, EvalReport]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for name, psi, res, rep in entries:
            val = res.last_val
            writer.writerow(
                [
                    name,
                    _fmt(psi),
                    f"{res.seconds:.3f}",
                    len(res.rows),
                    _fmt(res.gate_fraction),
                    res.solver_calls,
                    _fmt(val.flow_consistency if val else None),
                    _fmt(val.jitter if val else None),
                    _fmt(rep.psnr),
                    _fmt(rep.ssim),
                    _fmt(rep.epe),
                    _fmt(rep.flow_consistency),
                    _fmt(rep.jitter),
                ]
            )


@dataclass
class ComparisonResult:
    runs: dict[str, TrainResult] = field(default_factory=dict)
    tests: dict[str, EvalReport] = field(default_factory=dict)
    summary_path: Path | None = None


def sweep(cfg: TrainConfig, psi_values: Sequence[float], plots: bool = True) -> ComparisonResult:
    """Baseline plus one gated run per ``psi``, shared data and seed; writes ``summary.csv``."""
    for psi in psi_values:
        if not psi > 0:
            raise ValueError(f"psi values must be positive, got {psi}")
    root = cfg.output_dir
    root.mkdir(parents=True, exist_ok=True)
    data = build_datasets(cfg)
    variants = [("baseline", None, {"loss.strategy": "baseline"})]
    variants += [(f"gated_psi{psi:g}", psi, {"loss.strategy": "gated", "loss.psi": psi}) for psi in psi_values]
    return _compare(cfg, variants, data, root, plots, psi_values)


def ablation(cfg: TrainConfig, plots: bool = True) -> ComparisonResult:
    """Baseline vs small-sigma vs large-sigma weighted averages (shared ``loss.psi``, default 0.125)."""
    root = cfg.output_dir
    root.mkdir(parents=True, exist_ok=True)
    data = build_datasets(cfg)
    psi = cfg.loss.psi if cfg.loss.psi is not None else 0.125
    variants = [
        ("baseline", None, {"loss.strategy": "baseline"}),
        ("wavg_ss", psi, {"loss.strategy": "wavg_ss", "loss.psi": psi}),
        ("wavg_ls", psi, {"loss.strategy": "wavg_ls", "loss.psi": psi}),
    ]
    return _compare(cfg, variants, data, root, plots, [psi])


def _compare(cfg, variants, data, root: Path, plots: bool, psi_values) -> ComparisonResult:
    out = ComparisonResult()
    entries = []
    for name, psi, overrides in variants:
        res, rep = _run_variant(cfg, name, overrides, data, root)
        out.runs[name], out.tests[name] = res, rep
        entries.append((name, psi, res, rep))
    out.summary_path = root / "summary.csv"
    _write_summary(out.summary_path, entries)
    if plots:
        from .report import plot_comparison, plot_sigma_gating, plot_strategies, plot_summary

        plot_summary(out.summary_path, root / "summary.png")
        plot_comparison({name: root / name / "log.csv" for name, _, _ in variants}, root / "comparison.png")
        plot_strategies(list(psi_values) or [0.125], root / "strategies.png")
        plot_sigma_gating(list(psi_values) or [0.125], cfg.edm, root / "sigma_gating.png")
    return out


def with_overrides(cfg: TrainConfig, **values) -> TrainConfig:
    """``with_overrides(cfg, train__seed=3)`` → ``train.seed = 3``."""
    return build_config({k.replace("__", "."): v for k, v in values.items()}, base=cfg)


__all__ = [
    "Adam",
    "ComparisonResult",
    "Datasets",
    "LOG_HEADER",
    "SUMMARY_HEADER",
    "TrainResult",
    "TrainingDiverged",
    "ablation",
    "annotate_flow",
    "build_datasets",
    "evaluate",
    "evaluate_denoiser",
    "generate",
    "load_params",
    "loss_and_grads",
    "sweep",
    "train",
    "train_step",
    "validate",
    "with_overrides",
    "worker_count",
]
