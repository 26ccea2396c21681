"""Figures rendered next to the CSV outputs (matplotlib, non-interactive)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .edm import EdmConfig, gating_fraction, gating_weight  # noqa: E402
from .losses import WeightedAverage, strategy_weights  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
STYLE = {
    "font.size": 8,
    "axes.labelsize": 8,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "lines.linewidth": 1.2,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}
VAL_PANELS = [
    ("val_flow_consistency", "flow consistency (px²)"),
    ("val_jitter", "background jitter"),
    ("val_psnr", "PSNR (dB)"),
    ("val_ssim", "SSIM"),
]


def figure_size(width: float = 6.5, rows: int = 1) -> tuple[float, float]:
    return width, width * GOLDEN * 0.5 * rows


def read_log(path: str | Path) -> dict[str, np.ndarray]:
    """Columns of a ``log.csv``; empty cells become NaN."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        names = reader.fieldnames or []
    return {n: np.array([float(r[n]) if r[n] != "" else np.nan for r in rows]) for n in names}


def _val_points(log: Mapping[str, np.ndarray], key: str) -> tuple[np.ndarray, np.ndarray]:
    keep = ~np.isnan(log[key])
    return log["step"][keep], log[key][keep]


def _smooth(values: np.ndarray, width: int) -> np.ndarray:
    width = max(1, min(width, len(values)))
    return np.convolve(values, np.ones(width) / width, mode="valid")


def plot_run(log_path: str | Path, out_path: str | Path, title: str = "") -> Path:
    """Training losses plus validation curves of one run."""
    log = read_log(log_path)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=figure_size(7.5))
        steps = log["step"]
        width = max(1, len(steps) // 20)
        axes[0].semilogy(steps, log["loss_recon"], color="0.8", lw=0.6)
        axes[0].semilogy(steps[width - 1 :], _smooth(log["loss_recon"], width), color="C0", label="L_recon")
        active = log["flow_gate_active"] == 1
        if active.any():
            axes[0].semilogy(steps[active], log["loss_flow_raw"][active], ".", ms=2, color="C3", label="L_flow (raw)")
        axes[0].set_xlabel("step")
        axes[0].set_title("training loss")
        axes[0].legend(frameon=False)
        for ax, (key, label) in zip(axes[1:], VAL_PANELS[:2]):
            x, y = _val_points(log, key)
            ax.plot(x, y, "o-", ms=3)
            ax.set_xlabel("step")
            ax.set_title(label)
        if title:
            fig.suptitle(title)
        fig.savefig(out_path)
        plt.close(fig)
    return Path(out_path)


def plot_comparison(logs: Mapping[str, str | Path], out_path: str | Path) -> Path:
    """Validation curves of several runs overlaid, one panel per metric."""
    data = {name: read_log(p) for name, p in logs.items()}
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(VAL_PANELS), figsize=figure_size(9.0))
        for ax, (key, label) in zip(axes, VAL_PANELS):
            for i, (name, log) in enumerate(data.items()):
                x, y = _val_points(log, key)
                ax.plot(x, y, "o-", ms=3, color=f"C{i}", label=name)
            ax.set_xlabel("step")
            ax.set_title(label)
        axes[0].legend(frameon=False)
        fig.savefig(out_path)
        plt.close(fig)
    return Path(out_path)


def plot_strategies(psi_values: Sequence[float], out_path: str | Path) -> Path:
    """Flow-loss weight as a function of sigma for each combination rule."""
    sigmas = np.logspace(-3, 1.5, 600)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=figure_size(6.5))
        for i, psi in enumerate(psi_values):
            axes[0].plot(sigmas, [gating_weight(s, psi) for s in sigmas], color=f"C{i}", label=f"w_ψ, ψ={psi:g}")
        axes[0].plot(sigmas, 1.0 / (sigmas**2 + 1.0), ":", color="0.5", label="1/(σ²+1)")
        axes[0].set_title("additive gating: flow weight")
        psi = psi_values[len(psi_values) // 2]
        for mode, color in (("small", "C0"), ("large", "C3")):
            weights = [strategy_weights(WeightedAverage(mode, psi), s)[1] for s in sigmas]
            axes[1].plot(sigmas, weights, color=color, label=f"w_{'ss' if mode == 'small' else 'ls'} (ψ={psi:g})")
        axes[1].set_title("weighted average: flow weight")
        for ax in axes:
            ax.set_xscale("log")
            ax.set_xlabel("σ")
            ax.set_ylim(-0.05, 1.1)
            ax.legend(frameon=False)
        fig.savefig(out_path)
        plt.close(fig)
    return Path(out_path)


def plot_sigma_gating(psi_values: Sequence[float], cfg: EdmConfig, out_path: str | Path) -> Path:
    """Training noise-level density with each threshold and the share of steps below it."""
    log_sigma = np.linspace(cfg.p_mean - 4 * cfg.p_std, cfg.p_mean + 4 * cfg.p_std, 400)
    density = np.exp(-0.5 * ((log_sigma - cfg.p_mean) / cfg.p_std) ** 2) / (cfg.p_std * np.sqrt(2 * np.pi))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size(4.0, rows=2))
        ax.plot(np.exp(log_sigma), density, color="k")
        for i, psi in enumerate(sorted(psi_values)):
            ax.axvline(psi, color=f"C{i}", ls="--")
            frac = gating_fraction(psi, cfg)
            ax.fill_between(np.exp(log_sigma), density, where=np.exp(log_sigma) < psi, color=f"C{i}", alpha=0.15)
            ax.text(psi, density.max() * (0.95 - 0.1 * i), f" ψ={psi:g}: {100 * frac:.1f}%", color=f"C{i}", fontsize=7)
        ax.set_xscale("log")
        ax.set_xlabel("σ")
        ax.set_ylabel("density of ln σ")
        ax.set_title(f"ln σ ~ N({cfg.p_mean:g}, {cfg.p_std:g}²)")
        fig.savefig(out_path)
        plt.close(fig)
    return Path(out_path)


def plot_summary(summary_path: str | Path, out_path: str | Path) -> Path:
    """Bar charts of training time and test metrics from a ``summary.csv``."""
    with open(summary_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    names = [r["strategy"] for r in rows]
    panels = [("train_seconds", "training time (s)"), ("test_flow_consistency", "test flow consistency"), ("test_jitter", "test jitter")]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=figure_size(7.5))
        for ax, (key, label) in zip(axes, panels):
            ax.bar(range(len(rows)), [float(r[key]) for r in rows], color=[f"C{i}" for i in range(len(rows))])
            ax.set_xticks(range(len(rows)), names, rotation=30, ha="right")
            ax.set_title(label)
        fig.savefig(out_path)
        plt.close(fig)
    return Path(out_path)


__all__ = ["plot_comparison", "plot_run", "plot_sigma_gating", "plot_strategies", "plot_summary", "read_log"]
