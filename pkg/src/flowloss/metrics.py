"""Frame-fidelity and motion metrics for generated clips."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .flow import FlowSolverConfig, endpoint_error, estimate_flow, estimate_occlusion
from .losses import occlusion_weight

PSNR_PEAK = 2.0  # data range of [-1, 1] clips
PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = (0.01 * PSNR_PEAK) ** 2
SSIM_C2 = (0.03 * PSNR_PEAK) ** 2


def _pair(a, b, name: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name}: shapes differ {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with peak 2; identical inputs give 99 dB."""
    a, b = _pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(PSNR_PEAK**2 / mse), PSNR_CAP)


def ssim(a, b) -> float:
    """Mean single-scale SSIM over all 8×8 windows of every frame and channel.

    Clips are ``T×H×W×C`` (a single ``H×W`` frame also works).  Window
    statistics use population (divide-by-N) moments.
    """
    a, b = _pair(a, b, "ssim")
    if a.ndim == 2:
        a, b = a[None, :, :, None], b[None, :, :, None]
    if a.ndim != 4:
        raise ValueError(f"ssim: expected T×H×W×C clips, got shape {a.shape}")
    if a.shape[1] < SSIM_WINDOW or a.shape[2] < SSIM_WINDOW:
        raise ValueError(f"ssim: frames must be at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {a.shape[1]}×{a.shape[2]}")
    win = (SSIM_WINDOW, SSIM_WINDOW)
    wa = sliding_window_view(a, win, axis=(1, 2))
    wb = sliding_window_view(b, win, axis=(1, 2))
    mu_a, mu_b = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
    da, db = wa - mu_a[..., None, None], wb - mu_b[..., None, None]
    var_a, var_b = (da**2).mean(axis=(-2, -1)), (db**2).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    # |SSIM| <= 1 holds exactly; the clip only removes last-ulp rounding.
    return float(np.mean(np.clip(num / den, -1.0, 1.0)))


def flow_consistency(
    gen,
    gt,
    flow_cfg: FlowSolverConfig,
    flow_gt: np.ndarray | None = None,
    alpha_gt: np.ndarray | None = None,
) -> float:
    """Mean over pairs and pixels of ``o(alpha^gt) * |f^gt - f^gen|^2`` (no lambda, no s)."""
    gen, gt = _pair(gen, gt, "flow_consistency")
    if gt.shape[-4] < 2:
        raise ValueError(f"flow_consistency: need at least 2 frames, got {gt.shape[-4]}")
    if flow_gt is None:
        flow_gt = estimate_flow(gt, flow_cfg).data
    if alpha_gt is None:
        alpha_gt = estimate_occlusion(gt, flow_cfg, flow_fwd=flow_gt)
    return _weighted_flow_gap(flow_gt, estimate_flow(gen, flow_cfg).data, alpha_gt)


def _weighted_flow_gap(flow_gt: np.ndarray, flow_gen: np.ndarray, alpha_gt: np.ndarray) -> float:
    sq = np.sum((flow_gt - flow_gen) ** 2, axis=-1)
    return float(np.mean(occlusion_weight(alpha_gt) * sq))


def jitter(clip, static_mask: np.ndarray) -> float:
    """Mean absolute frame-to-frame change over ``static_mask`` pixels (all channels)."""
    clip = np.asarray(getattr(clip, "data", clip), dtype=np.float64)
    mask = np.asarray(static_mask, dtype=bool)
    if mask.shape != clip.shape[1:3]:
        raise ValueError(f"jitter: mask shape {mask.shape} does not match frame {clip.shape[1:3]}")
    if clip.shape[0] < 2 or not mask.any():
        return 0.0
    diff = np.abs(np.diff(clip, axis=0))
    return float(diff[:, mask, :].mean())


@dataclass(frozen=True)
class EvalReport:
    psnr: float
    ssim: float
    epe: float
    flow_consistency: float
    jitter: float
    n_clips: int

    @classmethod
    def mean_of(cls, rows: Sequence["ClipMetrics"]) -> "EvalReport":
        if not rows:
            raise ValueError("cannot summarise an empty evaluation set")
        names = [f.name for f in fields(ClipMetrics)]
        means = {n: float(np.mean([getattr(r, n) for r in rows])) for n in names}
        return cls(n_clips=len(rows), **means)


@dataclass(frozen=True)
class ClipMetrics:
    psnr: float
    ssim: float
    epe: float
    flow_consistency: float
    jitter: float


def clip_metrics(gen: np.ndarray, item, flow_cfg: FlowSolverConfig) -> ClipMetrics:
    """All metrics for one generated clip against a labelled ground-truth item.

    ``item`` provides ``clip``, ``gt_flow``, ``static_mask`` and an optional
    ``cache`` dict holding the solver's flow/occlusion for the clean clip.
    """
    cache = getattr(item, "cache", {})
    flow_gt = cache.get("flow")
    if flow_gt is None:
        flow_gt = estimate_flow(item.clip, flow_cfg).data
    alpha_gt = cache.get("occlusion")
    if alpha_gt is None:
        alpha_gt = estimate_occlusion(item.clip, flow_cfg, flow_fwd=flow_gt)
    flow_gen = estimate_flow(gen, flow_cfg).data
    return ClipMetrics(
        psnr=psnr(gen, item.clip),
        ssim=ssim(gen, item.clip),
        epe=endpoint_error(flow_gen, item.gt_flow),
        flow_consistency=_weighted_flow_gap(flow_gt, flow_gen, alpha_gt),
        jitter=jitter(gen, item.static_mask),
    )
