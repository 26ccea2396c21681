"""Reconstruction and flow losses and the noise-dependent ways of combining them.

``L = w_r(sigma) * L_recon + w_f(sigma) * L_flow`` where

* ``L_recon = lambda(sigma) * MSE(y_hat, y)``
* ``L_flow = s * lambda(sigma) * sum_t mean_pixels o(alpha^y_t) * |f^y_t - f^yhat_t|^2``

and the weights ``(w_r, w_f)`` come from a :data:`WeightStrategy`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Union

import numpy as np

from . import tensor as tn
from .edm import check_sigma, gating_weight, lambda_weight
from .flow import FlowSolverConfig, estimate_flow, estimate_occlusion
from .tensor import Tensor

OCCLUDED_WEIGHT = 0.3
DEFAULT_SCALE_S = 1e-6


@dataclass(frozen=True)
class Baseline:
    """Reconstruction only."""

    name = "baseline"


@dataclass(frozen=True)
class AdditiveGated:
    """``L_recon + w_psi(sigma) * L_flow`` with the hard gate at ``psi``."""

    psi: float
    name = "gated"

    def __post_init__(self):
        if not self.psi > 0:
            raise ValueError(f"psi must be positive, got {self.psi}")


@dataclass(frozen=True)
class WeightedAverage:
    """``(1 - w) * L_recon + w * L_flow`` with ``w`` a hard switch at ``psi``.

    ``mode="small"`` uses flow only below ``psi``; ``mode="large"`` only at
    or above it.
    """

    mode: Literal["small", "large"]
    psi: float = 0.125

    def __post_init__(self):
        if self.mode not in ("small", "large"):
            raise ValueError(f"weighted-average mode must be 'small' or 'large', got {self.mode!r}")
        if not self.psi > 0:
            raise ValueError(f"psi must be positive, got {self.psi}")

    @property
    def name(self) -> str:
        return "wavg_ss" if self.mode == "small" else "wavg_ls"


WeightStrategy = Union[Baseline, AdditiveGated, WeightedAverage]


def make_strategy(name: str, psi: float | None = None) -> WeightStrategy:
    """Build a strategy from its config name (``baseline``, ``gated``, ``wavg_ss``, ``wavg_ls``)."""
    if name == "baseline":
        return Baseline()
    if name == "gated":
        if psi is None:
            raise ValueError("strategy 'gated' requires psi")
        return AdditiveGated(psi)
    if name in ("wavg_ss", "wavg_ls"):
        mode = "small" if name == "wavg_ss" else "large"
        return WeightedAverage(mode) if psi is None else WeightedAverage(mode, psi)
    raise ValueError(f"unknown loss strategy {name!r}; expected baseline, gated, wavg_ss or wavg_ls")


def strategy_label(strategy: WeightStrategy) -> str:
    """Short human-readable label, e.g. ``gated(psi=0.125)``."""
    psi = getattr(strategy, "psi", None)
    return strategy.name if psi is None else f"{strategy.name}(psi={psi:g})"


@dataclass(frozen=True)
class LossBreakdown:
    loss_recon: float
    loss_flow_raw: float
    weight_recon: float
    weight_flow: float
    total: float
    sigma: float
    flow_skipped: bool

    @property
    def gate_active(self) -> bool:
        return not self.flow_skipped


def strategy_weights(strategy: WeightStrategy, sigma: float) -> tuple[float, float]:
    """``(weight_recon, weight_flow)`` at noise level ``sigma``."""
    if isinstance(strategy, Baseline):
        return 1.0, 0.0
    if isinstance(strategy, AdditiveGated):
        return 1.0, gating_weight(sigma, strategy.psi)
    if isinstance(strategy, WeightedAverage):
        below = sigma < strategy.psi
        flow_only = below if strategy.mode == "small" else not below
        return (0.0, 1.0) if flow_only else (1.0, 0.0)
    raise TypeError(f"not a weight strategy: {strategy!r}")


def recon_loss(y_hat, y, sigma: float) -> Tensor:
    """``lambda(sigma) * mean((y_hat - y)^2)`` over all elements."""
    y_hat, y = tn._as_tensor(y_hat), tn._as_tensor(y)
    if y_hat.shape != y.shape:
        raise tn.ShapeError(f"recon_loss: prediction {y_hat.shape} and target {y.shape} differ")
    return tn.scalar_scale(tn.reduce_mean(tn.square(tn.subtract(y_hat, y))), lambda_weight(sigma))


def occlusion_weight(alpha) -> np.ndarray:
    """Visible (1) pixels weigh 1.0, occluded (0) pixels 0.3."""
    alpha = np.asarray(getattr(alpha, "data", alpha), dtype=np.float64)
    if not np.all((alpha == 0.0) | (alpha == 1.0)):
        bad = alpha[(alpha != 0.0) & (alpha != 1.0)].ravel()[0]
        raise ValueError(f"occlusion mask must be binary, found value {bad!r}")
    return np.where(alpha == 1.0, 1.0, OCCLUDED_WEIGHT)


def flow_loss(f_y, f_yhat, alpha_y, sigma: float, scale_s: float = DEFAULT_SCALE_S) -> Tensor:
    """``s * lambda(sigma) * sum over pairs of the pixel-mean o(alpha)*|df|^2``.

    Flows are ``...×P×H×W×2`` (``P`` frame pairs), the mask ``...×P×H×W``.
    Leading batch axes are averaged.
    """
    f_y, f_yhat = tn._as_tensor(f_y), tn._as_tensor(f_yhat)
    if f_y.shape != f_yhat.shape or f_y.shape[-1] != 2 or len(f_y.shape) < 4:
        raise tn.ShapeError(f"flow_loss: flow shapes {f_y.shape} and {f_yhat.shape} must match as ...×P×H×W×2")
    weight = occlusion_weight(alpha_y)
    if weight.shape != f_y.shape[:-1]:
        raise tn.ShapeError(f"flow_loss: mask shape {weight.shape} does not match flow {f_y.shape}")
    if not scale_s > 0:
        raise ValueError(f"scale_s must be positive, got {scale_s}")
    sq = tn.reduce_sum(tn.square(tn.subtract(f_y, f_yhat)), axis=-1)
    n_pairs = f_y.shape[-4]
    per_pair_mean = tn.reduce_mean(tn.multiply(sq, weight))
    return tn.scalar_scale(per_pair_mean, scale_s * lambda_weight(sigma) * n_pairs)


def combined_loss(
    y_hat,
    y: np.ndarray,
    sigma: float,
    strategy: WeightStrategy,
    flow_cfg: FlowSolverConfig,
    scale_s: float = DEFAULT_SCALE_S,
    flow_y: np.ndarray | None = None,
    alpha_y: np.ndarray | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Total loss node and its breakdown for one (batch of) clip(s).

    ``flow_y``/``alpha_y`` may carry precomputed ground-truth flow and
    occlusion; otherwise they are estimated from ``y``.  When the flow weight
    is zero the flow solver is not run at all.
    """
    sigma = check_sigma(sigma)
    y = np.asarray(y, dtype=np.float64)
    w_r, w_f = strategy_weights(strategy, sigma)
    l_recon = recon_loss(y_hat, y, sigma)
    if w_f == 0.0:
        total = tn.scalar_scale(l_recon, w_r)
        value = w_r * l_recon.item() + w_f * 0.0
        return total, LossBreakdown(l_recon.item(), 0.0, w_r, w_f, value, sigma, True)
    if flow_y is None:
        flow_y = estimate_flow(y, flow_cfg).data
    if alpha_y is None:
        alpha_y = estimate_occlusion(y, flow_cfg, flow_fwd=flow_y)
    l_flow = flow_loss(flow_y, estimate_flow(y_hat, flow_cfg), alpha_y, sigma, scale_s)
    total = tn.add(tn.scalar_scale(l_recon, w_r), tn.scalar_scale(l_flow, w_f))
    value = w_r * l_recon.item() + w_f * l_flow.item()
    return total, LossBreakdown(l_recon.item(), l_flow.item(), w_r, w_f, value, sigma, False)
