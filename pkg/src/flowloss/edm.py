"""EDM noise levels: sampling, loss weighting, gating, preconditioning, sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "EdmConfig",
    "PreconditionCoeffs",
    "add_noise",
    "check_sigma",
    "euler_generate",
    "gating_fraction",
    "gating_weight",
    "lambda_weight",
    "make_sigma_schedule",
    "precondition",
    "sample_sigma",
    "sample_sigmas",
]


def check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not (sigma > 0.0 and math.isfinite(sigma)):
        raise ValueError(f"noise level must be positive and finite, got {sigma!r}")
    return sigma


@dataclass(frozen=True)
class EdmConfig:
    """Log-normal noise prior and data scale."""

    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 0.5

    def __post_init__(self):
        if not self.p_std > 0:
            raise ValueError(f"p_std must be positive, got {self.p_std}")
        if not self.sigma_data > 0:
            raise ValueError(f"sigma_data must be positive, got {self.sigma_data}")


@dataclass(frozen=True)
class PreconditionCoeffs:
    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


def sample_sigma(rng: np.random.Generator, cfg: EdmConfig) -> float:
    """Draw one noise level with ``ln(sigma) ~ N(p_mean, p_std^2)``."""
    return math.exp(cfg.p_mean + cfg.p_std * rng.standard_normal())


def sample_sigmas(rng: np.random.Generator, cfg: EdmConfig, n: int) -> np.ndarray:
    """Vectorised :func:`sample_sigma`; consumes the stream identically to ``n`` scalar draws."""
    return np.exp(cfg.p_mean + cfg.p_std * rng.standard_normal(n))


def lambda_weight(sigma: float) -> float:
    """Noise-aware loss weight ``(sigma^2 + 1) / sigma^2``."""
    sigma = check_sigma(sigma)
    s2 = sigma * sigma
    return (s2 + 1.0) / s2


def gating_weight(sigma: float, psi: float) -> float:
    """Hard gate: ``1 / (sigma^2 + 1)`` strictly below ``psi``, else 0."""
    if not psi > 0:
        raise ValueError(f"psi must be positive, got {psi}")
    if sigma < psi:
        return 1.0 / (sigma * sigma + 1.0)
    return 0.0


def _normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def gating_fraction(psi: float, cfg: EdmConfig) -> float:
    """Probability under the noise prior that ``sigma < psi``."""
    if not psi > 0:
        raise ValueError(f"psi must be positive, got {psi}")
    return _normal_cdf((math.log(psi) - cfg.p_mean) / cfg.p_std)


def add_noise(clip: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``clip + sigma * n`` with ``n`` drawn from ``rng`` in row-major order."""
    noise = rng.standard_normal(np.shape(clip))
    return np.asarray(clip, dtype=np.float64) + sigma * noise


def precondition(sigma: float, cfg: EdmConfig) -> PreconditionCoeffs:
    sigma = check_sigma(sigma)
    sd = cfg.sigma_data
    denom = sigma * sigma + sd * sd
    root = math.sqrt(denom)
    return PreconditionCoeffs(
        c_skip=sd * sd / denom,
        c_out=sigma * sd / root,
        c_in=1.0 / root,
        c_noise=math.log(sigma) / 4.0,
    )


def make_sigma_schedule(n_steps: int, sigma_min: float, sigma_max: float, rho: float = 7.0) -> np.ndarray:
    """Power-interpolated decreasing schedule from ``sigma_max`` to ``sigma_min``, then 0."""
    if n_steps < 2:
        raise ValueError(f"n_steps must be >= 2, got {n_steps}")
    if not 0 < sigma_min < sigma_max:
        raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    inv = 1.0 / rho
    lo, hi = sigma_min**inv, sigma_max**inv
    ramp = np.arange(n_steps) / (n_steps - 1)
    sigmas = (hi + ramp * (lo - hi)) ** rho
    sigmas[0], sigmas[-1] = sigma_max, sigma_min
    return np.append(sigmas, 0.0)


Denoiser = Callable[[np.ndarray, float, np.ndarray], np.ndarray]


def euler_generate(
    denoiser: Denoiser,
    init_seed: int | np.random.Generator,
    schedule: np.ndarray,
    conditioning_frame: np.ndarray,
    shape: tuple[int, ...],
) -> np.ndarray:
    """Deterministic Euler integration of the probability-flow ODE.

    Starts from ``schedule[0] * n`` with ``n`` standard normal of ``shape``
    and calls ``denoiser(x, sigma, conditioning_frame)`` once per step.
    The result is clamped to ``[-1, 1]``.
    """
    rng = init_seed if isinstance(init_seed, np.random.Generator) else np.random.default_rng(init_seed)
    schedule = np.asarray(schedule, dtype=np.float64)
    x = schedule[0] * rng.standard_normal(shape)
    for cur, nxt in zip(schedule[:-1], schedule[1:]):
        d = (x - denoiser(x, float(cur), conditioning_frame)) / cur
        x = x + (nxt - cur) * d
    return np.clip(x, -1.0, 1.0)
