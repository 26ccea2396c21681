"""Trainable denoiser: per-frame residual conv net with a temporal mixing layer.

Layout inside the network is ``(B*T)×F×H×W``; clips enter and leave as
``B×T×H×W×C``.  The clean first frame is concatenated to every noisy frame
as extra input channels.  The noise level enters through a learned
per-channel bias looked up from 32 buckets of ``ln(sigma)`` over ``[-4, 4]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as tn
from .edm import EdmConfig, precondition
from .tensor import Tensor

N_BUCKETS = 32
LOG_SIGMA_RANGE = (-4.0, 4.0)


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 4
    height: int = 16
    width: int = 16
    channels: int = 1
    features: int = 16
    blocks: int = 2

    def __post_init__(self):
        for name in ("frames", "height", "width", "channels", "features", "blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.features < self.channels:
            raise ValueError(f"model.features ({self.features}) must be >= model.channels ({self.channels})")

    @property
    def clip_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.channels)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in canonical (checkpoint) order."""
    f, c = cfg.features, cfg.channels
    shapes: dict[str, tuple[int, ...]] = {
        "in.w": (f, 2 * c, 3, 3),
        "in.b": (f,),
        "embed": (N_BUCKETS, f),
    }
    for i in range(cfg.blocks):
        shapes[f"block{i}.w1"] = (f, f, 3, 3)
        shapes[f"block{i}.b1"] = (f,)
        shapes[f"block{i}.w2"] = (f, f, 3, 3)
        shapes[f"block{i}.b2"] = (f,)
    shapes["tmix.w"] = (f, 3)
    shapes["tmix.b"] = (f,)
    shapes["out.w"] = (c, f, 3, 3)
    shapes["out.b"] = (c,)
    return shapes


def init(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Kaiming-normal kernels; zero biases, embeddings and residual output layers."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        zero = (
            len(shape) == 1
            or name == "embed"
            or name == "tmix.w"
            or name.endswith(".w2")
        )
        if zero:
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        gain = 1.0 if name == "out.w" else 2.0
        params[name] = rng.standard_normal(shape) * math.sqrt(gain / fan_in)
    return params


def count_params(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.size(getattr(p, "data", p)) for p in params.values()))


def noise_bucket(c_noise: float) -> int:
    """Embedding row for ``c_noise = ln(sigma)/4``; out-of-range values clamp."""
    lo, hi = LOG_SIGMA_RANGE
    pos = (4.0 * c_noise - lo) / (hi - lo) * N_BUCKETS
    return int(min(max(math.floor(pos), 0), N_BUCKETS - 1))


def _frames_first(x: np.ndarray) -> np.ndarray:
    b, t, h, w, c = x.shape
    return np.ascontiguousarray(x.transpose(0, 1, 4, 2, 3)).reshape(b * t, c, h, w)


def network(params: Mapping[str, Tensor | np.ndarray], x_in: np.ndarray, cond: np.ndarray, c_noise: float, cfg: ModelConfig) -> Tensor:
    """Raw network ``F`` on a ``B×T×H×W×C`` input scaled by ``c_in``."""
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    b, t = x_in.shape[:2]
    frames = _frames_first(x_in)
    cond_rep = np.repeat(_frames_first(cond[:, None]), t, axis=0)
    feat = np.concatenate([frames, cond_rep], axis=1)

    h = tn.conv2d(feat, p["in.w"])
    h = tn.channel_bias(h, p["in.b"])
    k = noise_bucket(c_noise)
    emb = tn.reshape(tn.slice_frames(p["embed"], k, k + 1, axis=0), (cfg.features,))
    h = tn.channel_bias(h, emb)

    for i in range(cfg.blocks):
        r = tn.channel_bias(tn.conv2d(tn.silu(h), p[f"block{i}.w1"]), p[f"block{i}.b1"])
        r = tn.channel_bias(tn.conv2d(tn.silu(r), p[f"block{i}.w2"]), p[f"block{i}.b2"])
        h = h + r

    shape5 = (b, t, cfg.features, cfg.height, cfg.width)
    m = tn.temporal_conv(tn.reshape(tn.silu(h), shape5), p["tmix.w"])
    m = tn.channel_bias(tn.reshape(m, h.shape), p["tmix.b"])
    h = h + m

    out = tn.channel_bias(tn.conv2d(tn.silu(h), p["out.w"]), p["out.b"])
    out = tn.reshape(out, (b, t, cfg.channels, cfg.height, cfg.width))
    return tn.transpose(out, (0, 1, 3, 4, 2))


def denoise(
    params: Mapping[str, Tensor | np.ndarray],
    noisy: np.ndarray,
    sigma: float,
    cond: np.ndarray,
    cfg: ModelConfig,
    edm_cfg: EdmConfig,
) -> Tensor:
    """Preconditioned denoiser ``c_skip*x + c_out*F(c_in*x, c_noise)``.

    ``noisy`` is ``B×T×H×W×C`` (or a single ``T×H×W×C`` clip) and ``cond``
    the matching clean first frame(s).  Gradients flow to whichever params
    are tape-tracked.
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    single = noisy.ndim == 4
    if single:
        noisy, cond = noisy[None], cond[None]
    if noisy.shape[1:] != cfg.clip_shape:
        raise tn.ShapeError(f"denoise: clip shape {noisy.shape[1:]} does not match model {cfg.clip_shape}")
    if cond.shape != (noisy.shape[0],) + cfg.clip_shape[1:]:
        raise tn.ShapeError(f"denoise: conditioning frame shape {cond.shape} does not match clip {noisy.shape}")
    pc = precondition(sigma, edm_cfg)
    raw = network(params, pc.c_in * noisy, cond, pc.c_noise, cfg)
    out = tn.add(pc.c_skip * noisy, tn.scalar_scale(raw, pc.c_out))
    if single:
        out = tn.reshape(out, cfg.clip_shape)
    return out
