"""Procedural moving-shape clips with analytic flow and occlusion.

Scenes are fixed-view: a static smooth-noise background with one or a few
antialiased shapes translating at constant velocity.  Ground truth comes
straight from the scene description, so flow estimates can be scored exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import stream
from .serialize import write_tensor

MAX_SPEED = 2.0
# Largest frame-to-frame change (in intensity units) of a pixel still counted
# as static background; soft shape edges leave a faint tail below this.
STATIC_TOL = 1e-2


class SceneError(ValueError):
    """A scene violates the generator's geometric constraints."""


@dataclass(frozen=True)
class Shape:
    kind: str  # "disk" or "square"
    radius: float
    intensity: float
    velocity: tuple[float, float]
    start: tuple[float, float]

    def center(self, t: int) -> tuple[float, float]:
        return (self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 16
    width: int = 16
    channels: int = 1
    frames: int = 4
    background_seed: int = 0
    background_amplitude: float = 0.1
    edge_width: float = 0.5
    shading: float = 0.3
    shapes: tuple[Shape, ...] = ()

    def validate(self) -> None:
        for s in self.shapes:
            if s.kind not in ("disk", "square"):
                raise SceneError(f"unknown shape kind {s.kind!r}")
            if math.hypot(*s.velocity) > MAX_SPEED + 1e-12:
                raise SceneError(f"shape speed {math.hypot(*s.velocity):.3f} exceeds {MAX_SPEED} px/frame")
            if not -1.0 <= s.intensity <= 1.0:
                raise SceneError(f"shape intensity {s.intensity} outside [-1, 1]")
            for t in range(self.frames):
                cx, cy = s.center(t)
                if cx - s.radius < 1 or cy - s.radius < 1 or cx + s.radius > self.width - 2 or cy + s.radius > self.height - 2:
                    raise SceneError(f"shape leaves the canvas at frame {t} (center {cx:.2f}, {cy:.2f}, radius {s.radius})")


@dataclass(frozen=True)
class SceneTemplate:
    """Uniform sampling ranges for :func:`make_dataset`."""

    height: int = 16
    width: int = 16
    channels: int = 1
    frames: int = 4
    n_shapes: tuple[int, int] = (1, 1)
    radius: tuple[float, float] = (2.5, 4.0)
    intensity: tuple[float, float] = (0.5, 0.9)
    speed: tuple[float, float] = (0.5, 2.0)
    background_amplitude: float = 0.1


@dataclass
class LabeledClip:
    clip: np.ndarray  # T×H×W×C
    gt_flow: np.ndarray  # (T-1)×H×W×2
    gt_occlusion: np.ndarray  # (T-1)×H×W, 1 = visible in both frames
    labels: np.ndarray  # T×H×W, topmost shape index or -1
    meta: SceneSpec
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def support(self) -> np.ndarray:
        """(T-1)×H×W mask of shape pixels in the first frame of each pair."""
        return self.labels[:-1] >= 0

    @property
    def static_mask(self) -> np.ndarray:
        """H×W mask of pixels whose intensity changes by less than ``STATIC_TOL`` between any two frames."""
        return np.all(np.abs(np.diff(self.clip, axis=0)) < STATIC_TOL, axis=(0, 3))


def _smooth_noise(rng: np.random.Generator, h: int, w: int, c: int, width: float = 1.5) -> np.ndarray:
    radius = int(math.ceil(3 * width))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / width) ** 2)
    taps /= taps.sum()
    noise = rng.standard_normal((h + 2 * radius, w + 2 * radius, c))
    noise = np.apply_along_axis(np.convolve, 0, noise, taps, mode="valid")
    noise = np.apply_along_axis(np.convolve, 1, noise, taps, mode="valid")
    return noise / noise.std()


def _render_shape(shape: Shape, center: tuple[float, float], spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Soft coverage and shaded intensity of one shape, both ``H×W``.

    Coverage is a logistic ramp of the signed distance to the outline with
    width ``spec.edge_width`` px; the interior is shaded by a radial falloff
    anchored to the shape, so the shape carries its own texture as it moves.
    """
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    dx, dy = xs - center[0], ys - center[1]
    if shape.kind == "disk":
        dist = np.hypot(dx, dy) - shape.radius
    else:
        dist = np.maximum(np.abs(dx), np.abs(dy)) - shape.radius
    cover = 0.5 * (1.0 - np.tanh(0.5 * dist / spec.edge_width))
    falloff = np.minimum((dx * dx + dy * dy) / shape.radius**2, 1.5)
    return cover, shape.intensity * (1.0 - spec.shading * falloff)


def generate_clip(spec: SceneSpec) -> LabeledClip:
    """Render a scene; fully determined by ``spec`` (texture from ``background_seed``)."""
    spec.validate()
    h, w, c, t_len = spec.height, spec.width, spec.channels, spec.frames
    background = spec.background_amplitude * _smooth_noise(stream(spec.background_seed, "background"), h, w, c)
    background = np.clip(background, -1.0, 1.0)
    clip = np.empty((t_len, h, w, c))
    labels = np.full((t_len, h, w), -1, dtype=np.int64)
    label_flow = np.zeros((t_len, h, w, 2))
    for t in range(t_len):
        frame = background.copy()
        for k, s in enumerate(spec.shapes):
            cover, value = _render_shape(s, s.center(t), spec)
            frame = frame * (1.0 - cover[..., None]) + (cover * value)[..., None]
            hit = cover >= 0.5
            labels[t][hit] = k
            label_flow[t][hit] = s.velocity
        clip[t] = np.clip(frame, -1.0, 1.0)
    gt_flow = label_flow[:-1].copy()
    gt_occlusion = (labels[:-1] == labels[1:]).astype(np.float64)
    return LabeledClip(clip=clip, gt_flow=gt_flow, gt_occlusion=gt_occlusion, labels=labels, meta=spec)


def _sample_shape(rng: np.random.Generator, template: SceneTemplate) -> Shape:
    h, w, t_len = template.height, template.width, template.frames
    for _ in range(1000):
        kind = "disk" if rng.random() < 0.5 else "square"
        radius = rng.uniform(*template.radius)
        intensity = rng.uniform(*template.intensity) * (1.0 if rng.random() < 0.5 else -1.0)
        speed = rng.uniform(*template.speed)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        vx, vy = speed * math.cos(angle), speed * math.sin(angle)
        span_x, span_y = vx * (t_len - 1), vy * (t_len - 1)
        lo_x = 1 + radius - min(0.0, span_x)
        hi_x = w - 2 - radius - max(0.0, span_x)
        lo_y = 1 + radius - min(0.0, span_y)
        hi_y = h - 2 - radius - max(0.0, span_y)
        if lo_x > hi_x or lo_y > hi_y:
            continue
        return Shape(kind, radius, intensity, (vx, vy), (rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)))
    raise SceneError("template ranges admit no shape that stays inside the canvas")


def sample_scene(rng: np.random.Generator, template: SceneTemplate) -> SceneSpec:
    n = int(rng.integers(template.n_shapes[0], template.n_shapes[1] + 1))
    shapes = tuple(_sample_shape(rng, template) for _ in range(n))
    return SceneSpec(
        height=template.height,
        width=template.width,
        channels=template.channels,
        frames=template.frames,
        background_seed=int(rng.integers(2**31)),
        background_amplitude=template.background_amplitude,
        shapes=shapes,
    )


def make_clip(index: int, template: SceneTemplate, seed: int) -> LabeledClip:
    """The ``index``-th clip of the dataset rooted at ``seed``."""
    return generate_clip(sample_scene(stream(seed, "clip", index), template))


def make_dataset(n: int, template: SceneTemplate, seed: int) -> list[LabeledClip]:
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    return [make_clip(i, template, seed) for i in range(n)]


def split(dataset: Sequence, fractions: tuple[float, float, float], seed: int) -> tuple[list, list, list]:
    """Seeded shuffle, then contiguous train/val/test blocks.

    Validation and test sizes are floored; the remainder goes to train.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(dataset)
    order = stream(seed, "split").permutation(n)
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    n_test = int(math.floor(fractions[2] * n + 1e-9))
    n_train = n - n_val - n_test
    pick = [dataset[i] for i in order]
    return pick[:n_train], pick[n_train : n_train + n_val], pick[n_train + n_val :]


def write_cache(dataset: Sequence[LabeledClip], directory: str | Path) -> None:
    """Store each clip as ``clip_{index}.flc``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, item in enumerate(dataset):
        write_tensor(directory / f"clip_{i}.flc", item.clip)
