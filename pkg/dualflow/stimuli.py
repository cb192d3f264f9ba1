"""Deterministic stimulus generation.

Every generator is a pure function of its parameters and seed. Frames are
float arrays in [0, 1]; ground-truth flow ``gt_flow[t]`` is the displacement
from frame ``t`` to ``t + 1`` stored as [T,2,H,W] with ``u`` along columns and
``v`` along rows. Pixel centres sit at integer coordinates and the frame
centre is ``size // 2``.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, Field
from scipy import ndimage

from dualflow.config import CarrierConfig, StimulusConfig
from dualflow.errors import AliasingError, RegionExitError, ShapeError, StimulusError
from dualflow.flow import FlowField
from dualflow.stage1 import evaluation_frame
from dualflow.textures import procedural_texture

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
MODULATIONS = ("noise", "blur", "water", "fourier_shuffle", "pixel_shuffle", "swirl", "drift_balanced")
PLAID_HALF_ANGLE = math.radians(30.0)
CARRIER_FRAMES = 16

SeedLike = int | Sequence[int] | np.random.Generator


def luma(rgb: np.ndarray) -> np.ndarray:
    """0.299 R + 0.587 G + 0.114 B over the channel axis of [..., 3, H, W]."""
    rgb = np.asarray(rgb, dtype=float)
    if rgb.ndim < 3 or rgb.shape[-3] != 3:
        raise ShapeError(f"expected RGB data [...,3,H,W], got {rgb.shape}")
    return np.einsum("...chw,c->...hw", rgb, LUMA_WEIGHTS)


class StimulusMetadata(BaseModel):
    kind: str = Field(default="custom", description="Generator that produced the sequence")
    modulation: str | None = Field(default=None, description="Second-order modulation kind")
    seed: list[int] | int | None = Field(default=None, description="Seed the generator was called with")
    carrier: list[list[float]] | None = Field(default=None, description="Carrier velocities [u, v] per frame")
    params: dict[str, Any] = Field(default_factory=dict)


@dataclass
class StimulusSequence:
    """Frames [T,H,W] (gray) or [T,3,H,W] (RGB) with optional flow and region masks."""

    frames: np.ndarray
    gt_flow: np.ndarray | None = None
    metadata: StimulusMetadata = field(default_factory=StimulusMetadata)
    masks: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim not in (3, 4) or (self.frames.ndim == 4 and self.frames.shape[1] != 3):
            raise ShapeError(f"frames must be [T,H,W] or [T,3,H,W], got {self.frames.shape}")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < -1e-9 or hi > 1.0 + 1e-9:
            raise StimulusError(f"pixel values must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]")
        if self.gt_flow is not None:
            expected = (self.n_frames, 2, *self.size)
            if self.gt_flow.shape != expected:
                raise ShapeError(f"gt_flow must be {expected}, got {self.gt_flow.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[-2], self.frames.shape[-1]

    @property
    def is_rgb(self) -> bool:
        return self.frames.ndim == 4

    def luma(self) -> np.ndarray:
        return luma(self.frames) if self.is_rgb else self.frames

    def rgb(self) -> np.ndarray:
        return self.frames if self.is_rgb else np.repeat(self.frames[:, None], 3, axis=1)

    @property
    def label_index(self) -> int:
        return evaluation_frame(self.n_frames)

    def flow_at(self, t: int) -> FlowField:
        if self.gt_flow is None:
            raise StimulusError("sequence has no ground-truth flow")
        return FlowField.from_uv(self.gt_flow[t, 0], self.gt_flow[t, 1])

    def label_flow(self) -> FlowField:
        return self.flow_at(self.label_index)


def _seed_record(seed: SeedLike) -> int | list[int] | None:
    if isinstance(seed, np.random.Generator):
        return None
    return int(seed) if isinstance(seed, (int, np.integer)) else [int(s) for s in seed]


def pixel_grid(shape: tuple[int, int], centered: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """``(x, y)`` coordinate arrays; centred grids put 0 at ``size // 2``."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    if centered:
        xs -= w // 2
        ys -= h // 2
    return xs, ys


def _uniform_flow(u: float, v: float, n_frames: int, shape: tuple[int, int]) -> np.ndarray:
    flow = np.empty((n_frames, 2, *shape))
    flow[:, 0], flow[:, 1] = u, v
    return flow


def drifting_gabor(
    f_s: float,
    theta: float,
    speed: float,
    size: int = 64,
    n_frames: int = 15,
    contrast: float = 1.0,
    envelope_sd: float | None = None,
    phase: float = 0.0,
) -> StimulusSequence:
    """Sinusoidal grating drifting at ``speed`` px/frame along ``theta``.

    ``envelope_sd`` adds a Gaussian window of that width (pixels); ``None``
    gives a full-field grating.
    """
    if not 0.0 < f_s < 0.25:
        raise StimulusError(f"spatial frequency must lie in (0, 0.25), got {f_s}")
    if not 0.0 < contrast <= 1.0:
        raise StimulusError(f"contrast must lie in (0, 1], got {contrast}")
    if f_s * abs(speed) >= 0.5:
        raise AliasingError(f"temporal frequency {f_s * abs(speed):.3f} cycles/frame aliases (limit 0.5)")
    xs, ys = pixel_grid((size, size))
    along = xs * math.cos(theta) + ys * math.sin(theta)
    t = np.arange(n_frames, dtype=float)[:, None, None]
    carrier = np.cos(2.0 * math.pi * f_s * (along[None] - speed * t) + phase)
    envelope = 1.0 if envelope_sd is None else np.exp(-(xs**2 + ys**2) / (2.0 * envelope_sd**2))
    frames = np.clip(0.5 + 0.5 * contrast * envelope * carrier, 0.0, 1.0)
    return StimulusSequence(
        frames=frames,
        gt_flow=_uniform_flow(speed * math.cos(theta), speed * math.sin(theta), n_frames, (size, size)),
        metadata=StimulusMetadata(
            kind="gabor",
            params=dict(f_s=f_s, theta=theta, speed=speed, contrast=contrast, envelope_sd=envelope_sd, phase=phase),
        ),
    )


def plaid(
    f_s: float,
    base_dir: float,
    speed: float,
    size: int = 64,
    n_frames: int = 15,
    contrast: float = 1.0,
    envelope_sd: float | None = None,
    order: Literal["plus_first", "minus_first"] = "plus_first",
) -> StimulusSequence:
    """Mean of two gratings drifting at ``speed`` along ``base_dir`` +/- 30 degrees.

    The coherent pattern moves along ``base_dir`` at ``speed / cos(30deg)``.
    """
    signs = (1.0, -1.0) if order == "plus_first" else (-1.0, 1.0)
    first, second = (
        drifting_gabor(f_s, base_dir + s * PLAID_HALF_ANGLE, speed, size, n_frames, contrast, envelope_sd)
        for s in signs
    )
    pattern_speed = speed / math.cos(PLAID_HALF_ANGLE)
    return StimulusSequence(
        frames=(first.frames + second.frames) / 2.0,
        gt_flow=_uniform_flow(
            pattern_speed * math.cos(base_dir), pattern_speed * math.sin(base_dir), n_frames, (size, size)
        ),
        metadata=StimulusMetadata(
            kind="plaid", params=dict(f_s=f_s, base_dir=base_dir, speed=speed, components=2, contrast=contrast)
        ),
    )


def slow_speed(rng: np.random.Generator, max_speed: float) -> float:
    """Speed biased towards zero: ``max_speed * u**2`` with ``u`` uniform."""
    return float(max_speed * rng.random() ** 2)


def _soft_disk(xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, radius: float) -> np.ndarray:
    return np.clip(radius + 0.5 - np.hypot(xs - cx, ys - cy), 0.0, 1.0)


def _soft_square(xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, half: float) -> np.ndarray:
    return np.clip(half + 0.5 - np.maximum(np.abs(xs - cx), np.abs(ys - cy)), 0.0, 1.0)


def _shape_sample(rng: np.random.Generator, size: int, n_frames: int, max_speed: float) -> StimulusSequence:
    xs, ys = pixel_grid((size, size), centered=False)
    background = rng.uniform(0.2, 0.8)
    frames = np.full((n_frames, size, size), background)
    flow = np.zeros((n_frames, 2, size, size))
    masks = np.zeros((n_frames, size, size), dtype=bool)
    shapes = []
    for _ in range(int(rng.integers(1, 3))):
        kind = "disk" if rng.random() < 0.5 else "square"
        radius = rng.uniform(6.0, 12.0)
        level = float(np.clip(background + rng.choice([-1.0, 1.0]) * rng.uniform(0.15, 0.4), 0.0, 1.0))
        angle = rng.uniform(0.0, 2.0 * math.pi)
        speed = slow_speed(rng, max_speed)
        u, v = speed * math.cos(angle), speed * math.sin(angle)
        mid = rng.uniform(size / 4, 3 * size / 4, 2)
        shapes.append(dict(kind=kind, radius=radius, level=level, velocity=[u, v]))
        render = _soft_disk if kind == "disk" else _soft_square
        for t in range(n_frames):
            lag = t - n_frames // 2
            alpha = render(xs, ys, mid[0] + u * lag, mid[1] + v * lag, radius)
            frames[t] = frames[t] * (1.0 - alpha) + level * alpha
            inside = alpha >= 0.5
            flow[t, 0][inside], flow[t, 1][inside] = u, v
            masks[t] |= inside
    return StimulusSequence(
        frames=frames,
        gt_flow=flow,
        metadata=StimulusMetadata(kind="B", params=dict(background=background, shapes=shapes)),
        masks=masks,
    )


def _grating_sample(rng: np.random.Generator, size: int, n_frames: int, max_speed: float) -> StimulusSequence:
    f_s = float(np.exp(rng.uniform(math.log(0.04), math.log(0.2))))
    theta = rng.uniform(0.0, 2.0 * math.pi)
    speed = slow_speed(rng, min(max_speed, 0.45 / f_s))
    seq = drifting_gabor(
        f_s, theta, speed, size, n_frames, contrast=rng.uniform(0.5, 1.0), phase=rng.uniform(0.0, 2.0 * math.pi)
    )
    seq.metadata.kind = "C"
    return seq


def toy_sample(kind: Literal["B", "C"], seed: int, index: int, config: StimulusConfig | None = None) -> StimulusSequence:
    """Sample ``index`` of toy dataset ``kind``; independent of every other index."""
    config = config or StimulusConfig()
    rng = np.random.default_rng([seed, index, ord(kind)])
    make = {"B": _shape_sample, "C": _grating_sample}.get(kind)
    if make is None:
        raise StimulusError(f"unknown toy dataset '{kind}'")
    seq = make(rng, config.size, config.frames, config.max_speed)
    seq.metadata.seed = [seed, index]
    return seq


def toy_dataset(
    kind: Literal["B", "C"],
    n: int,
    seed: int,
    config: StimulusConfig | None = None,
) -> list[tuple[StimulusSequence, FlowField]]:
    """B: translating flat shapes on flat backgrounds. C: full-field drifting gratings."""
    if n < 1:
        raise StimulusError(f"dataset size must be >= 1, got {n}")
    samples = [toy_sample(kind, seed, i, config) for i in range(n)]
    return [(s, s.label_flow()) for s in samples]


@dataclass
class CarrierTrace:
    """Carrier velocities [T,2] in px/frame."""

    velocities: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.velocities.shape[0]

    def centers(self, start: Sequence[float]) -> np.ndarray:
        """Region centre per frame: ``start + sum_{k<t} S(k)``."""
        offsets = np.vstack([np.zeros(2), np.cumsum(self.velocities[:-1], axis=0)])
        return np.asarray(start, dtype=float)[None] + offsets


def markov_carrier(
    n_frames: int = CARRIER_FRAMES,
    step_sd: float = 0.3,
    seed: SeedLike = 0,
    base_mean: Sequence[float] = (0.0, 0.0),
    base_sd: float = 0.8,
) -> CarrierTrace:
    """``S(0) ~ N(base_mean, base_sd^2 I)``, ``S(t) ~ N(S(t-1), step_sd^2 I)``."""
    if step_sd < 0 or base_sd < 0:
        raise StimulusError("carrier standard deviations must be >= 0")
    rng = np.random.default_rng(seed)
    start = np.asarray(base_mean, dtype=float) + base_sd * rng.standard_normal(2)
    steps = step_sd * rng.standard_normal((n_frames - 1, 2))
    return CarrierTrace(np.vstack([start, start + np.cumsum(steps, axis=0)]))


def _wave_time(t: float, xi: float, delta: float) -> float:
    return math.cos(2.0 * math.pi * xi * t) * math.exp(-delta * t * t)


def water_wave_potential(
    x: np.ndarray,
    y: np.ndarray,
    t: float,
    f: float,
    xi: float,
    gamma: float,
    delta: float,
    centers: Sequence[Sequence[float]],
) -> np.ndarray:
    """``sum_c cos(2 pi f r) exp(-gamma r^2) cos(2 pi xi t) exp(-delta t^2)``, r measured from each centre."""
    total = np.zeros(np.broadcast(x, y).shape)
    for cx, cy in centers:
        r = np.hypot(x - cx, y - cy)
        total += np.cos(2.0 * math.pi * f * r) * np.exp(-gamma * r * r)
    return total * _wave_time(t, xi, delta)


def water_wave_gradient(
    x: np.ndarray,
    y: np.ndarray,
    t: float,
    f: float,
    xi: float,
    gamma: float,
    delta: float,
    centers: Sequence[Sequence[float]],
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(dK/dx, dK/dy)`` of :func:`water_wave_potential`."""
    if gamma <= 0 or delta <= 0:
        raise StimulusError("wave damping constants must be > 0")
    gx = np.zeros(np.broadcast(x, y).shape)
    gy = np.zeros_like(gx)
    for cx, cy in centers:
        dx, dy = x - cx, y - cy
        r = np.hypot(dx, dy)
        # (dK/dr) / r, finite at r = 0
        radial = (
            -4.0 * math.pi**2 * f**2 * np.sinc(2.0 * f * r) - 2.0 * gamma * np.cos(2.0 * math.pi * f * r)
        ) * np.exp(-gamma * r * r)
        gx += radial * dx
        gy += radial * dy
    scale = _wave_time(t, xi, delta)
    return gx * scale, gy * scale


def water_wave_field(
    f: float,
    xi: float,
    gamma: float,
    delta: float,
    centers: Sequence[Sequence[float]],
    t: float,
    shape: tuple[int, int] = (64, 64),
) -> FlowField:
    """Gradient of the damped wave potential sampled on the centred pixel grid."""
    xs, ys = pixel_grid(shape)
    gx, gy = water_wave_gradient(xs, ys, t, f, xi, gamma, delta, centers)
    return FlowField.from_uv(gx, gy)


def _region_fits(centers: np.ndarray, radius: float, shape: tuple[int, int]) -> bool:
    h, w = shape
    cx, cy = centers[:, 0], centers[:, 1]
    return bool(np.all((cx >= radius) & (cx <= w - 1 - radius) & (cy >= radius) & (cy <= h - 1 - radius)))


def _sample_local(field: np.ndarray, xs: np.ndarray, ys: np.ndarray, center: np.ndarray, order: int = 1) -> np.ndarray:
    """Sample a region-attached ``field`` (centred on its middle) at absolute pixels."""
    half = (np.asarray(field.shape[-2:]) - 1) / 2.0
    coords = [ys - center[1] + half[0], xs - center[0] + half[1]]
    return ndimage.map_coordinates(field, coords, order=order, mode="constant", cval=0.0)


def _warp(image: np.ndarray, xs: np.ndarray, ys: np.ndarray, du: np.ndarray, dv: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(image, [ys - dv, xs - du], order=1, mode="reflect")


def balanced_noise(envelopes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Signed binary noise per frame whose per-pixel sum over time is exactly zero.

    ``envelopes`` is [T,H,W] contrast in [0, 1]. Each pixel's frames are
    paired by envelope strength (random among ties); both frames of a pair
    take the weaker envelope with opposite random signs. With an odd frame
    count the weakest frame is left at zero contrast.
    """
    envelopes = np.asarray(envelopes, dtype=float)
    n = envelopes.shape[0]
    order = np.lexsort((rng.random(envelopes.shape), envelopes), axis=0)
    ranked = np.take_along_axis(envelopes, order, axis=0)
    offset = n % 2
    weaker = ranked[offset::2]
    flips = rng.choice([-1.0, 1.0], size=weaker.shape)
    signed = np.zeros_like(ranked)
    signed[offset::2] = weaker * flips
    signed[offset + 1 :: 2] = -weaker * flips
    noise = np.empty_like(signed)
    np.put_along_axis(noise, order, signed, axis=0)
    return noise


class _Modulator:
    """Per-sequence state of one modulation kind; ``content(t, c)`` returns a full frame."""

    def __init__(
        self, kind: str, image: np.ndarray, radius: float, rng: np.random.Generator, masks: np.ndarray
    ) -> None:
        self.kind = kind
        self.image = image
        self.radius = radius
        self.xs, self.ys = pixel_grid(image.shape, centered=False)
        side = 2 * int(math.ceil(radius)) + 3
        if kind == "noise":
            self.noise = rng.normal(0.0, 0.25, (side, side)) * (rng.random((side, side)) < 0.3)
        elif kind == "blur":
            self.blurred = ndimage.gaussian_filter(image, 2.5, mode="reflect")
        elif kind == "water":
            self.wave_centers = rng.uniform(-radius / 2, radius / 2, (3, 2))
        elif kind == "fourier_shuffle":
            self.patch = 2 * int(math.ceil(radius)) + 1
            psi = rng.normal(0.0, 0.75 * math.pi, (self.patch, self.patch))
            mirrored = np.roll(np.flip(psi, axis=(0, 1)), 1, axis=(0, 1))
            self.phase = np.exp(1j * (psi - mirrored) / 2.0)
        elif kind == "pixel_shuffle":
            self.shuffle = rng.normal(0.0, 1.5, (2, side, side))
        elif kind == "swirl":
            self.strength = rng.uniform(1.5, 2.5) * rng.choice([-1.0, 1.0])
        elif kind == "drift_balanced":
            self.signs = balanced_noise(masks.astype(float), rng)
            self.amplitude = 0.25 * np.minimum(image, 1.0 - image)
        else:
            raise StimulusError(f"unknown modulation '{kind}'; expected one of {MODULATIONS}")

    def content(self, t: int, center: np.ndarray) -> np.ndarray:
        image, xs, ys = self.image, self.xs, self.ys
        if self.kind == "noise":
            return np.clip(image + _sample_local(self.noise, xs, ys, center), 0.0, 1.0)
        if self.kind == "blur":
            return self.blurred
        if self.kind == "water":
            du, dv = water_wave_gradient(
                xs - center[0], ys - center[1], float(t), 0.08, 0.12, 0.004, 0.004, self.wave_centers
            )
            gain = 3.0 / (2.0 * math.pi * 0.08)
            return _warp(image, xs, ys, gain * du, gain * dv)
        if self.kind == "fourier_shuffle":
            return self._phase_scrambled(center)
        if self.kind == "pixel_shuffle":
            du = _sample_local(self.shuffle[0], xs, ys, center, order=0)
            dv = _sample_local(self.shuffle[1], xs, ys, center, order=0)
            return _warp(image, xs, ys, du, dv)
        if self.kind == "swirl":
            dx, dy = xs - center[0], ys - center[1]
            angle = self.strength * np.clip(1.0 - np.hypot(dx, dy) / self.radius, 0.0, None)
            sx = center[0] + np.cos(angle) * dx - np.sin(angle) * dy
            sy = center[1] + np.sin(angle) * dx + np.cos(angle) * dy
            return ndimage.map_coordinates(image, [sy, sx], order=1, mode="reflect")
        # drift_balanced: binary noise sums to zero over the frames each pixel spends inside
        return image + self.amplitude * self.signs[t]

    def _phase_scrambled(self, center: np.ndarray) -> np.ndarray:
        half = self.patch // 2
        pad = self.patch
        padded = np.pad(self.image, pad, mode="reflect")
        cx, cy = int(round(center[0])) + pad, int(round(center[1])) + pad
        window = padded[cy - half : cy + half + 1, cx - half : cx + half + 1]
        scrambled = np.real(np.fft.ifft2(np.fft.fft2(window) * self.phase))
        padded = padded.copy()
        padded[cy - half : cy + half + 1, cx - half : cx + half + 1] = np.clip(scrambled, 0.0, 1.0)
        return padded[pad:-pad, pad:-pad]


def apply_modulation(
    image: np.ndarray,
    carrier: CarrierTrace,
    kind: str,
    seed: SeedLike = 0,
    radius: float = 10.0,
    start: Sequence[float] | None = None,
) -> StimulusSequence:
    """Move a disk of modulated content along ``carrier`` over the static ``image``."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ShapeError(f"background must be a 2D grayscale image, got {image.shape}")
    if kind not in MODULATIONS:
        raise StimulusError(f"unknown modulation '{kind}'; expected one of {MODULATIONS}")
    h, w = image.shape
    start = (w // 2, h // 2) if start is None else start
    centers = carrier.centers(start)
    if not _region_fits(centers, radius, image.shape):
        raise RegionExitError(f"the radius-{radius} region leaves the {w}x{h} frame along this carrier")

    xs, ys = pixel_grid(image.shape, centered=False)
    masks = np.hypot(xs[None] - centers[:, 0, None, None], ys[None] - centers[:, 1, None, None]) <= radius
    modulator = _Modulator(kind, image, radius, np.random.default_rng(seed), masks)
    n_frames = carrier.n_frames
    frames = np.repeat(image[None], n_frames, axis=0)
    flow = np.zeros((n_frames, 2, h, w))
    for t, center in enumerate(centers):
        inside = masks[t]
        frames[t][inside] = modulator.content(t, center)[inside]
        flow[t, 0][inside], flow[t, 1][inside] = carrier.velocities[t]
    return StimulusSequence(
        frames=np.clip(frames, 0.0, 1.0),
        gt_flow=flow,
        masks=masks,
        metadata=StimulusMetadata(
            kind="modulation",
            modulation=kind,
            seed=_seed_record(seed),
            carrier=carrier.velocities.tolist(),
            params=dict(radius=radius, start=list(map(float, start))),
        ),
    )


def drift_balanced_gabor(
    velocity: Sequence[float] = (1.0, 0.0),
    size: int = 64,
    n_frames: int = 15,
    envelope_sd: float = 6.0,
    contrast: float = 0.8,
    seed: SeedLike = 0,
) -> StimulusSequence:
    """A Gaussian envelope of dynamic binary noise drifting at ``velocity`` over mid-gray.

    The envelope moves; the noise under it is redrawn every frame and sums
    to zero at every pixel, so there is no net first-order motion.
    """
    rng = np.random.default_rng(seed)
    xs, ys = pixel_grid((size, size), centered=False)
    u, v = float(velocity[0]), float(velocity[1])
    lags = np.arange(n_frames) - n_frames // 2
    cx = (size // 2 + u * lags)[:, None, None]
    cy = (size // 2 + v * lags)[:, None, None]
    envelopes = np.exp(-((xs[None] - cx) ** 2 + (ys[None] - cy) ** 2) / (2.0 * envelope_sd**2))
    masks = envelopes >= 0.5
    flow = np.zeros((n_frames, 2, size, size))
    flow[:, 0][masks], flow[:, 1][masks] = u, v
    return StimulusSequence(
        frames=0.5 + 0.5 * contrast * balanced_noise(envelopes, rng),
        gt_flow=flow,
        masks=masks,
        metadata=StimulusMetadata(
            kind="drift_balanced_gabor", modulation="drift_balanced", params=dict(velocity=[u, v], contrast=contrast)
        ),
    )


def _textured_objects(
    scene_rng: np.random.Generator,
    overlay_rng: np.random.Generator | None,
    size: int,
    n_frames: int,
    max_speed: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[dict[str, Any]]]:
    xs, ys = pixel_grid((size, size), centered=False)
    background = 0.25 + 0.5 * procedural_texture((size, size), scene_rng)
    frames = np.repeat(background[None], n_frames, axis=0)
    flow = np.zeros((n_frames, 2, size, size))
    masks = np.zeros((n_frames, size, size), dtype=bool)
    objects = []
    for _ in range(int(scene_rng.integers(1, 3))):
        radius = scene_rng.uniform(8.0, 14.0)
        side = 2 * int(math.ceil(radius)) + 9
        level = scene_rng.uniform(0.3, 0.7)
        texture = level + 0.3 * (procedural_texture((side, side), scene_rng) - 0.5)
        angle = scene_rng.uniform(0.0, 2.0 * math.pi)
        speed = slow_speed(scene_rng, max_speed)
        u, v = speed * math.cos(angle), speed * math.sin(angle)
        mid = scene_rng.uniform(size * 0.3, size * 0.7, 2)
        objects.append(dict(radius=radius, velocity=[u, v]))

        flicker = highlights = None
        if overlay_rng is not None:
            flicker = dict(
                rate=overlay_rng.uniform(0.15, 0.35),
                phase=overlay_rng.uniform(0.0, 2.0 * math.pi),
                gain=overlay_rng.uniform(0.5, 0.9),
                offset=overlay_rng.uniform(0.08, 0.14),
            )
            highlights = [
                (overlay_rng.uniform(-radius / 2, radius / 2, 2), overlay_rng.uniform(-2.0, 2.0, 2))
                for _ in range(2)
            ]

        for t in range(n_frames):
            lag = t - n_frames // 2
            center = np.array([mid[0] + u * lag, mid[1] + v * lag])
            alpha = _soft_disk(xs, ys, center[0], center[1], radius)
            surface = _sample_local(texture, xs, ys, center, order=3)
            if flicker is not None:
                wave = math.sin(2.0 * math.pi * flicker["rate"] * t + flicker["phase"])
                surface = level + (1.0 + flicker["gain"] * wave) * (surface - level) + flicker["offset"] * wave
                for start, drift in highlights:
                    spot = _reflect_into(start + drift * t, radius * 0.7)
                    d2 = (xs - center[0] - spot[0]) ** 2 + (ys - center[1] - spot[1]) ** 2
                    surface = surface + 0.35 * np.exp(-d2 / (2.0 * 2.5**2))
            frames[t] = frames[t] * (1.0 - alpha) + np.clip(surface, 0.0, 1.0) * alpha
            inside = alpha >= 0.5
            flow[t, 0][inside], flow[t, 1][inside] = u, v
            masks[t] |= inside
    return np.clip(frames, 0.0, 1.0), flow, masks, objects


def _reflect_into(offset: np.ndarray, limit: float) -> np.ndarray:
    """Fold a point back into the square [-limit, limit]^2 by mirror reflection."""
    period = 4.0 * limit
    folded = np.mod(offset + limit, period)
    return np.where(folded > 2.0 * limit, period - folded, folded) - limit


def proxy_sample(
    seed: int,
    index: int,
    mode: Literal["diffuse", "nondiffuse"] = "nondiffuse",
    config: StimulusConfig | None = None,
    stream: int = 0,
) -> StimulusSequence:
    """One textured-object scene; the overlay draws from its own random stream."""
    config = config or StimulusConfig()
    if mode not in ("diffuse", "nondiffuse"):
        raise StimulusError(f"unknown material mode '{mode}'")
    scene_rng = np.random.default_rng([seed, index, stream, 0])
    overlay_rng = np.random.default_rng([seed, index, stream, 1]) if mode == "nondiffuse" else None
    frames, flow, masks, objects = _textured_objects(
        scene_rng, overlay_rng, config.size, config.frames, min(config.max_speed, 2.5)
    )
    return StimulusSequence(
        frames=frames,
        gt_flow=flow,
        masks=masks,
        metadata=StimulusMetadata(kind=f"proxy-{mode}", seed=[seed, index], params=dict(objects=objects)),
    )


def proxy_nondiffuse_dataset(
    n: int,
    seed: int,
    mode: Literal["diffuse", "nondiffuse"] = "nondiffuse",
    config: StimulusConfig | None = None,
) -> list[tuple[StimulusSequence, FlowField]]:
    """Procedural stand-in for rendered diffuse / non-diffuse material scenes.

    Both modes share the object layout and motion for a given seed; the
    non-diffuse mode adds object-attached flicker and drifting highlights.
    """
    if n < 1:
        raise StimulusError(f"dataset size must be >= 1, got {n}")
    samples = [proxy_sample(seed, i, mode, config) for i in range(n)]
    return [(s, s.label_flow()) for s in samples]


def textured_scene(seed: int, index: int, config: StimulusConfig | None = None) -> StimulusSequence:
    """Dataset A stand-in: diffuse textured objects drawn from a separate seed stream."""
    seq = proxy_sample(seed, index, "diffuse", config, stream=7)
    seq.metadata.kind = "A"
    return seq


def translating_square_scene(
    size: int = 64,
    speed: float = 2.0,
    direction: float = 0.0,
    n_frames: int = 15,
    half_side: float = 12.0,
    seed: int = 0,
) -> StimulusSequence:
    """A textured square gliding over a static textured background."""
    rng = np.random.default_rng(seed)
    background = 0.2 + 0.6 * procedural_texture((size, size), rng)
    side = 2 * int(math.ceil(half_side)) + 9
    texture = 0.2 + 0.6 * procedural_texture((side, side), rng)
    xs, ys = pixel_grid((size, size), centered=False)
    u, v = speed * math.cos(direction), speed * math.sin(direction)
    frames = np.repeat(background[None], n_frames, axis=0)
    flow = np.zeros((n_frames, 2, size, size))
    masks = np.zeros((n_frames, size, size), dtype=bool)
    for t in range(n_frames):
        lag = t - n_frames // 2
        center = np.array([size // 2 + u * lag, size // 2 + v * lag])
        alpha = _soft_square(xs, ys, center[0], center[1], half_side)
        frames[t] = frames[t] * (1.0 - alpha) + _sample_local(texture, xs, ys, center, order=3) * alpha
        inside = alpha >= 0.5
        flow[t, 0][inside], flow[t, 1][inside] = u, v
        masks[t] = inside
    return StimulusSequence(
        frames=np.clip(frames, 0.0, 1.0),
        gt_flow=flow,
        masks=masks,
        metadata=StimulusMetadata(kind="square", seed=seed, params=dict(speed=speed, direction=direction)),
    )


def fitted_carrier(
    seed: int | Sequence[int],
    shape: tuple[int, int],
    radius: float,
    config: CarrierConfig | None = None,
    n_frames: int = CARRIER_FRAMES,
    attempts: int = 200,
) -> CarrierTrace:
    """First Markov carrier (re-sampled deterministically) that keeps the region in frame."""
    config = config or CarrierConfig()
    base = [seed] if isinstance(seed, int) else list(seed)
    start = (shape[1] // 2, shape[0] // 2)
    for attempt in range(attempts):
        carrier = markov_carrier(n_frames, config.step_sd, [*base, attempt], config.base_mean, config.base_sd)
        if _region_fits(carrier.centers(start), radius, shape):
            return carrier
    raise RegionExitError(f"no carrier kept the region inside the frame after {attempts} attempts")


def modulation_benchmark(
    n_scenes: int,
    seed: int,
    stimulus: StimulusConfig | None = None,
    carrier: CarrierConfig | None = None,
) -> dict[str, list[StimulusSequence]]:
    """Second-order benchmark: every scene is rendered with all seven modulations.

    Scenes share background and carrier across kinds so per-kind scores are
    paired.
    """
    stimulus = stimulus or StimulusConfig()
    shape = (stimulus.size, stimulus.size)
    out: dict[str, list[StimulusSequence]] = {kind: [] for kind in MODULATIONS}
    for scene in range(n_scenes):
        image = 0.2 + 0.6 * procedural_texture(shape, np.random.default_rng([seed, scene, 0]))
        trace = fitted_carrier([seed, scene, 1], shape, stimulus.region_radius, carrier, stimulus.benchmark_frames)
        for k, kind in enumerate(MODULATIONS):
            out[kind].append(apply_modulation(image, trace, kind, [seed, scene, 2, k], stimulus.region_radius))
    logger.debug("Generated %d benchmark scenes per modulation", n_scenes)
    return out


def warp_backward(frame: np.ndarray, flow: FlowField | np.ndarray, order: int = 3) -> np.ndarray:
    """Predict the next frame: ``out(p) = frame(p - flow(p))`` with spline interpolation."""
    data = flow.data.data if isinstance(flow, FlowField) else np.asarray(flow)
    xs, ys = pixel_grid(frame.shape, centered=False)
    return ndimage.map_coordinates(frame, [ys - data[1], xs - data[0]], order=order, mode="nearest")
