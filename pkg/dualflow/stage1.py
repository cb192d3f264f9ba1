"""First-order motion energy.

A :class:`MotionEnergyBank` holds 256 trainable spatiotemporal Gabor units
spread over an 8-level image pyramid. Each unit is a quadrature pair of
separable spatial/temporal filters whose squared outputs sum to a
phase-invariant motion energy; energies are divisively normalized across
units and resampled to a common H/8 x W/8 grid.

Orientation ``theta`` is measured from +x (columns) towards +y (rows, which
point down), and a unit prefers motion at ``f_t / f_s`` pixels/frame along
``theta``.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, replace

import numpy as np

from dualflow.config import BankConfig
from dualflow.convolution import conv2d, conv_temporal, resize_bilinear
from dualflow.errors import PyramidError, ShapeError
from dualflow.optim import project
from dualflow.tensor_core import Tensor, concat, get_default_dtype, no_grad

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
FREQ_MIN = 1e-3
FREQ_MAX = 0.25 - 1e-6
POSITIVE_FLOOR = 1e-3
FIRST_ORDER_SPAN = 11
PYRAMID_MIN_SIDE = 32

_UNIT_FIELDS = ("f_s", "f_t", "theta", "sigma", "gamma", "tau", "alpha1")


def wrap_angle(theta: np.ndarray | float) -> np.ndarray:
    """Map angles into [0, 2*pi)."""
    wrapped = np.mod(theta, TWO_PI)
    return np.where(wrapped >= TWO_PI, 0.0, wrapped)


@dataclass(frozen=True)
class GaborParams:
    """One unit's parameters in physical units (pixels, frames, radians)."""

    f_s: float
    f_t: float
    theta: float
    sigma: float
    gamma: float = 1.0
    tau: float = 3.0
    alpha1: float = 0.0
    scale_index: int = 0

    def clamped(self) -> GaborParams:
        return replace(
            self,
            f_s=float(np.clip(self.f_s, FREQ_MIN, FREQ_MAX)),
            f_t=float(np.clip(self.f_t, FREQ_MIN, FREQ_MAX)),
            theta=float(wrap_angle(self.theta)),
            sigma=max(self.sigma, POSITIVE_FLOOR),
            gamma=max(self.gamma, POSITIVE_FLOOR),
            tau=max(self.tau, POSITIVE_FLOOR),
        )

    @property
    def preferred_speed(self) -> float:
        return self.f_t / self.f_s


@dataclass
class MotionEnergyMap:
    """256 energy maps on the H/8 x W/8 grid, stored channel-first as [256,h,w].

    ``provenance`` records where the map came from: ``E1``, ``E2``, ``fused``
    or ``stage2-iteration-<i>``.
    """

    values: Tensor
    provenance: str = "E1"

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def hwc(self) -> np.ndarray:
        return np.ascontiguousarray(self.values.data.transpose(1, 2, 0))

    def nodes(self) -> Tensor:
        """Row-major node features [N, 256]."""
        c, h, w = self.values.shape
        return self.values.reshape(c, h * w).T


class MotionEnergyBank:
    """Trainable bank of spatiotemporal Gabor complex cells.

    Per-unit parameters are 1-D tensors of length ``n_units``. Unit ``u``
    lives on pyramid level ``scale_index[u]``; :meth:`initialize` assigns
    ``n_units / n_scales`` contiguous units to each level.
    """

    def __init__(
        self,
        f_s: np.ndarray,
        f_t: np.ndarray,
        theta: np.ndarray,
        sigma: np.ndarray,
        gamma: np.ndarray,
        tau: np.ndarray,
        alpha1: np.ndarray,
        scale_index: np.ndarray,
        k1: float = 1.0,
        sigma1: float = 0.05,
        config: BankConfig | None = None,
    ) -> None:
        self.config = config or BankConfig()
        dtype = get_default_dtype()
        values = dict(f_s=f_s, f_t=f_t, theta=theta, sigma=sigma, gamma=gamma, tau=tau, alpha1=alpha1)
        n = len(np.atleast_1d(f_s))
        for name, value in values.items():
            arr = np.atleast_1d(np.asarray(value, dtype=dtype))
            if arr.shape != (n,):
                raise ShapeError(f"bank parameter {name} must have shape ({n},), got {arr.shape}")
            setattr(self, name, Tensor(arr, requires_grad=True, name=name))
        self.k1 = Tensor(k1, requires_grad=True, name="k1")
        self.sigma1 = Tensor(sigma1, requires_grad=True, name="sigma1")
        self.scale_index = np.atleast_1d(np.asarray(scale_index, dtype=np.int64))
        if self.scale_index.shape != (n,):
            raise ShapeError(f"scale_index must have shape ({n},), got {self.scale_index.shape}")
        if self.scale_index.min() < 0 or self.scale_index.max() >= self.config.n_scales:
            raise ShapeError(f"scale_index must lie in [0, {self.config.n_scales})")
        self.clamp()

    @classmethod
    def initialize(cls, config: BankConfig | None = None, rng: np.random.Generator | None = None) -> MotionEnergyBank:
        config = config or BankConfig()
        rng = rng or np.random.default_rng(0)
        n = config.n_units
        lo, hi = np.log(config.freq_range[0]), np.log(config.freq_range[1])
        return cls(
            f_s=np.exp(rng.uniform(lo, hi, n)),
            f_t=np.exp(rng.uniform(lo, hi, n)),
            theta=rng.uniform(0.0, TWO_PI, n),
            sigma=rng.uniform(*config.sigma_range, n),
            gamma=np.ones(n),
            tau=rng.uniform(*config.tau_range, n),
            alpha1=np.zeros(n),
            scale_index=np.arange(n) // (n // config.n_scales),
            k1=config.k1,
            sigma1=config.sigma1,
            config=config,
        )

    @classmethod
    def from_units(
        cls,
        units: Sequence[GaborParams],
        k1: float = 1.0,
        sigma1: float = 0.05,
        config: BankConfig | None = None,
    ) -> MotionEnergyBank:
        columns = {name: np.array([getattr(u, name) for u in units], dtype=float) for name in _UNIT_FIELDS}
        return cls(
            **columns,
            scale_index=np.array([u.scale_index for u in units]),
            k1=k1,
            sigma1=sigma1,
            config=config,
        )

    @property
    def n_units(self) -> int:
        return self.f_s.shape[0]

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        names = (*_UNIT_FIELDS, "k1", "sigma1")
        return {f"{prefix}{name}": getattr(self, name) for name in names}

    def unit(self, index: int) -> GaborParams:
        fields = {name: float(getattr(self, name).data[index]) for name in _UNIT_FIELDS}
        return GaborParams(**fields, scale_index=int(self.scale_index[index]))

    def units(self) -> list[GaborParams]:
        return [self.unit(i) for i in range(self.n_units)]

    def clamp(self) -> None:
        """Project every parameter back into its admissible range (idempotent)."""
        project(self.f_s, FREQ_MIN, FREQ_MAX)
        project(self.f_t, FREQ_MIN, FREQ_MAX)
        self.theta.data = np.asarray(wrap_angle(self.theta.data), dtype=self.theta.dtype)
        for t in (self.sigma, self.gamma, self.tau, self.k1, self.sigma1):
            project(t, POSITIVE_FLOOR)

    def scale_groups(self, units: np.ndarray | None = None) -> Iterator[tuple[int, np.ndarray]]:
        """Yield ``(scale, unit indices)`` for every populated pyramid level."""
        pool = np.arange(self.n_units) if units is None else np.asarray(units)
        for scale in range(self.config.n_scales):
            members = pool[self.scale_index[pool] == scale]
            if members.size:
                yield scale, members


def _per_unit(p: Tensor, shape: tuple[int, ...]) -> Tensor:
    return p.reshape((p.shape[0],) + (1,) * (len(shape) - 1)).expand(shape)


def spatial_gabor_kernels(
    f_s: Tensor,
    theta: Tensor,
    sigma: Tensor,
    gamma: Tensor,
    size: int = 15,
    radius: float = 7.5,
) -> tuple[Tensor, Tensor]:
    """Real and imaginary spatial kernels [U,size,size] for U units.

    Entry ``[i, j]`` samples the filter at ``y = i - size//2``, ``x = j - size//2``;
    taps outside ``radius`` are zero.
    """
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=f_s.dtype)
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    shape = (f_s.shape[0], size, size)
    gx = Tensor(np.broadcast_to(xs, shape), dtype=f_s.dtype)
    gy = Tensor(np.broadcast_to(ys, shape), dtype=f_s.dtype)
    support = Tensor(np.broadcast_to(xs**2 + ys**2 <= radius**2, shape), dtype=f_s.dtype)

    cos_t, sin_t = _per_unit(theta.cos(), shape), _per_unit(theta.sin(), shape)
    x_rot = gx * cos_t + gy * sin_t
    y_rot = gy * cos_t - gx * sin_t
    spread = _per_unit(sigma.square(), shape) * 2.0
    envelope = (-(x_rot.square() + _per_unit(gamma.square(), shape) * y_rot.square()) / spread).exp()
    phase = _per_unit(f_s, shape) * x_rot * TWO_PI
    envelope = envelope * support
    return envelope * phase.cos(), envelope * phase.sin()


def temporal_kernels(f_t: Tensor, tau: Tensor, length: int = 6) -> tuple[Tensor, Tensor]:
    """Real and imaginary temporal kernels [U,length]; entry ``l`` weights lag ``l``."""
    lags = np.arange(length, dtype=f_t.dtype)
    shape = (f_t.shape[0], length)
    gl = Tensor(np.broadcast_to(lags, shape), dtype=f_t.dtype)
    decay = (-gl / _per_unit(tau, shape)).exp()
    phase = _per_unit(f_t, shape) * gl * TWO_PI
    return decay * phase.cos(), decay * phase.sin()


def _scalar_params(p: GaborParams, *names: str) -> list[Tensor]:
    return [Tensor([getattr(p, n)]) for n in names]


def make_spatial_gabor(p: GaborParams, size: int = 15, radius: float = 7.5) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        re, im = spatial_gabor_kernels(*_scalar_params(p, "f_s", "theta", "sigma", "gamma"), size, radius)
    return re.data[0], im.data[0]


def make_temporal_kernel(p: GaborParams, length: int = 6) -> np.ndarray:
    """Complex temporal kernel ``exp(-t/tau) * exp(2*pi*i*f_t*t)`` for t in [0, length)."""
    if length < 1:
        raise ShapeError(f"temporal kernel length must be >= 1, got {length}")
    with no_grad():
        re, im = temporal_kernels(*_scalar_params(p, "f_t", "tau"), length)
    return re.data[0] + 1j * im.data[0]


def _quadrature(
    frames: Tensor,
    g_re: Tensor,
    g_im: Tensor,
    t_re: Tensor,
    t_im: Tensor,
    alpha1: Tensor,
) -> tuple[Tensor, Tensor]:
    """Odd and even responses [U,h,w] at the last frame of ``frames`` [T,h,w]."""
    n, size = g_re.shape[0], g_re.shape[1]
    t, h, w = frames.shape
    kernel = concat([g_re, g_im], axis=0).reshape(2 * n, 1, size, size)
    spatial = conv2d(frames.reshape(t, 1, h, w), kernel, padding=size // 2)
    s_re, s_im = spatial[:, :n], spatial[:, n:]
    even = conv_temporal(s_re, t_re) - conv_temporal(s_im, t_im)
    odd = conv_temporal(s_im, t_re) + conv_temporal(s_re, t_im)
    offset = _per_unit(alpha1, (n, h, w))
    return odd + offset, even + offset


def quadrature_responses(
    S: Tensor,
    unit: GaborParams,
    size: int = 15,
    radius: float = 7.5,
    window: int = 6,
) -> tuple[Tensor, Tensor]:
    """Odd/even simple-cell responses [H,W] of one unit at the last frame of ``S`` [T,H,W]."""
    if S.ndim != 3:
        raise ShapeError(f"expected a grayscale sequence [T,H,W], got {S.shape}")
    if S.shape[0] < window:
        raise ShapeError(f"need at least {window} frames, got {S.shape[0]}")
    g_re, g_im = spatial_gabor_kernels(*_scalar_params(unit, "f_s", "theta", "sigma", "gamma"), size, radius)
    t_re, t_im = temporal_kernels(*_scalar_params(unit, "f_t", "tau"), window)
    odd, even = _quadrature(S[S.shape[0] - window :], g_re, g_im, t_re, t_im, Tensor([unit.alpha1]))
    return odd[0], even[0]


def complex_cell_energy(odd: Tensor, even: Tensor) -> Tensor:
    if odd.shape != even.shape:
        raise ShapeError(f"odd/even responses differ in shape: {odd.shape} vs {even.shape}")
    return odd.square() + even.square()


def divisive_normalize(energies: Tensor, k: Tensor | float, sigma: Tensor | float) -> Tensor:
    """``k * E_n / (sum_i E_i + sigma)`` per pixel for energies [U,h,w]."""
    total = energies.sum(axis=0, keepdims=True).expand(energies.shape)
    return energies * k / (total + sigma)


def pyramid_sizes(height: int, width: int, levels: int = 8) -> list[tuple[int, int]]:
    """Level sizes whose areas fall linearly from H*W to H*W/16."""
    sizes = []
    for k in range(levels):
        fraction = 1.0 - k * (15.0 / 16.0) / max(levels - 1, 1)
        factor = math.sqrt(fraction)
        sizes.append((max(1, round(height * factor)), max(1, round(width * factor))))
    return sizes


def build_pyramid(S: Tensor, levels: int = 8, min_side: int = 15) -> list[Tensor]:
    """Bilinear pyramid of ``S`` [T,H,W]; level 0 is ``S`` itself."""
    if S.ndim != 3:
        raise ShapeError(f"expected [T,H,W], got {S.shape}")
    height, width = S.shape[1:]
    if height < PYRAMID_MIN_SIDE or width < PYRAMID_MIN_SIDE:
        raise PyramidError(f"frames must be at least {PYRAMID_MIN_SIDE}x{PYRAMID_MIN_SIDE}, got {height}x{width}")
    sizes = pyramid_sizes(height, width, levels)
    coarsest = sizes[-1]
    if min(coarsest) < min_side:
        raise PyramidError(
            f"coarsest pyramid level {coarsest[0]}x{coarsest[1]} is smaller than the "
            f"{min_side}x{min_side} filter support; use frames of at least {4 * min_side}x{4 * min_side}"
        )
    return [S if k == 0 else resize_bilinear(S, size) for k, size in enumerate(sizes)]


def evaluation_frame(n_frames: int, span: int = FIRST_ORDER_SPAN) -> int:
    """Index of the labelled frame: the midpoint of the central ``span`` frames."""
    if n_frames < span:
        raise ShapeError(f"need at least {span} frames, got {n_frames}")
    return (n_frames - span) // 2 + span // 2


def _window(S: Tensor, mid: int, length: int) -> Tensor:
    if mid < length - 1 or mid >= S.shape[0]:
        raise ShapeError(f"a {length}-frame window cannot end at frame {mid} of {S.shape[0]}")
    window = S[mid - length + 1 : mid + 1]
    return window - window.mean()


def _unit_kernels(bank: MotionEnergyBank, idx: np.ndarray) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    cfg = bank.config
    g_re, g_im = spatial_gabor_kernels(
        bank.f_s[idx], bank.theta[idx], bank.sigma[idx], bank.gamma[idx], cfg.kernel_size, cfg.radius
    )
    t_re, t_im = temporal_kernels(bank.f_t[idx], bank.tau[idx], cfg.temporal_window)
    return g_re, g_im, t_re, t_im


def bank_energies(bank: MotionEnergyBank, S: Tensor, mid: int, provenance: str = "E1") -> MotionEnergyMap:
    """Normalized energies of every unit of ``bank`` for the window ending at ``mid``."""
    if S.ndim != 3:
        raise ShapeError(f"expected a grayscale sequence [T,H,W], got {S.shape}")
    cfg = bank.config
    height, width = S.shape[1:]
    grid = (height // 8, width // 8)
    pyramid = build_pyramid(_window(S, mid, cfg.temporal_window), cfg.n_scales, cfg.kernel_size)

    maps: list[Tensor] = []
    order: list[np.ndarray] = []
    for scale, idx in bank.scale_groups():
        g_re, g_im, t_re, t_im = _unit_kernels(bank, idx)
        odd, even = _quadrature(pyramid[scale], g_re, g_im, t_re, t_im, bank.alpha1[idx])
        maps.append(resize_bilinear(complex_cell_energy(odd, even), grid))
        order.append(idx)
    energies = concat(maps, axis=0)
    placed = np.concatenate(order)
    if not np.array_equal(placed, np.arange(bank.n_units)):
        energies = energies[np.argsort(placed)]
    return MotionEnergyMap(divisive_normalize(energies, bank.k1, bank.sigma1), provenance)


def unit_energy_maps(
    bank: MotionEnergyBank,
    S: Tensor | np.ndarray,
    mid: int | None = None,
    units: Sequence[int] | None = None,
) -> dict[int, np.ndarray]:
    """Unnormalized energy of selected units at their own pyramid level.

    Used by the physiology probes, which look at single units without the
    population normalization pool.
    """
    S = S if isinstance(S, Tensor) else Tensor(S)
    cfg = bank.config
    mid = S.shape[0] - 1 if mid is None else mid
    chosen = np.arange(bank.n_units) if units is None else np.asarray(units, dtype=np.int64)
    out: dict[int, np.ndarray] = {}
    with no_grad():
        window = _window(S, mid, cfg.temporal_window)
        sizes = pyramid_sizes(*S.shape[1:], cfg.n_scales)
        for scale, idx in bank.scale_groups(chosen):
            level = window if scale == 0 else resize_bilinear(window, sizes[scale])
            odd, even = _quadrature(level, *_unit_kernels(bank, idx), bank.alpha1[idx])
            energy = complex_cell_energy(odd, even).data
            for row, unit in enumerate(idx):
                out[int(unit)] = energy[row]
    return out


def stage1_forward(S: Tensor, bank: MotionEnergyBank) -> MotionEnergyMap:
    """E1 for a grayscale sequence ``S`` [T,H,W] with T >= 11, labelled at the central frame."""
    if S.ndim != 3:
        raise ShapeError(f"expected a grayscale sequence [T,H,W], got {S.shape}")
    return bank_energies(bank, S, evaluation_frame(S.shape[0], FIRST_ORDER_SPAN), "E1")
