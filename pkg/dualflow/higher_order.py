"""Higher-order channel: a five-layer 3D CNN feeding its own motion-energy bank.

The CNN turns 15 RGB frames into a single "texture luminance" stream. Layers
whose input and output widths match carry an identity skip, so every layer
computes ``skip(x) + relu(conv(x) + b)``. With all weights and biases at zero
the stream is zero and the bank only sees its spontaneous rates.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from dualflow.config import BankConfig
from dualflow.convolution import conv3d
from dualflow.errors import ShapeError
from dualflow.optim import project
from dualflow.stage1 import MotionEnergyBank, MotionEnergyMap, bank_energies, divisive_normalize
from dualflow.tensor_core import Tensor, concat

HIGHER_ORDER_SPAN = 15


class HigherOrderChannel:
    def __init__(
        self,
        weights: Sequence[Tensor],
        biases: Sequence[Tensor],
        bank: MotionEnergyBank,
    ) -> None:
        if len(weights) != 5 or len(biases) != 5:
            raise ShapeError(f"the higher-order CNN has exactly 5 layers, got {len(weights)}")
        self.weights = list(weights)
        self.biases = list(biases)
        self.bank = bank

    @classmethod
    def initialize(
        cls,
        width: int = 16,
        bank_config: BankConfig | None = None,
        rng: np.random.Generator | None = None,
    ) -> HigherOrderChannel:
        rng = rng or np.random.default_rng(1)
        widths = (3, width, width, width, width, 1)
        weights, biases = [], []
        for layer, (c_in, c_out) in enumerate(zip(widths[:-1], widths[1:])):
            std = np.sqrt(2.0 / (c_in * 27)) * (0.5 if c_in == c_out else 1.0)
            weights.append(Tensor(rng.normal(0.0, std, (c_out, c_in, 3, 3, 3)), requires_grad=True, name=f"conv{layer}"))
            biases.append(Tensor(np.zeros(c_out), requires_grad=True, name=f"bias{layer}"))
        return cls(weights, biases, MotionEnergyBank.initialize(bank_config, rng))

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1], *(w.shape[0] for w in self.weights))

    def has_skip(self, layer: int) -> bool:
        w = self.weights[layer]
        return w.shape[0] == w.shape[1]

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{prefix}conv{i}.weight"] = w
            params[f"{prefix}conv{i}.bias"] = b
        params.update(self.bank.parameters(f"{prefix}bank."))
        return params

    def clamp(self) -> None:
        self.bank.clamp()

    def layer(self, index: int, x: Tensor) -> Tensor:
        """Apply CNN layer ``index`` to ``x`` [C,T,H,W]."""
        w, b = self.weights[index], self.biases[index]
        y = conv3d(x, w, padding=1)
        y = (y + b.reshape(-1, 1, 1, 1).expand(y.shape)).relu()
        return x + y if self.has_skip(index) else y

    def features(self, rgb: Tensor) -> Tensor:
        """Nonlinear stream [T,H,W] for an RGB sequence [T,3,H,W]."""
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise ShapeError(f"expected an RGB sequence [T,3,H,W], got {rgb.shape}")
        t, _, h, w = rgb.shape
        x = rgb.transpose(1, 0, 2, 3)
        for i in range(len(self.weights)):
            x = self.layer(i, x)
        return x.reshape(t, h, w)


def hoc_forward(rgb: Tensor, channel: HigherOrderChannel) -> MotionEnergyMap:
    """E2 for an RGB sequence [T,3,H,W] with T >= 15, labelled at the central frame."""
    if rgb.ndim != 4:
        raise ShapeError(f"expected an RGB sequence [T,3,H,W], got {rgb.shape}")
    n_frames = rgb.shape[0]
    if n_frames < HIGHER_ORDER_SPAN:
        raise ShapeError(f"the higher-order channel needs {HIGHER_ORDER_SPAN} frames, got {n_frames}")
    start = (n_frames - HIGHER_ORDER_SPAN) // 2
    stream = channel.features(rgb[start : start + HIGHER_ORDER_SPAN])
    return bank_energies(channel.bank, stream, HIGHER_ORDER_SPAN // 2, "E2")


class FusionLayer:
    """Nonnegative 1x1 convolution from the 512 stacked channels to 256, then normalization."""

    def __init__(self, weight: Tensor, k: float = 1.0, sigma: float = 0.05) -> None:
        if weight.ndim != 2 or weight.shape[1] != 2 * weight.shape[0]:
            raise ShapeError(f"fusion weight must be [C, 2C], got {weight.shape}")
        self.weight = weight
        self.k = Tensor(k, requires_grad=True, name="fusion_k")
        self.sigma = Tensor(sigma, requires_grad=True, name="fusion_sigma")
        self.clamp()

    @classmethod
    def initialize(cls, channels: int = 256, second: float = 1.0) -> FusionLayer:
        """``[I | second * I]``; ``second=0`` passes E1 straight through."""
        eye = np.eye(channels)
        return cls(Tensor(np.concatenate([eye, second * eye], axis=1), requires_grad=True, name="fusion"))

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}weight": self.weight, f"{prefix}k": self.k, f"{prefix}sigma": self.sigma}

    def clamp(self) -> None:
        project(self.weight, 0.0)
        project(self.k, 1e-3)
        project(self.sigma, 1e-3)

    def linear(self, e1: Tensor, e2: Tensor) -> Tensor:
        """The 1x1 convolution alone, before normalization."""
        if e1.shape != e2.shape:
            raise ShapeError(f"cannot fuse maps of shapes {e1.shape} and {e2.shape}")
        c, h, w = e1.shape
        if 2 * c != self.weight.shape[1]:
            raise ShapeError(f"fusion expects {self.weight.shape[1] // 2} channels per map, got {c}")
        stacked = concat([e1, e2], axis=0).reshape(2 * c, h * w)
        return (self.weight @ stacked).reshape(self.weight.shape[0], h, w)


def fuse_channels(e1: MotionEnergyMap, e2: MotionEnergyMap, fusion: FusionLayer) -> MotionEnergyMap:
    mixed = fusion.linear(e1.values, e2.values)
    return MotionEnergyMap(divisive_normalize(mixed, fusion.k, fusion.sigma), "fused")
