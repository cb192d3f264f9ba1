"""Global motion integration over a self-attention motion graph.

Every node of the H/8 x W/8 grid is connected to every other node with a
weight derived from the cosine similarity of projected motion energies.
Energy is propagated over the graph, refined by a convolutional gated
recurrent unit and decoded to dense flow after every iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from dualflow.convolution import conv2d, resize_bilinear
from dualflow.errors import ConfigError, GraphSizeError, ShapeError
from dualflow.flow import FlowField
from dualflow.optim import project
from dualflow.stage1 import MotionEnergyMap
from dualflow.tensor_core import Tensor, concat

logger = logging.getLogger(__name__)

MAX_NODES = 4096
SCALE_MIN = 1e-3
SCALE_MAX = 10.0 - 1e-3


def _check_nodes(n: int) -> None:
    if n > MAX_NODES:
        side = int(np.sqrt(MAX_NODES))
        raise GraphSizeError(
            f"motion graph would have {n} nodes (limit {MAX_NODES}); downscale frames so the "
            f"H/8 x W/8 grid is at most {side}x{side}"
        )


class GraphAffinity:
    """Learnable projection ``phi`` [C,d] and scale ``s`` of the motion graph."""

    def __init__(self, phi: Tensor, scale: float = 4.0) -> None:
        self.phi = phi
        self.scale = Tensor(scale, requires_grad=True, name="s")
        self.clamp()

    @classmethod
    def initialize(cls, channels: int = 256, dim: int = 64, scale: float = 4.0, rng: np.random.Generator | None = None) -> GraphAffinity:
        rng = rng or np.random.default_rng(2)
        phi = Tensor(rng.normal(0.0, 1.0 / np.sqrt(channels), (channels, dim)), requires_grad=True, name="phi")
        return cls(phi, scale)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}phi": self.phi, f"{prefix}s": self.scale}

    def clamp(self) -> None:
        project(self.scale, SCALE_MIN, SCALE_MAX)


def cosine_affinity(nodes: Tensor, phi: Tensor) -> Tensor:
    """Symmetric cosine similarity [N,N] of the projected node features.

    Nodes whose projection has zero norm get similarity 0 to every node.
    """
    n = nodes.shape[0]
    _check_nodes(n)
    projected = nodes @ phi
    sq_norm = projected.square().sum(axis=1, keepdims=True)
    dead = sq_norm.data[:, 0] <= 1e-24
    if dead.any():
        logger.warning(
            "%d graph node(s) have zero-norm features; their similarities are set to 0",
            int(dead.sum()),
        )
    guard = Tensor(dead[:, None], dtype=nodes.dtype)
    alive = Tensor(~dead[:, None], dtype=nodes.dtype)
    inv_norm = alive / (sq_norm + guard).sqrt()
    unit = projected * inv_norm.expand(projected.shape)
    sim = unit @ unit.T
    return (sim + sim.T) * 0.5


def build_adjacency(nodes: Tensor, phi: Tensor, scale: Tensor | float) -> Tensor:
    """``D^-1/2 exp(s * A0) D^-1/2`` with ``A0`` the cosine affinity of ``nodes`` [N,C]."""
    base = cosine_affinity(nodes, phi)
    weights = (base * scale).exp()
    n = weights.shape[0]
    inv_sqrt_degree = 1.0 / weights.sum(axis=1, keepdims=True).sqrt()
    return weights * inv_sqrt_degree.expand(n, n) * inv_sqrt_degree.reshape(1, n).expand(n, n)


class GatedUpdateUnit:
    """Convolutional GRU with separable (1x3 then 3x1) gates over the node grid.

    ``candidate_activation`` selects ``tanh`` (default) or ``identity`` for the
    candidate state.
    """

    GATES = ("z", "r", "q")

    def __init__(
        self,
        weights: dict[str, tuple[Tensor, Tensor, Tensor]],
        candidate_activation: Literal["tanh", "identity"] = "tanh",
    ) -> None:
        self.weights = weights
        self.candidate_activation = candidate_activation

    @classmethod
    def initialize(
        cls,
        hidden: int = 256,
        rng: np.random.Generator | None = None,
        candidate_activation: Literal["tanh", "identity"] = "tanh",
    ) -> GatedUpdateUnit:
        rng = rng or np.random.default_rng(3)
        weights = {}
        for gate in cls.GATES:
            horizontal = rng.normal(0.0, np.sqrt(1.0 / (2 * hidden * 3)), (hidden, 2 * hidden, 1, 3))
            vertical = rng.normal(0.0, np.sqrt(1.0 / (hidden * 3)), (hidden, hidden, 3, 1))
            weights[gate] = (
                Tensor(horizontal, requires_grad=True, name=f"{gate}.h"),
                Tensor(vertical, requires_grad=True, name=f"{gate}.v"),
                Tensor(np.zeros(hidden), requires_grad=True, name=f"{gate}.b"),
            )
        return cls(weights, candidate_activation)

    @property
    def hidden(self) -> int:
        return self.weights["z"][1].shape[0]

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for gate, (horizontal, vertical, bias) in self.weights.items():
            params[f"{prefix}{gate}.horizontal"] = horizontal
            params[f"{prefix}{gate}.vertical"] = vertical
            params[f"{prefix}{gate}.bias"] = bias
        return params

    def _gate(self, gate: str, x: Tensor) -> Tensor:
        horizontal, vertical, bias = self.weights[gate]
        y = conv2d(conv2d(x, horizontal, padding=(0, 1)), vertical, padding=(1, 0))
        return y + bias.reshape(-1, 1, 1).expand(y.shape)

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        """New hidden state [C,gh,gw] from hidden ``h`` and input ``x``."""
        if h.shape != x.shape:
            raise ShapeError(f"GRU hidden {h.shape} and input {x.shape} differ")
        hx = concat([h, x], axis=0)
        z = self._gate("z", hx).sigmoid()
        r = self._gate("r", hx).sigmoid()
        q = self._gate("q", concat([r * h, x], axis=0))
        if self.candidate_activation == "tanh":
            q = q.tanh()
        return (1.0 - z) * h + z * q


def _grid_view(nodes: Tensor, grid: tuple[int, int]) -> Tensor:
    n, c = nodes.shape
    if n != grid[0] * grid[1]:
        raise ShapeError(f"{n} nodes do not tile a {grid[0]}x{grid[1]} grid")
    return nodes.T.reshape(c, grid[0], grid[1])


def _node_view(values: Tensor) -> Tensor:
    c, h, w = values.shape
    return values.reshape(c, h * w).T


def integrate_step(adjacency: Tensor, nodes: Tensor, gru: GatedUpdateUnit, grid: tuple[int, int]) -> Tensor:
    """``GRU(h=E, x=A @ E)`` on the spatial grid; returns updated nodes [N,C]."""
    n = nodes.shape[0]
    if adjacency.shape != (n, n):
        raise ShapeError(f"adjacency {adjacency.shape} does not match {n} nodes")
    propagated = adjacency @ nodes
    return _node_view(gru(_grid_view(nodes, grid), _grid_view(propagated, grid)))


class FlowDecoder:
    """Shared decoder: energy normalization, 1x1 residual stack, bilinear upsampling."""

    def __init__(self, params: dict[str, Tensor], blocks: int, k2: float = 1.0, sigma2: float = 0.05) -> None:
        self.params = params
        self.blocks = blocks
        self.k2 = Tensor(k2, requires_grad=True, name="k2")
        self.sigma2 = Tensor(sigma2, requires_grad=True, name="sigma2")
        self.clamp()

    @classmethod
    def initialize(
        cls,
        channels: int = 256,
        width: int = 64,
        blocks: int = 2,
        k2: float = 1.0,
        sigma2: float = 0.05,
        rng: np.random.Generator | None = None,
    ) -> FlowDecoder:
        rng = rng or np.random.default_rng(4)

        def conv(name: str, c_out: int, c_in: int, gain: float = 1.0) -> None:
            w = rng.normal(0.0, gain * np.sqrt(2.0 / c_in), (c_out, c_in, 1, 1))
            params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=name)
            params[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.bias")

        params: dict[str, Tensor] = {}
        conv("input", width, channels)
        for i in range(blocks):
            conv(f"block{i}.a", width, width, 0.5)
            conv(f"block{i}.b", width, width, 0.5)
        conv("output", 2, width, 0.1)
        return cls(params, blocks, k2, sigma2)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}{name}": t for name, t in self.params.items()}
        out[f"{prefix}k2"] = self.k2
        out[f"{prefix}sigma2"] = self.sigma2
        return out

    def clamp(self) -> None:
        project(self.k2, 1e-3)
        project(self.sigma2, 1e-3)

    def _conv(self, name: str, x: Tensor) -> Tensor:
        y = conv2d(x, self.params[f"{name}.weight"])
        return y + self.params[f"{name}.bias"].reshape(-1, 1, 1).expand(y.shape)

    def normalize(self, energies: Tensor) -> Tensor:
        """``K2 * E^2 / (sum_c E^2 + sigma2^2)`` per grid cell."""
        sq = energies.square()
        pooled = sq.sum(axis=0, keepdims=True).expand(sq.shape)
        return sq * self.k2 / (pooled + self.sigma2.square())

    def __call__(self, energies: Tensor, size: tuple[int, int]) -> FlowField:
        x = self._conv("input", self.normalize(energies)).relu()
        for i in range(self.blocks):
            x = x + self._conv(f"block{i}.b", self._conv(f"block{i}.a", x).relu())
        flow = self._conv("output", x)
        return FlowField(resize_bilinear(flow, size))


def decode_flow(energies: MotionEnergyMap | Tensor, decoder: FlowDecoder, size: tuple[int, int] | None = None) -> FlowField:
    """Decode energies [C,h,w] to a flow field; ``size`` defaults to 8x the grid."""
    values = energies.values if isinstance(energies, MotionEnergyMap) else energies
    if values.ndim != 3:
        raise ShapeError(f"expected energies [C,h,w], got {values.shape}")
    size = size or (values.shape[1] * 8, values.shape[2] * 8)
    return decoder(values, size)


@dataclass
class Stage2Result:
    flows: list[FlowField]
    adjacency: Tensor
    energies: list[MotionEnergyMap] = field(default_factory=list)

    @property
    def final_flow(self) -> FlowField:
        return self.flows[-1]


def stage2_forward(
    energies: MotionEnergyMap,
    affinity: GraphAffinity,
    gru: GatedUpdateUnit,
    decoder: FlowDecoder,
    iterations: int = 4,
    size: tuple[int, int] | None = None,
) -> Stage2Result:
    """Run ``iterations`` graph-integration steps, rebuilding the adjacency each time."""
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    grid = energies.grid
    _check_nodes(grid[0] * grid[1])
    size = size or (grid[0] * 8, grid[1] * 8)
    nodes = energies.nodes()
    flows: list[FlowField] = []
    states: list[MotionEnergyMap] = []
    adjacency = None
    for i in range(1, iterations + 1):
        adjacency = build_adjacency(nodes, affinity.phi, affinity.scale)
        nodes = integrate_step(adjacency, nodes, gru, grid)
        state = MotionEnergyMap(_grid_view(nodes, grid), f"stage2-iteration-{i}")
        states.append(state)
        flows.append(decoder(state.values, size))
    return Stage2Result(flows=flows, adjacency=adjacency, energies=states)
