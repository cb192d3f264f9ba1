"""The two-stage motion model: Stage I energies feeding Stage II graph integration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from dualflow.checkpoint import load_checkpoint, save_checkpoint
from dualflow.config import ChannelMode, ModelConfig
from dualflow.errors import CheckpointError, ConfigError, ShapeError
from dualflow.flow import FlowField
from dualflow.higher_order import FusionLayer, HigherOrderChannel, fuse_channels, hoc_forward
from dualflow.stage1 import MotionEnergyBank, MotionEnergyMap, stage1_forward
from dualflow.stage2 import FlowDecoder, GatedUpdateUnit, GraphAffinity, decode_flow, stage2_forward
from dualflow.stimuli import StimulusSequence
from dualflow.tensor_core import Tensor

logger = logging.getLogger(__name__)

DECODER_PREFIX = "decoder"
EnergySource = Literal["fused", "E1", "E2"]


@dataclass
class ModelOutput:
    """Everything one forward pass produces.

    ``flows[0]`` is the Stage I decode and ``flows[i]`` the i-th Stage II
    iteration.
    """

    e1: MotionEnergyMap
    e2: MotionEnergyMap | None
    em: MotionEnergyMap
    flows: list[FlowField]
    adjacency: Tensor
    stage2_energies: list[MotionEnergyMap] = field(default_factory=list)

    @property
    def final_flow(self) -> FlowField:
        return self.flows[-1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.em.grid


class DualflowModel:
    """First-order bank, optional higher-order channel and fusion, and Stage II."""

    def __init__(self, config: ModelConfig | None = None, channel: ChannelMode = "dual") -> None:
        self.config = config or ModelConfig()
        if channel not in ("first_order", "dual"):
            raise ConfigError(f"channel must be 'first_order' or 'dual', got {channel!r}")
        self.channel = channel
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        n = cfg.bank.n_units
        self.first_order = MotionEnergyBank.initialize(cfg.bank, rng)
        self.higher_order = HigherOrderChannel.initialize(cfg.hoc_width, cfg.bank, rng) if channel == "dual" else None
        self.fusion = FusionLayer.initialize(n) if channel == "dual" else None
        self.affinity = GraphAffinity.initialize(n, cfg.projection_dim, cfg.scale_init, rng)
        self.gru = GatedUpdateUnit.initialize(n, rng)
        self.decoder = FlowDecoder.initialize(n, cfg.decoder_width, cfg.decoder_blocks, cfg.k2, cfg.sigma2, rng)

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.first_order.parameters("first_order."))
        if self.higher_order is not None:
            params.update(self.higher_order.parameters("higher_order."))
        if self.fusion is not None:
            params.update(self.fusion.parameters("fusion."))
        params.update(self.affinity.parameters("graph."))
        params.update(self.gru.parameters("gru."))
        params.update(self.decoder.parameters(f"{DECODER_PREFIX}."))
        return params

    def clamp(self) -> None:
        """Project every constrained parameter back into range."""
        self.first_order.clamp()
        if self.higher_order is not None:
            self.higher_order.clamp()
        if self.fusion is not None:
            self.fusion.clamp()
        self.affinity.clamp()
        self.decoder.clamp()

    def energies(self, seq: StimulusSequence, source: EnergySource = "fused") -> tuple[MotionEnergyMap, MotionEnergyMap | None, MotionEnergyMap]:
        """``(E1, E2, E_m)``; ``source`` picks which map feeds Stage II in dual mode."""
        e1 = stage1_forward(Tensor(seq.luma()), self.first_order)
        if self.higher_order is None:
            if source == "E2":
                raise ConfigError("a first-order model has no higher-order channel")
            return e1, None, e1
        e2 = hoc_forward(Tensor(seq.rgb()), self.higher_order)
        if source == "E1":
            return e1, e2, e1
        if source == "E2":
            return e1, e2, e2
        return e1, e2, fuse_channels(e1, e2, self.fusion)

    def forward(
        self,
        seq: StimulusSequence,
        iterations: int = 4,
        source: EnergySource = "fused",
    ) -> ModelOutput:
        if self.channel == "dual" and seq.n_frames < 15:
            raise ShapeError(f"the dual-channel model needs 15 frames, got {seq.n_frames}")
        size = seq.size
        if size[0] % 8 or size[1] % 8:
            raise ShapeError(f"frame size {size} must be a multiple of 8")
        e1, e2, em = self.energies(seq, source)
        stage1_flow = decode_flow(em, self.decoder, size)
        result = stage2_forward(em, self.affinity, self.gru, self.decoder, iterations, size)
        return ModelOutput(
            e1=e1,
            e2=e2,
            em=em,
            flows=[stage1_flow, *result.flows],
            adjacency=result.adjacency,
            stage2_energies=result.energies,
        )

    __call__ = forward

    def decode_points(self, iterations: int) -> dict[str, str]:
        points = {"stage1": DECODER_PREFIX}
        points.update({f"stage2.iter{i}": DECODER_PREFIX for i in range(1, iterations + 1)})
        return points

    def save(self, path: str | Path, iterations: int = 4, extra: dict | None = None) -> None:
        metadata = {
            "model_config": self.config.model_dump(mode="json"),
            "channel": self.channel,
            "iterations": iterations,
            "decode_points": self.decode_points(iterations),
            **(extra or {}),
        }
        save_checkpoint(path, self.parameters(), metadata)
        logger.info("Saved checkpoint %s", path)

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
        for name, param in params.items():
            value = arrays[name]
            if value.shape != param.shape:
                raise CheckpointError(f"parameter {name}: checkpoint shape {value.shape} != model shape {param.shape}")
            param.data = np.array(value, dtype=param.dtype)

    @classmethod
    def load(cls, path: str | Path) -> tuple[DualflowModel, dict]:
        arrays, manifest = load_checkpoint(path)
        meta = manifest.metadata
        try:
            config = ModelConfig.model_validate(meta["model_config"])
            channel = meta["channel"]
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: checkpoint metadata does not describe a model ({exc})") from exc
        model = cls(config, channel)
        model.load_state(arrays)
        return model, meta
