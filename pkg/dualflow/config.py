"""Configuration models and the plain-text ``key = value`` config format.

Each section of a config file maps onto one pydantic model. Curriculum phases
are written as ``[phase.1]``, ``[phase.2]`` ... sections.
"""

from __future__ import annotations

import configparser
import types
import typing
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from dualflow.errors import ConfigError

DATASET_KEYS = ("A", "B", "C", "D", "E", "proxy")
ChannelMode = Literal["first_order", "dual"]
MaterialMode = Literal["diffuse", "nondiffuse"]


class BankConfig(BaseModel):
    """Motion-energy bank layout and initialization ranges."""

    n_units: int = Field(default=256, ge=1, description="Number of complex cells")
    n_scales: int = Field(default=8, ge=1, description="Pyramid levels the units are spread over")
    kernel_size: int = Field(default=15, ge=3, description="Spatial kernel support (odd)")
    radius: float = Field(default=7.5, gt=0, description="Circular support radius in pixels")
    temporal_window: int = Field(default=6, ge=1, description="Temporal kernel length in frames")
    freq_range: tuple[float, float] = Field(default=(0.02, 0.24), description="Log-uniform f_s/f_t init range")
    sigma_range: tuple[float, float] = Field(default=(2.0, 5.0), description="Envelope scale init range (px)")
    tau_range: tuple[float, float] = Field(default=(1.5, 4.0), description="Temporal decay init range (frames)")
    k1: float = Field(default=1.0, gt=0, description="Normalization gain K1")
    sigma1: float = Field(default=0.05, gt=0, description="Semi-saturation constant sigma1")

    @model_validator(mode="after")
    def _check_layout(self) -> BankConfig:
        if self.n_units % self.n_scales:
            raise ValueError("n_units must be a multiple of n_scales")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return self


class ModelConfig(BaseModel):
    """Architecture of both stages."""

    seed: int = Field(default=0, description="Seed for parameter initialization")
    projection_dim: int = Field(default=64, ge=1, description="Width of the affinity projection phi")
    scale_init: float = Field(default=4.0, gt=0, lt=10, description="Initial affinity scale s")
    hoc_width: int = Field(default=16, ge=1, description="Hidden width of the higher-order 3D CNN")
    decoder_width: int = Field(default=64, ge=1, description="Hidden width of the flow decoder")
    decoder_blocks: int = Field(default=2, ge=0, description="Residual 1x1 blocks in the decoder")
    k2: float = Field(default=1.0, gt=0, description="Decoder normalization gain K2")
    sigma2: float = Field(default=0.05, gt=0, description="Decoder normalization constant sigma2")
    bank: BankConfig = Field(default_factory=BankConfig)

    @field_validator("bank")
    @classmethod
    def _full_bank(cls, bank: BankConfig) -> BankConfig:
        if bank.n_units != 256:
            raise ValueError("the model uses exactly 256 motion-energy units")
        return bank


class StimulusConfig(BaseModel):
    size: int = Field(default=64, ge=32, description="Frame side length in pixels")
    frames: int = Field(default=15, ge=11, description="Frames per training sequence")
    benchmark_frames: int = Field(default=16, ge=15, description="Frames per second-order benchmark sequence")
    max_speed: float = Field(default=3.0, gt=0, description="Largest toy-dataset speed (px/frame)")
    region_radius: float = Field(default=10.0, gt=0, description="Radius of the modulated carrier region")
    benchmark_scenes: int = Field(default=8, ge=2, description="Scenes per modulation kind")


class CarrierConfig(BaseModel):
    """Markov carrier parameters (recorded in every benchmark sequence's metadata)."""

    base_mean: tuple[float, float] = Field(default=(0.0, 0.0), description="Mean of S(0) in px/frame")
    base_sd: float = Field(default=0.8, ge=0, description="Standard deviation of S(0)")
    step_sd: float = Field(default=0.3, ge=0, description="Standard deviation of S(t) - S(t-1)")


class CurriculumPhase(BaseModel):
    datasets: list[str] = Field(description="Dataset keys mixed in this phase")
    steps: int = Field(ge=0, description="Optimizer steps in this phase")

    @field_validator("datasets")
    @classmethod
    def _known(cls, datasets: list[str]) -> list[str]:
        unknown = [d for d in datasets if d not in DATASET_KEYS]
        if unknown or not datasets:
            raise ValueError(f"unknown dataset keys {unknown}; expected a subset of {DATASET_KEYS}")
        return datasets


def _default_phases() -> list[CurriculumPhase]:
    return [
        CurriculumPhase(datasets=["B", "C"], steps=5000),
        CurriculumPhase(datasets=["A", "B", "C", "D", "E"], steps=15000),
    ]


class TrainConfig(BaseModel):
    seed: int = Field(default=0, description="Seed for data generation and batching")
    iterations: int = Field(default=4, ge=1, description="Stage II iterations")
    lr: float = Field(default=2e-4, ge=0, description="Adam learning rate")
    batch_size: int = Field(default=4, ge=1)
    channel: ChannelMode = Field(default="dual", description="first_order or dual")
    material: MaterialMode = Field(default="nondiffuse", description="Proxy material used for the 'proxy' key")
    loss_gamma: float = Field(default=0.8, gt=0, description="Exponential decode-point weight base")
    loss_weights: list[float] | None = Field(default=None, description="Explicit per-decode-point weights")
    eval_every: int = Field(default=100, ge=1, description="Steps between held-out evaluations")
    holdout: int = Field(default=8, ge=1, description="Held-out sequences per dataset")
    dtype: Literal["float32", "float64"] = Field(default="float32")
    output_dir: str = Field(default="runs")
    run_name: str = Field(default="run")
    phases: list[CurriculumPhase] = Field(default_factory=_default_phases)

    @model_validator(mode="after")
    def _curriculum_starts_simple(self) -> TrainConfig:
        if len(self.phases) > 1 and not set(self.phases[0].datasets) <= {"B", "C"}:
            raise ValueError("the first curriculum phase may only use datasets B and C")
        if self.loss_weights is not None and len(self.loss_weights) != self.iterations + 1:
            raise ValueError("loss_weights needs one weight for Stage I plus one per iteration")
        return self

    @property
    def total_steps(self) -> int:
        return sum(p.steps for p in self.phases)


class AnalysisConfig(BaseModel):
    grid_size: int = Field(default=8, ge=2, description="Frequencies per axis of the preference grid")
    directions: int = Field(default=12, ge=4, description="Directions per tuning curve")
    freq_min: float = Field(default=0.02, gt=0)
    freq_max: float = Field(default=0.24, lt=0.25)
    stimulus_size: int = Field(default=64, ge=64)
    classification_margin: float = Field(default=1.28, gt=0, description="Fisher-z margin for pattern/component")
    speed_mask: float = Field(default=1e-6, ge=0, description="Speeds below this are excluded from direction stats")
    period: Literal["orientation", "direction"] = Field(default="orientation", description="Phasor period for O_ori")


class DualflowConfig(BaseModel):
    model: ModelConfig = Field(default_factory=ModelConfig)
    stimulus: StimulusConfig = Field(default_factory=StimulusConfig)
    carrier: CarrierConfig = Field(default_factory=CarrierConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)


_SECTIONS: dict[str, tuple[str, ...]] = {
    "model": ("model",),
    "bank": ("model", "bank"),
    "stimulus": ("stimulus",),
    "carrier": ("carrier",),
    "train": ("train",),
    "analysis": ("analysis",),
}


def _is_sequence(annotation: Any) -> bool:
    origin = typing.get_origin(annotation)
    if origin in (list, tuple):
        return True
    if origin in (typing.Union, types.UnionType):
        return any(_is_sequence(arg) for arg in typing.get_args(annotation))
    return False


def _parse_section(model: type[BaseModel], items: dict[str, str], section: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, raw in items.items():
        if key not in model.model_fields:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        annotation = model.model_fields[key].annotation
        text = raw.strip()
        if text.lower() == "none":
            out[key] = None
        elif _is_sequence(annotation):
            out[key] = [part.strip() for part in text.split(",") if part.strip()]
        else:
            out[key] = text
    return out


def parse_config(text: str) -> DualflowConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    data: dict[str, Any] = {}
    phases: list[tuple[int, dict[str, Any]]] = []
    for section in parser.sections():
        items = dict(parser.items(section))
        if section.startswith("phase."):
            try:
                order = int(section.split(".", 1)[1])
            except ValueError as exc:
                raise ConfigError(f"phase sections are named [phase.<n>], got [{section}]") from exc
            phases.append((order, _parse_section(CurriculumPhase, items, section)))
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        path = _SECTIONS[section]
        model: type[BaseModel] = DualflowConfig
        for part in path:
            model = model.model_fields[part].annotation  # type: ignore[assignment]
        target = data
        for part in path[:-1]:
            target = target.setdefault(part, {})
        target.setdefault(path[-1], {}).update(_parse_section(model, items, section))

    if phases:
        data.setdefault("train", {})["phases"] = [p for _, p in sorted(phases, key=lambda kv: kv[0])]
    try:
        return DualflowConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"invalid config value at {where}: {first['msg']}") from exc


def load_config(path: str | Path | None) -> DualflowConfig:
    if path is None:
        return DualflowConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def dump_config(config: DualflowConfig | None = None) -> str:
    """Render ``config`` (defaults when omitted) in the plain-text format."""
    config = config or DualflowConfig()
    lines: list[str] = []
    for section, path in _SECTIONS.items():
        model: BaseModel = config
        for part in path:
            model = getattr(model, part)
        lines.append(f"[{section}]")
        for key, value in model:
            if isinstance(value, BaseModel) or key == "phases":
                continue
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    for i, phase in enumerate(config.train.phases, start=1):
        lines.append(f"[phase.{i}]")
        lines.append(f"datasets = {_format_value(phase.datasets)}")
        lines.append(f"steps = {phase.steps}")
        lines.append("")
    return "\n".join(lines)
