"""Supervised training, curriculum scheduling and the second-order ablation."""

from __future__ import annotations

import logging
import math
from collections import deque
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from dualflow.atomic import atomic_write
from dualflow.config import (
    ChannelMode,
    CurriculumPhase,
    DualflowConfig,
    MaterialMode,
    StimulusConfig,
    dump_config,
)
from dualflow.errors import ConfigError, CorrelationError, GradientError, ShapeError, TrainingDivergedError
from dualflow.flow import FlowField
from dualflow.metrics import epe, pearson
from dualflow.model import DualflowModel
from dualflow.optim import Adam
from dualflow.stimuli import (
    MODULATIONS,
    StimulusSequence,
    modulation_benchmark,
    proxy_sample,
    textured_scene,
    toy_sample,
)
from dualflow.tensor_core import Tensor, backward, default_dtype, no_grad

logger = logging.getLogger(__name__)

TREND_WINDOW = 50
ABLATION_CONFIGS: tuple[tuple[ChannelMode, MaterialMode], ...] = (
    ("first_order", "diffuse"),
    ("first_order", "nondiffuse"),
    ("dual", "diffuse"),
    ("dual", "nondiffuse"),
)

ProgressFn = Callable[[int, int, float], None]


def decode_weights(iterations: int, gamma: float = 0.8, weights: Sequence[float] | None = None) -> np.ndarray:
    """Weight of each decode point: Stage I then iterations 1..K, ``gamma ** (K - k)`` by default."""
    if weights is not None:
        if len(weights) != iterations + 1:
            raise ConfigError(f"expected {iterations + 1} loss weights, got {len(weights)}")
        return np.asarray(weights, dtype=float)
    return gamma ** np.arange(iterations, -1, -1, dtype=float)


def sequence_loss(preds: Sequence[FlowField], gt: FlowField, weights: Sequence[float]) -> Tensor:
    """``sum_k w_k * mean((F_k - gt)^2)`` over every decode point."""
    if len(preds) != len(weights):
        raise ShapeError(f"{len(preds)} decode points but {len(weights)} loss weights")
    target = gt.data.data
    total: Tensor | None = None
    for pred, w in zip(preds, weights):
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        term = (pred.data - Tensor(target)).square().mean() * float(w)
        total = term if total is None else total + term
    if total is None:
        raise ShapeError("no decode points to score")
    return total


def clamp_params(model: DualflowModel) -> DualflowModel:
    model.clamp()
    return model


class DatasetSampler:
    """Deterministic sequences for the dataset keys A, B, C, D, E and ``proxy``.

    Indices below ``holdout`` are reserved for evaluation.
    """

    def __init__(
        self,
        seed: int,
        material: MaterialMode = "nondiffuse",
        stimulus: StimulusConfig | None = None,
        holdout: int = 8,
    ) -> None:
        self.seed = seed
        self.material = material
        self.stimulus = stimulus or StimulusConfig()
        self.holdout = holdout

    def sequence(self, key: str, index: int) -> StimulusSequence:
        if key == "A":
            return textured_scene(self.seed, index, self.stimulus)
        if key in ("B", "C"):
            return toy_sample(key, self.seed, index, self.stimulus)
        if key == "D":
            return proxy_sample(self.seed, index, "diffuse", self.stimulus)
        if key == "E":
            return proxy_sample(self.seed, index, "nondiffuse", self.stimulus)
        if key == "proxy":
            return proxy_sample(self.seed, index, self.material, self.stimulus)
        raise ConfigError(f"unknown dataset key {key!r}")

    def batch(self, phase: CurriculumPhase, step: int, batch_size: int) -> list[tuple[str, StimulusSequence]]:
        rng = np.random.default_rng([self.seed, step])
        keys = rng.choice(phase.datasets, size=batch_size)
        start = self.holdout + step * batch_size
        return [(str(key), self.sequence(str(key), start + j)) for j, key in enumerate(keys)]

    def held_out(self, key: str) -> list[StimulusSequence]:
        return [self.sequence(key, i) for i in range(self.holdout)]


def phase_at(phases: Sequence[CurriculumPhase], step: int) -> tuple[int, CurriculumPhase]:
    boundary = 0
    for number, phase in enumerate(phases, start=1):
        boundary += phase.steps
        if step < boundary:
            return number, phase
    raise ConfigError(f"step {step} lies past the end of the curriculum")


class LossTrend:
    """Warns when the moving average of the loss rises between consecutive windows."""

    def __init__(self, window: int = TREND_WINDOW) -> None:
        self.window = window
        self.values: deque[float] = deque(maxlen=2 * window)
        self.rises = 0

    def update(self, loss: float, step: int) -> None:
        self.values.append(loss)
        if len(self.values) < 2 * self.window or (step + 1) % self.window:
            return
        history = list(self.values)
        previous = float(np.mean(history[: self.window]))
        current = float(np.mean(history[self.window :]))
        if current > previous:
            self.rises += 1
            logger.warning("Loss moving average rose from %.5f to %.5f at step %d", previous, current, step)


def held_out_epe(model: DualflowModel, sequences: Sequence[StimulusSequence], iterations: int) -> float:
    with no_grad():
        errors = [epe(model.forward(seq, iterations).final_flow, seq.label_flow()) for seq in sequences]
    return float(np.mean(errors))


def train_step(
    model: DualflowModel,
    batch: Sequence[tuple[str, StimulusSequence]],
    weights: np.ndarray,
    iterations: int,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over the batch and its gradient for every model parameter."""
    params = model.parameters()
    total: Tensor | None = None
    for _, seq in batch:
        out = model.forward(seq, iterations)
        loss = sequence_loss(out.flows, seq.label_flow(), weights)
        total = loss if total is None else total + loss
    mean = total * (1.0 / len(batch))
    grads = backward(mean, params)
    return float(mean.data), {name: grads[name] for name in params}


@dataclass
class TrainResult:
    model: DualflowModel
    losses: list[float]
    log: pd.DataFrame
    checkpoint: Path | None = None
    metrics_path: Path | None = None
    final_epe: float | None = None
    trend_rises: int = 0


def _evaluate(
    model: DualflowModel,
    holdouts: dict[str, list[StimulusSequence]],
    keys: Sequence[str],
    iterations: int,
) -> dict[str, float]:
    return {key: held_out_epe(model, holdouts[key], iterations) for key in keys}


def train(
    config: DualflowConfig,
    output_dir: str | Path | None = None,
    progress: ProgressFn | None = None,
    save: bool = True,
) -> TrainResult:
    """Train a model through the curriculum in ``config.train``.

    Adam updates are followed by parameter projection after every step.
    Held-out endpoint error is logged every ``eval_every`` steps and at the
    end of each phase, per dataset of the current phase.
    """
    tc = config.train
    with default_dtype(np.dtype(tc.dtype)):
        model = DualflowModel(config.model, tc.channel)
        sampler = DatasetSampler(tc.seed, tc.material, config.stimulus, tc.holdout)
        weights = decode_weights(tc.iterations, tc.loss_gamma, tc.loss_weights)
        optimizer = Adam(model.parameters(), lr=tc.lr)
        holdouts: dict[str, list[StimulusSequence]] = {}
        trend = LossTrend()
        losses: list[float] = []
        rows: list[dict] = []
        total = tc.total_steps
        logger.info("Training %s model for %d steps (%d phases)", tc.channel, total, len(tc.phases))

        for step in range(total):
            number, phase = phase_at(tc.phases, step)
            batch = sampler.batch(phase, step, tc.batch_size)
            loss, grads = train_step(model, batch, weights, tc.iterations)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at batch {step}", batch_id=step)
            try:
                optimizer.step(grads)
            except GradientError as exc:
                raise TrainingDivergedError(f"batch {step}: {exc}", batch_id=step) from exc
            clamp_params(model)
            losses.append(loss)
            trend.update(loss, step)
            if progress is not None:
                progress(step + 1, total, loss)

            phase_end = step + 1 == sum(p.steps for p in tc.phases[:number])
            if (step + 1) % tc.eval_every == 0 or phase_end:
                for key in phase.datasets:
                    holdouts.setdefault(key, sampler.held_out(key))
                scores = _evaluate(model, holdouts, phase.datasets, tc.iterations)
                for key, value in scores.items():
                    rows.append(dict(step=step + 1, phase=number, loss=loss, dataset=key, epe=value))
                summary = ", ".join(f"{k}={v:.3f}" for k, v in scores.items())
                logger.info("step %d/%d loss %.5f held-out EPE %s", step + 1, total, loss, summary)

    log = pd.DataFrame(rows, columns=["step", "phase", "loss", "dataset", "epe"])
    final_epe = float(log[log["step"] == log["step"].max()]["epe"].mean()) if len(log) else None
    result = TrainResult(model=model, losses=losses, log=log, final_epe=final_epe, trend_rises=trend.rises)
    if save:
        out = Path(output_dir or tc.output_dir) / tc.run_name
        result.metrics_path = write_metrics(log, out / "metrics.csv")
        result.checkpoint = out / "model.ckpt"
        model.save(
            result.checkpoint,
            tc.iterations,
            extra={"train_config": tc.model_dump(mode="json"), "final_epe": final_epe},
        )
        with atomic_write(out / "config.ini", "w") as fh:
            fh.write(dump_config(config))
    return result


def write_metrics(log: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    with atomic_write(path, "w") as fh:
        log.to_csv(fh, index=False, float_format="%.9g")
    return path


class AblationEntry(BaseModel):
    channel: ChannelMode
    material: MaterialMode
    modulation: str
    r: float = Field(ge=-1.0, le=1.0, description="Pearson r of predicted region motion vs the carrier")


class AblationReport(BaseModel):
    seed: int
    entries: list[AblationEntry] = Field(default_factory=list)

    def mean_r(self, channel: ChannelMode, material: MaterialMode) -> float:
        values = [e.r for e in self.entries if e.channel == channel and e.material == material]
        return float(np.mean(values)) if values else float("nan")

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.model_dump() for e in self.entries], columns=list(AblationEntry.model_fields))


def ablation_config(base: DualflowConfig, channel: ChannelMode, material: MaterialMode, seed: int) -> DualflowConfig:
    """``base`` retargeted to one ablation cell: a single phase on the proxy dataset."""
    train_cfg = base.train.model_copy(
        update=dict(
            seed=seed,
            channel=channel,
            material=material,
            run_name=f"{base.train.run_name}-{channel}-{material}-s{seed}",
            phases=[CurriculumPhase(datasets=["proxy"], steps=base.train.total_steps)],
        )
    )
    return base.model_copy(update=dict(train=train_cfg))


def benchmark_correlations(
    model: DualflowModel,
    benchmark: dict[str, list[StimulusSequence]],
    iterations: int,
) -> dict[str, float]:
    """Per modulation, Pearson r between mean predicted flow in the region and the carrier velocity."""
    scores: dict[str, float] = {}
    with no_grad():
        for kind, sequences in benchmark.items():
            predicted, truth = [], []
            for seq in sequences:
                t = seq.label_index
                flow = model.forward(seq, iterations).final_flow
                predicted.append(flow.mean_vector(seq.masks[t]))
                truth.append(seq.flow_at(t).mean_vector(seq.masks[t]))
            try:
                scores[kind] = pearson(np.concatenate(predicted), np.concatenate(truth))
            except CorrelationError as exc:
                logger.warning("Correlation for %s is undefined (%s); scoring 0", kind, exc)
                scores[kind] = 0.0
    return scores


def run_ablation_cell(
    base: DualflowConfig,
    channel: ChannelMode,
    material: MaterialMode,
    seed: int,
    output_dir: str | Path | None = None,
) -> dict[str, float]:
    """Train one configuration and score it on the second-order benchmark."""
    cfg = ablation_config(base, channel, material, seed)
    logger.info("Ablation cell %s/%s seed %d", channel, material, seed)
    result = train(cfg, output_dir, save=output_dir is not None)
    benchmark = modulation_benchmark(cfg.stimulus.benchmark_scenes, seed + 1, cfg.stimulus, cfg.carrier)
    with default_dtype(np.dtype(cfg.train.dtype)):
        return benchmark_correlations(result.model, benchmark, cfg.train.iterations)


def report_from_cells(seed: int, cells: dict[tuple[str, str], dict[str, float]]) -> AblationReport:
    entries = [
        AblationEntry(channel=channel, material=material, modulation=kind, r=scores[kind])
        for (channel, material), scores in cells.items()
        for kind in MODULATIONS
    ]
    return AblationReport(seed=seed, entries=entries)


def ablation_suite(
    seed: int,
    config: DualflowConfig | None = None,
    output_dir: str | Path | None = None,
) -> AblationReport:
    """{first_order, dual} x {diffuse, nondiffuse}, each scored on all seven modulations."""
    base = config or DualflowConfig()
    cells = {
        (channel, material): run_ablation_cell(base, channel, material, seed, output_dir)
        for channel, material in ABLATION_CONFIGS
    }
    return report_from_cells(seed, cells)


class AblationSummary(BaseModel):
    """Mean benchmark correlation of each configuration across seeds."""

    seeds: list[int]
    means: dict[str, float]
    sds: dict[str, float]

    @staticmethod
    def key(channel: ChannelMode, material: MaterialMode) -> str:
        return f"{channel}+{material}"

    def margin(self, better: tuple[ChannelMode, MaterialMode], worse: tuple[ChannelMode, MaterialMode]) -> float:
        """Difference of means minus the larger across-seed sd of the two."""
        a, b = self.key(*better), self.key(*worse)
        return self.means[a] - self.means[b] - max(self.sds[a], self.sds[b])


def summarize_reports(reports: Sequence[AblationReport]) -> AblationSummary:
    means, sds = {}, {}
    for channel, material in ABLATION_CONFIGS:
        values = np.array([r.mean_r(channel, material) for r in reports])
        key = AblationSummary.key(channel, material)
        means[key] = float(values.mean())
        sds[key] = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return AblationSummary(seeds=[r.seed for r in reports], means=means, sds=sds)


def multi_seed_ablation(
    seeds: Sequence[int],
    config: DualflowConfig | None = None,
    output_dir: str | Path | None = None,
) -> tuple[list[AblationReport], AblationSummary]:
    reports = [ablation_suite(seed, config, output_dir) for seed in seeds]
    return reports, summarize_reports(reports)

