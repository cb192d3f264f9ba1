"""In-silico physiology of model units.

Units are probed like cells in a recording rig: drifting gratings and plaids
are shown in 12 directions, and the spatial mean of a unit's activation map is
read out as its firing rate. Stage selectors:

* ``stage1``       normalized Stage I energies (the map Stage II receives)
* ``stage1_raw``   a first-order unit's own energy before normalization
* ``stage2.iter<i>`` the hidden state after the i-th Stage II iteration
"""

from __future__ import annotations

import logging
import math
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from dualflow.atomic import atomic_write
from dualflow.config import AnalysisConfig
from dualflow.errors import ConfigError, CorrelationError, DegenerateTuningError, ShapeError
from dualflow.metrics import partial_from_correlations, pearson
from dualflow.model import DualflowModel
from dualflow.stage1 import evaluation_frame, unit_energy_maps
from dualflow.stimuli import PLAID_HALF_ANGLE, StimulusSequence, drifting_gabor, plaid
from dualflow.tensor_core import Tensor, no_grad

logger = logging.getLogger(__name__)

STAGE1 = "stage1"
STAGE1_RAW = "stage1_raw"
_STAGE2 = re.compile(r"^stage2\.iter(\d+)$")
FLAT_STD = 1e-12

StimulusKind = Literal["gabor", "plaid"]
CellLabel = Literal["pattern", "component", "unclassified"]


def parse_stage(stage: str) -> tuple[str, int]:
    """``("stage1", 0)``, ``("stage1_raw", 0)`` or ``("stage2", i)``."""
    if stage in (STAGE1, STAGE1_RAW):
        return stage, 0
    match = _STAGE2.match(stage)
    if match is None or int(match.group(1)) < 1:
        raise ConfigError(f"unknown stage {stage!r}; use stage1, stage1_raw or stage2.iter<i>")
    return "stage2", int(match.group(1))


def tuning_angles(n: int = 12) -> np.ndarray:
    """``n`` directions evenly spaced over (0, 2pi]."""
    return 2.0 * math.pi * np.arange(1, n + 1) / n


def frequency_grid(config: AnalysisConfig | None = None) -> np.ndarray:
    cfg = config or AnalysisConfig()
    return np.geomspace(cfg.freq_min, cfg.freq_max, cfg.grid_size)


@dataclass
class TuningCurve:
    """Responses of one unit to a stimulus drifting in each of ``angles``."""

    angles: np.ndarray
    responses: np.ndarray
    stimulus: StimulusKind = "gabor"
    f_s: float | None = None
    f_t: float | None = None
    unit: int | None = None

    def __post_init__(self) -> None:
        self.angles = np.asarray(self.angles, dtype=float)
        self.responses = np.asarray(self.responses, dtype=float)
        if self.angles.ndim != 1 or self.angles.shape != self.responses.shape:
            raise ShapeError(f"angles {self.angles.shape} and responses {self.responses.shape} must be matching vectors")

    def __len__(self) -> int:
        return self.angles.size

    @property
    def preferred_direction(self) -> float:
        return float(self.angles[int(np.argmax(self.responses))])


def unit_responses(
    model: DualflowModel,
    seq: StimulusSequence,
    stage: str = STAGE1,
    units: Sequence[int] | None = None,
) -> np.ndarray:
    """Spatial mean of each unit's activation map, treated as a firing rate.

    Stage II hidden states are rectified before averaging. ``units`` selects
    and orders the returned entries.
    """
    name, iteration = parse_stage(stage)
    chosen = None if units is None else np.asarray(units, dtype=np.int64)
    n_units = model.first_order.n_units
    if chosen is not None and (chosen.min(initial=0) < 0 or chosen.max(initial=0) >= n_units):
        raise ShapeError(f"unit indices must lie in [0, {n_units})")

    with no_grad():
        if name == STAGE1_RAW:
            mid = evaluation_frame(seq.n_frames)
            maps = unit_energy_maps(model.first_order, Tensor(seq.luma()), mid, chosen)
            order = np.arange(n_units) if chosen is None else chosen
            return np.array([maps[int(u)].mean() for u in order])
        if name == STAGE1:
            rates = model.energies(seq)[2].values.data.mean(axis=(1, 2))
        else:
            out = model.forward(seq, iterations=iteration)
            hidden = out.stage2_energies[iteration - 1].values.data
            rates = np.maximum(hidden, 0.0).mean(axis=(1, 2))
    return rates if chosen is None else rates[chosen]


def _probe(kind: StimulusKind, f_s: float, f_t: float, direction: float, cfg: AnalysisConfig) -> StimulusSequence:
    speed = f_t / f_s
    if kind == "plaid":
        return plaid(f_s, direction, speed, size=cfg.stimulus_size)
    return drifting_gabor(f_s, direction, speed, size=cfg.stimulus_size)


def _curve_responses(
    model: DualflowModel,
    f_s: float,
    f_t: float,
    stage: str,
    cfg: AnalysisConfig,
    units: Sequence[int] | None,
    stimulus: StimulusKind,
) -> np.ndarray:
    """Responses [U, D] over the tuning directions."""
    angles = tuning_angles(cfg.directions)
    return np.stack(
        [unit_responses(model, _probe(stimulus, f_s, f_t, angle, cfg), stage, units) for angle in angles], axis=1
    )


def tuning_curve(
    model: DualflowModel,
    unit: int,
    f_s: float,
    f_t: float,
    stimulus: StimulusKind = "gabor",
    stage: str = STAGE1,
    config: AnalysisConfig | None = None,
) -> TuningCurve:
    cfg = config or AnalysisConfig()
    responses = _curve_responses(model, f_s, f_t, stage, cfg, [unit], stimulus)[0]
    return TuningCurve(tuning_angles(cfg.directions), responses, stimulus, f_s, f_t, unit)


def frequency_sweep(
    model: DualflowModel,
    stage: str = STAGE1,
    config: AnalysisConfig | None = None,
    units: Sequence[int] | None = None,
) -> np.ndarray:
    """Grating tuning responses [U, n_ft, n_fs, D] over the log frequency grid."""
    cfg = config or AnalysisConfig()
    grid = frequency_grid(cfg)
    logger.info("Sweeping %d frequency pairs x %d directions at %s", grid.size**2, cfg.directions, stage)
    return np.stack(
        [
            np.stack([_curve_responses(model, f_s, f_t, stage, cfg, units, "gabor") for f_s in grid], axis=1)
            for f_t in grid
        ],
        axis=1,
    )


def preferred_index(curves: np.ndarray, unit: int | None = None) -> tuple[int, int]:
    """``(i_ft, i_fs)`` of the curve with the largest standard deviation.

    ``curves`` is [n_ft, n_fs, D]. Ties go to the lower f_t, then the lower f_s.
    """
    stds = np.asarray(curves, dtype=float).std(axis=-1)
    if np.all(stds <= FLAT_STD):
        logger.warning("Unit %s has flat tuning at every frequency", "?" if unit is None else unit)
    i_ft, i_fs = np.unravel_index(int(np.argmax(stds)), stds.shape)
    return int(i_ft), int(i_fs)


def preferred_frequency(
    model: DualflowModel,
    unit: int,
    stage: str = STAGE1,
    config: AnalysisConfig | None = None,
    sweep: np.ndarray | None = None,
) -> tuple[float, float]:
    """``(f_s*, f_t*)`` maximizing the spread of the unit's direction tuning."""
    cfg = config or AnalysisConfig()
    if not 0 <= unit < model.first_order.n_units:
        raise ShapeError(f"unit {unit} out of range")
    curves = frequency_sweep(model, stage, cfg, [unit])[0] if sweep is None else sweep[unit]
    i_ft, i_fs = preferred_index(curves, unit)
    grid = frequency_grid(cfg)
    return float(grid[i_fs]), float(grid[i_ft])


def component_prediction(curve: TuningCurve) -> np.ndarray:
    """Mean of the grating curve shifted by +30 and -30 degrees (circular interpolation)."""
    angles, responses = curve.angles, curve.responses
    order = np.argsort(angles)
    xp, fp = angles[order], responses[order]
    shifted = [np.interp(angles - s, xp, fp, period=2.0 * math.pi) for s in (PLAID_HALF_ANGLE, -PLAID_HALF_ANGLE)]
    return (shifted[0] + shifted[1]) / 2.0


class PatternComponentResult(BaseModel):
    r_p: float = Field(description="corr(plaid response, pattern prediction)")
    r_c: float = Field(description="corr(plaid response, component prediction)")
    r_cp: float = Field(description="corr(pattern prediction, component prediction)")
    r_pattern: float
    r_component: float
    saturated: bool = Field(default=False, description="A partial hit |r| = 1 in its control and was set to 0")


def partial_pair(r_p: float, r_c: float, r_cp: float) -> tuple[float, float, bool]:
    """``(R_pattern, R_component, saturated)``; a saturated partial is reported as 0."""
    saturated = False
    values = []
    for target, control in ((r_p, r_c), (r_c, r_p)):
        try:
            values.append(partial_from_correlations(target, control, r_cp))
        except CorrelationError:
            saturated = True
            values.append(0.0)
    return values[0], values[1], saturated


def pattern_component_correlation(grating: TuningCurve, plaid_curve: TuningCurve) -> PatternComponentResult:
    """Partial correlations of a plaid tuning curve with the pattern and component predictions.

    The pattern prediction is the grating curve itself.
    """
    if len(grating) != len(plaid_curve) or not np.allclose(grating.angles, plaid_curve.angles):
        raise ShapeError("grating and plaid curves must be sampled at the same directions")
    component = component_prediction(grating)
    r_p = pearson(plaid_curve.responses, grating.responses)
    r_c = pearson(plaid_curve.responses, component)
    r_cp = pearson(grating.responses, component)
    r_pattern, r_component, saturated = partial_pair(r_p, r_c, r_cp)
    if saturated:
        logger.warning("Saturated pattern/component correlation (r_p=%.3f r_c=%.3f r_cp=%.3f)", r_p, r_c, r_cp)
    return PatternComponentResult(
        r_p=r_p, r_c=r_c, r_cp=r_cp, r_pattern=r_pattern, r_component=r_component, saturated=saturated
    )


class CellClassification(BaseModel):
    r_pattern: float
    r_component: float
    z_pattern: float
    z_component: float
    label: CellLabel


def fisher_z(r: float, n: int) -> float:
    r = float(np.clip(r, -1.0 + 1e-12, 1.0 - 1e-12))
    return math.atanh(r) * math.sqrt(n - 3)


def classify_cell(r_pattern: float, r_component: float, n: int = 12, margin: float = 1.28) -> CellClassification:
    """Pattern if Z_p - max(Z_c, 0) > margin, component if the mirror holds, else unclassified."""
    if not (math.isfinite(r_pattern) and math.isfinite(r_component)):
        raise CorrelationError("partial correlations must be finite")
    if n <= 3:
        raise ShapeError(f"Fisher z needs more than 3 samples, got {n}")
    z_p, z_c = fisher_z(r_pattern, n), fisher_z(r_component, n)
    label: CellLabel = "unclassified"
    if z_p - max(z_c, 0.0) > margin:
        label = "pattern"
    elif z_c - max(z_p, 0.0) > margin:
        label = "component"
    return CellClassification(
        r_pattern=r_pattern, r_component=r_component, z_pattern=z_p, z_component=z_c, label=label
    )


def circular_variance_selectivity(
    curve: TuningCurve,
    period: Literal["orientation", "direction"] = "orientation",
) -> float:
    """``|sum A e^{i m theta}| / sum A`` with m = 2 for orientation, 1 for direction.

    0 is untuned, 1 responds to a single direction.
    """
    a = curve.responses
    if np.any(a < 0):
        raise DegenerateTuningError("tuning responses must be nonnegative")
    total = float(a.sum())
    if total <= 0.0:
        raise DegenerateTuningError("tuning curve is zero everywhere")
    m = 2.0 if period == "orientation" else 1.0
    return float(abs(np.sum(a * np.exp(1j * m * curve.angles))) / total)


class UnitAnalysis(BaseModel):
    """One row of the population table."""

    unit: int
    stage: str
    f_s: float
    f_t: float
    r_pattern: float
    r_component: float
    label: CellLabel
    o_ori: float | None = None
    saturated: bool = False


def analyze_population(
    model: DualflowModel,
    stage: str = STAGE1,
    config: AnalysisConfig | None = None,
    units: Sequence[int] | None = None,
) -> list[UnitAnalysis]:
    """Preferred frequency, pattern/component class and selectivity for each unit."""
    cfg = config or AnalysisConfig()
    chosen = list(range(model.first_order.n_units)) if units is None else [int(u) for u in units]
    grid = frequency_grid(cfg)
    angles = tuning_angles(cfg.directions)
    sweep = frequency_sweep(model, stage, cfg, chosen)
    plaid_cache: dict[tuple[int, int], np.ndarray] = {}
    records = []
    for row, unit in enumerate(chosen):
        i_ft, i_fs = preferred_index(sweep[row], unit)
        if (i_ft, i_fs) not in plaid_cache:
            plaid_cache[i_ft, i_fs] = _curve_responses(model, grid[i_fs], grid[i_ft], stage, cfg, chosen, "plaid")
        grating = TuningCurve(angles, sweep[row, i_ft, i_fs], "gabor", grid[i_fs], grid[i_ft], unit)
        plaid_curve = TuningCurve(angles, plaid_cache[i_ft, i_fs][row], "plaid", grid[i_fs], grid[i_ft], unit)
        try:
            pc = pattern_component_correlation(grating, plaid_curve)
            cls = classify_cell(pc.r_pattern, pc.r_component, cfg.directions, cfg.classification_margin)
            r_pattern, r_component, label, saturated = pc.r_pattern, pc.r_component, cls.label, pc.saturated
        except CorrelationError as exc:
            logger.warning("Unit %d left unclassified: %s", unit, exc)
            r_pattern, r_component, label, saturated = 0.0, 0.0, "unclassified", True
        try:
            o_ori = circular_variance_selectivity(grating, cfg.period)
        except DegenerateTuningError:
            o_ori = None
        records.append(
            UnitAnalysis(
                unit=unit,
                stage=stage,
                f_s=float(grid[i_fs]),
                f_t=float(grid[i_ft]),
                r_pattern=r_pattern,
                r_component=r_component,
                label=label,
                o_ori=o_ori,
                saturated=saturated,
            )
        )
    return records


def pattern_fraction(records: Iterable[UnitAnalysis]) -> float:
    records = list(records)
    if not records:
        return 0.0
    return sum(r.label == "pattern" for r in records) / len(records)


def population_frame(records: Iterable[UnitAnalysis]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in records], columns=list(UnitAnalysis.model_fields))


def write_population_csv(records: Iterable[UnitAnalysis], path: str | Path) -> Path:
    path = Path(path)
    with atomic_write(path, "w") as fh:
        population_frame(records).to_csv(fh, index=False)
    logger.info("Wrote population table %s", path)
    return path
