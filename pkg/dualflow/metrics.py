"""Flow and segmentation metrics."""

from __future__ import annotations

import logging
import math

import numpy as np
from pydantic import BaseModel, Field

from dualflow.errors import CorrelationError, ShapeError
from dualflow.flow import FlowField

logger = logging.getLogger(__name__)

SPEED_EPS = 1e-6


def _uv(flow: FlowField | np.ndarray) -> np.ndarray:
    data = flow.data.data if isinstance(flow, FlowField) else np.asarray(flow, dtype=float)
    if data.ndim != 3 or data.shape[0] != 2:
        raise ShapeError(f"expected a flow field [2,H,W], got {data.shape}")
    return data


def epe(pred: FlowField | np.ndarray, ref: FlowField | np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean endpoint error between two flow fields."""
    a, b = _uv(pred), _uv(ref)
    if a.shape != b.shape:
        raise ShapeError(f"flow shapes differ: {a.shape} vs {b.shape}")
    err = np.hypot(a[0] - b[0], a[1] - b[1])
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    return float(err.mean())


def decompose(flow: FlowField | np.ndarray, speed_eps: float = SPEED_EPS) -> tuple[np.ma.MaskedArray, np.ndarray]:
    """Direction (masked where speed < ``speed_eps``) and speed maps."""
    uv = _uv(flow)
    speed = np.hypot(uv[0], uv[1])
    direction = np.ma.masked_array(np.arctan2(uv[1], uv[0]), mask=speed < speed_eps)
    return direction, speed


def pearson(x: np.ndarray, y: np.ndarray, mask: np.ndarray | None = None) -> float:
    x, y = np.asarray(x, dtype=float).ravel(), np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"pearson: sizes differ ({x.size} vs {y.size})")
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).ravel()
        x, y = x[keep], y[keep]
    if x.size < 2:
        raise CorrelationError("pearson needs at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise CorrelationError("correlation is undefined for a constant series")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def wrap_angle_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a - b`` wrapped into [-pi, pi)."""
    return np.mod(np.asarray(a) - np.asarray(b) + math.pi, 2.0 * math.pi) - math.pi


def direction_pearson(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Pearson r of angles after unwrapping ``a`` to the branch nearest ``b``."""
    b = np.asarray(b, dtype=float)
    unwrapped = b + wrap_angle_difference(a, b)
    return pearson(unwrapped, b, mask)


def partial_correlation(
    resp: np.ndarray,
    model: np.ndarray,
    gt: np.ndarray,
    mask: np.ndarray | None = None,
) -> float:
    """Correlation of ``resp`` and ``model`` with ``gt`` controlled for."""
    return partial_from_correlations(pearson(resp, model, mask), pearson(resp, gt, mask), pearson(model, gt, mask))


def partial_from_correlations(r_xy: float, r_xz: float, r_yz: float) -> float:
    """``(r_xy - r_xz r_yz) / sqrt((1 - r_xz^2)(1 - r_yz^2))``."""
    denom = (1.0 - r_xz**2) * (1.0 - r_yz**2)
    if denom <= 1e-15:
        raise CorrelationError("a control correlation is saturated (|r| = 1)")
    return float(np.clip((r_xy - r_xz * r_yz) / math.sqrt(denom), -1.0, 1.0))


class IoUResult(BaseModel):
    value: float = Field(ge=0.0, le=1.0)
    empty_union: bool = False
    flipped: bool = Field(default=False, description="True when the complement scored higher")


def iou_details(mask: np.ndarray, gt_mask: np.ndarray) -> IoUResult:
    a, b = np.asarray(mask, dtype=bool), np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return IoUResult(value=0.0, empty_union=True)
    return IoUResult(value=np.count_nonzero(a & b) / union)


def iou(mask: np.ndarray, gt_mask: np.ndarray) -> float:
    return iou_details(mask, gt_mask).value


def adaptive_iou(mask: np.ndarray, gt_mask: np.ndarray) -> IoUResult:
    """Best IoU over the mask and its complement."""
    direct = iou_details(mask, gt_mask)
    flipped = iou_details(~np.asarray(mask, dtype=bool), gt_mask)
    if flipped.value > direct.value:
        return flipped.model_copy(update={"flipped": True})
    return direct


class FlowComparison(BaseModel):
    """Agreement between a model flow and a reference (e.g. human) flow.

    ``r_*`` are Pearson correlations; ``rho_*`` partial correlations with the
    ground truth controlled for. ``None`` marks an undefined value.
    """

    epe: float = Field(ge=0.0)
    r_uv: float | None = None
    r_dir: float | None = None
    r_spd: float | None = None
    rho_uv: float | None = None
    rho_dir: float | None = None
    rho_spd: float | None = None

    def row(self) -> dict[str, float | None]:
        return self.model_dump()


def _safe(fn, *args) -> float | None:
    try:
        return fn(*args)
    except CorrelationError as exc:
        logger.warning("Correlation undefined: %s", exc)
        return None


def compare_flows(
    model: FlowField | np.ndarray,
    resp: FlowField | np.ndarray,
    gt: FlowField | np.ndarray,
    speed_eps: float = SPEED_EPS,
) -> FlowComparison:
    """Table-style comparison of ``model`` against ``resp`` with ``gt`` as the control."""
    m, r, g = _uv(model), _uv(resp), _uv(gt)
    if not (m.shape == r.shape == g.shape):
        raise ShapeError("model, response and ground-truth flows must share a shape")
    m_dir, m_spd = decompose(m, speed_eps)
    r_dir, r_spd = decompose(r, speed_eps)
    g_dir, g_spd = decompose(g, speed_eps)
    valid = ~(np.ma.getmaskarray(m_dir) | np.ma.getmaskarray(r_dir) | np.ma.getmaskarray(g_dir))
    m_ang = np.asarray(m_dir.data)
    r_ang = np.asarray(r_dir.data)
    g_ang = np.asarray(g_dir.data)
    # unwrap both onto the ground-truth branch so all three share one frame
    m_un = g_ang + wrap_angle_difference(m_ang, g_ang)
    r_un = g_ang + wrap_angle_difference(r_ang, g_ang)

    return FlowComparison(
        epe=epe(m, r),
        r_uv=_safe(pearson, m.ravel(), r.ravel()),
        r_dir=_safe(pearson, m_un, r_un, valid),
        r_spd=_safe(pearson, m_spd, r_spd),
        rho_uv=_safe(partial_correlation, r.ravel(), m.ravel(), g.ravel()),
        rho_dir=_safe(partial_correlation, r_un, m_un, g_ang, valid),
        rho_spd=_safe(partial_correlation, r_spd, m_spd, g_spd),
    )
