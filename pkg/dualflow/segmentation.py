"""Training-free object segmentation by spectral bipartition of the motion graph."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, ndimage
from scipy.sparse.linalg import eigsh

from dualflow.errors import (
    DegenerateMaskError,
    DegenerateSpectrumError,
    GraphSizeError,
    LaplacianError,
    ShapeError,
)
from dualflow.stage2 import MAX_NODES
from dualflow.tensor_core import Tensor

logger = logging.getLogger(__name__)

DENSE_LIMIT = 512
EIGENGAP_MIN = 1e-10
MAJORITY = 6


@dataclass
class GraphLaplacian:
    matrix: np.ndarray
    degrees: np.ndarray
    normalized: bool = True

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    def null_direction(self) -> np.ndarray:
        """Unit vector spanning the known zero eigenspace of a connected graph."""
        v = np.sqrt(self.degrees) if self.normalized else np.ones(self.n_nodes)
        return v / np.linalg.norm(v)


@dataclass
class FiedlerResult:
    vector: np.ndarray
    eigenvalue: float
    eigengap: float
    residual: float


@dataclass
class SegmentationMask:
    """Binary node-grid mask; ``polarity`` says which side is foreground."""

    labels: np.ndarray
    polarity: bool = True
    degenerate: bool = False
    regions: np.ndarray | None = field(default=None, repr=False)

    @property
    def foreground(self) -> np.ndarray:
        return self.labels if self.polarity else ~self.labels

    def flipped(self) -> SegmentationMask:
        return replace(self, polarity=not self.polarity)

    def upsampled(self, shape: tuple[int, int]) -> np.ndarray:
        """Nearest-neighbour upsampling of the foreground to ``shape``."""
        fg = self.foreground
        if fg.ndim != 2:
            raise ShapeError("only grid-shaped masks can be upsampled")
        rows = np.minimum((np.arange(shape[0]) * fg.shape[0]) // shape[0], fg.shape[0] - 1)
        cols = np.minimum((np.arange(shape[1]) * fg.shape[1]) // shape[1], fg.shape[1] - 1)
        return fg[np.ix_(rows, cols)]

    def to_uint8(self, shape: tuple[int, int] | None = None) -> np.ndarray:
        fg = self.upsampled(shape) if shape is not None else self.foreground
        return np.where(fg, 255, 0).astype(np.uint8)


def _as_array(a: np.ndarray | Tensor) -> np.ndarray:
    return np.asarray(a.data if isinstance(a, Tensor) else a, dtype=float)


def laplacian(adjacency: np.ndarray | Tensor, normalized: bool = True) -> GraphLaplacian:
    """``I - D^-1/2 A D^-1/2`` (or ``D - A`` when ``normalized`` is false)."""
    a = _as_array(adjacency)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"adjacency must be square, got {a.shape}")
    if a.shape[0] > MAX_NODES:
        raise GraphSizeError(f"graph has {a.shape[0]} nodes, the limit is {MAX_NODES}")
    if np.any(a < 0):
        raise LaplacianError("adjacency has negative weights")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-9):
        raise LaplacianError("adjacency is not symmetric")
    degrees = a.sum(axis=1)
    empty = np.flatnonzero(degrees <= 0)
    if empty.size:
        raise LaplacianError(f"node {empty[0]} has zero degree", node=int(empty[0]))
    if normalized:
        inv = 1.0 / np.sqrt(degrees)
        matrix = np.eye(a.shape[0]) - inv[:, None] * a * inv[None, :]
        matrix = 0.5 * (matrix + matrix.T)
    else:
        matrix = np.diag(degrees) - a
    return GraphLaplacian(matrix=matrix, degrees=degrees, normalized=normalized)


def fiedler_vector(lap: GraphLaplacian, dense_limit: int = DENSE_LIMIT) -> FiedlerResult:
    """Eigenvector of the second-smallest eigenvalue of ``lap``.

    The known null direction is shifted to the top of the spectrum, so the
    second-smallest pair becomes the smallest of the deflated matrix. The sign
    is fixed so the largest-magnitude entry is positive.
    """
    n = lap.n_nodes
    if n < 2:
        raise ShapeError("a graph needs at least 2 nodes to be cut")
    v0 = lap.null_direction()
    bound = 2.0 if lap.normalized else 2.0 * float(lap.degrees.max())
    deflated = lap.matrix + (bound + 1.0) * np.outer(v0, v0)
    k = min(2, n - 1)

    if n <= dense_limit:
        values, vectors = linalg.eigh(deflated, subset_by_index=[0, k - 1])
    else:
        start = np.cos(np.arange(n) * 0.7) + 1.5
        values, vectors = eigsh(deflated, k=k, which="SA", v0=start, tol=1e-12)
        order = np.argsort(values)
        values, vectors = values[order], vectors[:, order]

    u = vectors[:, 0]
    u = u / np.linalg.norm(u)
    lam = float(values[0])
    gap = float(values[1] - values[0]) if k > 1 else float("inf")
    if gap < EIGENGAP_MIN:
        raise DegenerateSpectrumError(
            f"second and third eigenvalues coincide (gap {gap:.3g}); the cut is not unique"
        )
    pivot = int(np.argmax(np.abs(u)))
    if u[pivot] < 0:
        u = -u
    residual = float(np.linalg.norm(lap.matrix @ u - lam * u))
    if residual >= 1e-6:
        logger.warning("Fiedler residual %.3g exceeds 1e-6", residual)
    return FiedlerResult(vector=u, eigenvalue=lam, eigengap=gap, residual=residual)


def bipartition(u2: np.ndarray, grid: tuple[int, int] | None = None) -> SegmentationMask:
    u2 = np.asarray(u2, dtype=float)
    if not np.all(np.isfinite(u2)):
        raise DegenerateMaskError("Fiedler vector has non-finite entries")
    if np.ptp(u2) == 0:
        raise DegenerateMaskError("Fiedler vector is constant; nothing to cut")
    labels = u2 > u2.mean()
    if grid is not None:
        labels = labels.reshape(grid)
    return SegmentationMask(labels=labels)


def majority_filter(mask: np.ndarray) -> np.ndarray:
    """Flip pixels outvoted by at least 6 of their 8 neighbours (edges replicate)."""
    mask = np.asarray(mask, dtype=bool)
    ring = np.ones((3, 3), dtype=int)
    ring[1, 1] = 0
    agreeing_on = ndimage.convolve(mask.astype(int), ring, mode="nearest")
    flip = np.where(mask, 8 - agreeing_on >= MAJORITY, agreeing_on >= MAJORITY)
    return mask ^ flip


def _recut(adjacency: np.ndarray, mask: SegmentationMask) -> np.ndarray:
    flat = mask.labels.reshape(-1)
    side = flat if flat.sum() >= (~flat).sum() else ~flat
    members = np.flatnonzero(side)
    regions = flat.astype(np.int64)
    if members.size < 3:
        return regions
    try:
        sub = fiedler_vector(laplacian(adjacency[np.ix_(members, members)]))
        split = bipartition(sub.vector)
    except (DegenerateSpectrumError, DegenerateMaskError, LaplacianError) as exc:
        logger.info("Second cut skipped: %s", exc)
        return regions
    regions[members[split.labels]] = 2
    return regions


def segment(
    adjacency: np.ndarray | Tensor,
    grid: tuple[int, int] | None = None,
    refine: bool = False,
    recursive: bool = False,
) -> SegmentationMask:
    """Normalized-cut bipartition of a motion graph into a node-grid mask.

    ``refine`` applies the 3x3 majority filter; ``recursive`` re-cuts the
    larger side once and stores a 3-label map in ``regions``.
    """
    a = _as_array(adjacency)
    n = a.shape[0]
    grid = grid or (n, 1)
    if grid[0] * grid[1] != n:
        raise ShapeError(f"grid {grid} does not hold {n} nodes")
    result = fiedler_vector(laplacian(a))
    mask = bipartition(result.vector, grid)
    if refine:
        mask = replace(mask, labels=majority_filter(mask.labels))
    if not mask.labels.any() or mask.labels.all():
        logger.warning("Segmentation collapsed to a single region")
        mask = replace(mask, degenerate=True)
    if recursive:
        regions = _recut(a, mask)
        mask = replace(mask, regions=regions.reshape(grid))
    return mask
