from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dualflow.errors import ShapeError
from dualflow.tensor_core import Tensor


@dataclass
class FlowField:
    """Per-pixel displacement (u, v) in pixels/frame, stored channel-first as [2,H,W].

    ``u`` points along +x (columns), ``v`` along +y (rows, downward).
    """

    data: Tensor

    def __post_init__(self) -> None:
        if not isinstance(self.data, Tensor):
            self.data = Tensor(self.data)
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise ShapeError(f"flow field must be [2,H,W], got {self.data.shape}")

    @classmethod
    def from_uv(cls, u: np.ndarray, v: np.ndarray) -> FlowField:
        u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
        if u.shape != v.shape or u.ndim != 2:
            raise ShapeError(f"u and v must be matching 2D arrays, got {u.shape} and {v.shape}")
        return cls(Tensor(np.stack([u, v])))

    @classmethod
    def from_hwc(cls, array: np.ndarray) -> FlowField:
        array = np.asarray(array, dtype=float)
        if array.ndim != 3 or array.shape[2] != 2:
            raise ShapeError(f"expected [H,W,2], got {array.shape}")
        return cls(Tensor(np.ascontiguousarray(array.transpose(2, 0, 1))))

    @classmethod
    def uniform(cls, u: float, v: float, shape: tuple[int, int]) -> FlowField:
        return cls.from_uv(np.full(shape, float(u)), np.full(shape, float(v)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def u(self) -> np.ndarray:
        return self.data.data[0]

    @property
    def v(self) -> np.ndarray:
        return self.data.data[1]

    def hwc(self) -> np.ndarray:
        return np.ascontiguousarray(self.data.data.transpose(1, 2, 0))

    def speed(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def direction(self) -> np.ndarray:
        """Angle of each vector in radians, in (-pi, pi]."""
        return np.arctan2(self.v, self.u)

    def mean_vector(self, mask: np.ndarray | None = None) -> np.ndarray:
        if mask is None:
            return np.array([self.u.mean(), self.v.mean()])
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ShapeError("mean_vector: empty mask")
        return np.array([self.u[mask].mean(), self.v[mask].mean()])
