"""Adaptive-moment optimizer."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from dualflow.errors import GradientError
from dualflow.tensor_core import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    state: AdamState | None = None,
) -> AdamState:
    """Apply one bias-corrected Adam update to ``params`` and return the new state.

    A non-finite gradient rejects the whole step; nothing is modified.
    """
    if lr < 0:
        raise GradientError(f"learning rate must be >= 0, got {lr}")
    state = state or AdamState()
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            logger.warning("Rejected optimizer step: non-finite gradient for %s", name)
            raise GradientError(f"non-finite gradient for parameter '{name}'")

    step = state.step + 1
    m_new: dict[str, np.ndarray] = {}
    v_new: dict[str, np.ndarray] = {}
    for name, param in params.items():
        g = np.asarray(grads[name], dtype=param.dtype)
        m = beta1 * state.m.get(name, np.zeros_like(param.data)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(param.data)) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        if lr > 0:
            param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)
        m_new[name], v_new[name] = m, v
    return AdamState(step=step, m=m_new, v=v_new)


class Adam:
    """Stateful wrapper around :func:`adam_step` for a fixed parameter set."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 2e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.state = adam_step(
            self.params, grads, self.lr, self.betas[0], self.betas[1], self.eps, self.state
        )


def project(param: Tensor, low: float | None = None, high: float | None = None) -> None:
    """Clip ``param`` in place into ``[low, high]``."""
    param.data = np.asarray(np.clip(param.data, low, high), dtype=param.dtype)
