"""SGD with momentum."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np

from ..errors import ContractError
from .layers import LayerParams
from .tensor import Tensor


def _flatten(params: Iterable[Union[LayerParams, Tensor]]) -> list[Tensor]:
    out: list[Tensor] = []
    for p in params:
        out.extend(p.parameters() if isinstance(p, LayerParams) else [p])
    return out


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    @classmethod
    def for_params(cls, params, learning_rate: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        tensors = _flatten(params)
        return cls(learning_rate, momentum, weight_decay, [np.zeros_like(t.data) for t in tensors])


def sgd_step(params, state: OptimizerState) -> None:
    """``v <- momentum * v - lr * g``; ``w <- w + v``; then clear gradients."""
    tensors = _flatten(params)
    if not state.velocity:
        state.velocity = [np.zeros_like(t.data) for t in tensors]
    if len(state.velocity) != len(tensors):
        raise ContractError(f"optimizer tracks {len(state.velocity)} tensors, got {len(tensors)}")
    for i, t in enumerate(tensors):
        if t.grad is None:
            raise ContractError(f"parameter {i} ({t.name or t.shape}) has no gradient")
    for t, v in zip(tensors, state.velocity):
        g = t.grad
        if state.weight_decay:
            g = g + state.weight_decay * t.data
        v *= state.momentum
        v -= state.learning_rate * g
        t.data = t.data + v
        t.grad = None
