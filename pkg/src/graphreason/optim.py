"""SGD with momentum and L2 weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor, TapeError


@dataclass
class OptimizerState:
    learning_rate: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Mapping[str, Tensor], state: OptimizerState,
             grads: Mapping[str, np.ndarray] | None = None) -> None:
    """One in-place update: ``v = m*v + (g + wd*p); p -= lr*v``.

    Gradients default to each parameter's ``.grad``; a parameter without one
    is a contract error rather than a silent skip.
    """
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            raise TapeError(f"parameter {name!r} has no gradient")
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        v = state.velocity.get(name)
        step = g + state.weight_decay * p.data
        v = step if v is None else state.momentum * v + step
        state.velocity[name] = v
        p.data = p.data - state.learning_rate * v


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
