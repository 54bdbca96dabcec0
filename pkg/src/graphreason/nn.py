"""Parameter storage and the handful of layer helpers the modules share."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .autodiff import Tensor, get_default_dtype, matmul


class Params(OrderedDict):
    """Ordered name -> Tensor map; creation order fixes checkpoint layout."""

    def __init__(self, rng: np.random.Generator | None = None):
        super().__init__()
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def new(self, name: str, data: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)
        self[name] = t
        return t

    def he(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        return self.new(name, self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))

    def glorot(self, name: str, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return self.new(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.new(name, np.zeros(shape))

    def count(self) -> int:
        return sum(p.size for p in self.values())


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


class Linear:
    def __init__(self, params: Params, name: str, n_in: int, n_out: int, init: str = "he"):
        if init == "zeros":
            self.w = params.zeros(f"{name}.w", (n_in, n_out))
        elif init == "glorot":
            self.w = params.glorot(f"{name}.w", (n_in, n_out), n_in, n_out)
        else:
            self.w = params.he(f"{name}.w", (n_in, n_out), n_in)
        self.b = params.zeros(f"{name}.b", (n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)
