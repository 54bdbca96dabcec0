"""Central finite-difference checks against the reverse-mode gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, backward, no_grad, reset_tape


class EvaluationError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_coords: int
    tol: float
    worst: str = ""
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}\t{self.name}\tmax_rel_err={self.max_rel_error:.3e}\tcoords={self.n_coords}"


def _rel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # floor the denominator so coordinates with ~zero gradient are compared absolutely
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-5)


def finite_diff_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5,
                      tol: float = 1e-4, name: str = "f", max_coords: int | None = None,
                      rng: np.random.Generator | None = None,
                      analytic: Mapping[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare ``backward`` gradients of ``f()`` with central differences.

    ``f`` rebuilds its graph from ``params`` on every call.  With
    ``max_coords`` only a random subset of each parameter's coordinates is
    probed.  ``analytic`` overrides the reverse-mode gradients, which is how a
    deliberately wrong adjoint is tested.
    """
    params = dict(params)
    if not params:
        return GradCheckReport(name, 0.0, 0, tol)
    reset_tape()
    for p in params.values():
        p.grad = None
    if analytic is None:
        out = f()
        _check_finite(out)
        backward(out)
        analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in params.items()}

    worst, worst_name, n = 0.0, "", 0
    errors = {}
    with no_grad():
        for key, p in params.items():
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
            numeric = np.empty(len(idx))
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                up = _check_finite(f())
                flat[i] = orig - eps
                down = _check_finite(f())
                flat[i] = orig
                numeric[k] = (up - down) / (2 * eps)
            err = float(_rel_error(np.asarray(analytic[key]).reshape(-1)[idx], numeric).max(initial=0.0))
            errors[key] = err
            n += len(idx)
            if err > worst:
                worst, worst_name = err, key
    return GradCheckReport(name, worst, n, tol, worst_name, errors)


def _check_finite(out: Tensor) -> float:
    value = float(np.asarray(out.data).reshape(-1)[0]) if out.size == 1 else math.nan
    if not math.isfinite(value):
        raise EvaluationError(f"function value is not a finite scalar: {out.data!r}")
    return value
