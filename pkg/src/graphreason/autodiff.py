"""Dense tensors with a reverse-mode gradient tape, backed by numpy.

Every op that touches a tensor with ``requires_grad`` appends its output to the
active :class:`Tape`.  Recording order is creation order, which is already a
topological order, so :func:`backward` is a single reverse sweep.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "TapeError", "DimensionError", "backward", "no_grad",
    "get_default_dtype", "set_default_dtype", "current_tape", "reset_tape",
    "matmul", "add", "mul", "concat", "stack", "softmax", "log_softmax",
    "softmax_xent", "relu", "sigmoid", "tanh", "activation", "conv2d",
]


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape (re-used graph, non-scalar root)."""


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


class Tape:
    """Ordered record of the ops built since the last backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: "Tensor") -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); call reset_tape()")
        self.nodes.append(node)


_TAPE = Tape()


def current_tape() -> Tape:
    return _TAPE


def reset_tape() -> Tape:
    """Drop whatever has been recorded and start a fresh tape."""
    global _TAPE
    _TAPE = Tape()
    return _TAPE


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-dimensional float array that can take part in reverse-mode AD."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._adjoint: Callable | None = None
        self._tape: Tape | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._adjoint is None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other.reciprocal())
        return mul(self, 1.0 / np.asarray(other, dtype=self.data.dtype))

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    # -- unary ops ----------------------------------------------------------
    def reciprocal(self) -> "Tensor":
        out = 1.0 / self.data
        return _unary(self, out, lambda g: -g * out * out)

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _unary(self, out, lambda g: g * out)

    def log(self) -> "Tensor":
        x = self.data
        return _unary(self, np.log(x), lambda g: g / x)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return _unary(self, self.data.reshape(shape), lambda g: g.reshape(orig))

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return _unary(self, self.data.transpose(axes), lambda g: g.transpose(inverse))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def adjoint(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape)

        return _unary(self, self.data.sum(axis=axis, keepdims=keepdims), adjoint)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def broadcast_to(self, shape) -> "Tensor":
        orig = self.shape
        return _unary(self, np.broadcast_to(self.data, shape), lambda g: _unbroadcast(g, orig))

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _record(data: np.ndarray, parents: Sequence[Tensor], adjoint: Callable) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out._parents = ()
    out._adjoint = None
    out._tape = None
    if needs:
        out._parents = tuple(parents)
        out._adjoint = adjoint
        out._tape = _TAPE
        _TAPE.record(out)
    return out


def _unary(x: Tensor, data: np.ndarray, rule: Callable) -> Tensor:
    return _record(data, (x,), lambda g: (rule(g),))


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``root``.

    Contributions from several paths are summed.  Leaf gradients accumulate
    across calls until cleared with ``zero_grad``; the tape itself is single-use.
    """
    if root.size != 1:
        raise TapeError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    if root.is_leaf:
        _accumulate_leaf(root, np.ones_like(root.data))
        return
    tape = root._tape
    if tape is None or tape.consumed:
        raise TapeError("graph already used for a backward pass; rebuild the forward graph")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._adjoint(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                _accumulate_leaf(parent, pg)
            else:
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    tape.consumed = True
    tape.nodes = []
    if tape is _TAPE:
        reset_tape()


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.data.dtype)
    if g.shape != leaf.shape:
        g = _unbroadcast(g, leaf.shape)
    leaf.grad = np.array(g) if leaf.grad is None else leaf.grad + g


# -- binary / structural ops ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                              _unbroadcast(g, sb) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def adjoint(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record(ad * bd, (a, b), adjoint)


def matmul(a, b) -> Tensor:
    """2-D matrix product with shape checking."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def adjoint(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _record(ad @ bd, (a, b), adjoint)


def take(x: Tensor, index) -> Tensor:
    shape = x.shape

    def adjoint(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return out

    return _unary(x, x.data[index], adjoint)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(data, tensors, adjoint)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def adjoint(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(data, tensors, adjoint)


# -- activations -----------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0.0).astype(x.data.dtype, copy=False),
                  lambda g: g * mask)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free and gives sigmoid(0) == 0.5 exactly
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _unary(x, out, lambda g: g * (1.0 - out * out))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _unary(x, out, lambda g: out * (g - (g * out).sum(axis=axis, keepdims=True)))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _unary(x, out, lambda g: g - probs * g.sum(axis=axis, keepdims=True))


def softmax_xent(logits: Tensor, target) -> tuple[np.ndarray, Tensor]:
    """Soft-max probabilities and negative log-likelihood of ``target``.

    ``logits`` is ``[C]`` with an integer target, or ``[R, C]`` with one target
    per row; in the latter case the loss is the per-row vector ``[R]``.
    """
    logits = _as_tensor(logits)
    n_classes = logits.shape[-1]
    target = np.asarray(target)
    if n_classes < 1:
        raise DimensionError("softmax_xent needs at least one class")
    if np.any(target < 0) or np.any(target >= n_classes):
        raise IndexError(f"target {target.tolist()} out of range for {n_classes} classes")
    logp = log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        loss = -logp[int(target)]
    else:
        if target.shape != (logits.shape[0],):
            raise DimensionError(f"need one target per row: {target.shape} vs {logits.shape}")
        loss = -logp[np.arange(logits.shape[0]), target]
    return np.exp(logp.data), loss


# -- convolution -------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1, same-padded cross-correlation of an ``[H, W, Cin]`` map."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects [H,W,Cin] and [k,k,Cin,Cout], got {x.shape}, {kernel.shape}")
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square and odd, got {kernel.shape[:2]}")
    if x.shape[2] != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    h, w, _ = x.shape
    pad = k // 2
    kmat = kernel.data.reshape(k * k * cin, cout)
    if k == 1:
        cols = x.data.reshape(h * w, cin)
    else:
        padded = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
        cols = win.transpose(0, 1, 3, 4, 2).reshape(h * w, k * k * cin)
    out = cols @ kmat
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d bias shape {bias.shape} != ({cout},)")
        out = out + bias.data
        parents.append(bias)

    def adjoint(g):
        gf = g.reshape(h * w, cout)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (cols.T @ gf).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = gf.sum(axis=0)
        if x.requires_grad:
            gcols = gf @ kmat.T
            if k == 1:
                gx = gcols.reshape(h, w, cin)
            else:
                gcols = gcols.reshape(h, w, k, k, cin)
                gpad = np.zeros((h + 2 * pad, w + 2 * pad, cin), dtype=g.dtype)
                for di in range(k):
                    for dj in range(k):
                        gpad[di:di + h, dj:dj + w] += gcols[:, :, di, dj]
                gx = gpad[pad:pad + h, pad:pad + w]
        return (gx, gk, gb) if bias is not None else (gx, gk)

    return _record(out.reshape(h, w, cout), parents, adjoint)
