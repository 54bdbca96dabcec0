"""Local reasoning: a spatial memory written by a convolutional GRU and read by a small ConvNet.

All convolutions inside the GRU and the feature fusion are 1x1, so they are
applied as matrix products over flattened ``[N, channels]`` rows; the same
:class:`GruCell` therefore serves the spatial memory (rows are patch cells)
and the global vector memory (rows are regions).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import DimensionError, Tensor, activation, concat, conv2d, relu, sigmoid
from .geometry import Box
from .nn import Linear, Params, linear
from .resample import ConsistencyError, crop_and_resize_many, crop_matrix, paste_back


@dataclass
class GruCell:
    """Gated write ``s' = u*s + (1-u)*act(x W_f + (z*s) W_s + b)``.

    Update and reset gates are sigmoids of one projection of ``[x, s]``.
    """

    w_gates: Tensor
    b_gates: Tensor
    w_f: Tensor
    w_s: Tensor
    b: Tensor
    candidate: str = "tanh"

    @classmethod
    def create(cls, params: Params, name: str, in_dim: int, mem_dim: int,
               candidate: str = "tanh") -> "GruCell":
        return cls(
            w_gates=params.glorot(f"{name}.w_gates", (in_dim + mem_dim, 2 * mem_dim), in_dim + mem_dim, mem_dim),
            b_gates=params.zeros(f"{name}.b_gates", (2 * mem_dim,)),
            w_f=params.glorot(f"{name}.w_f", (in_dim, mem_dim), in_dim, mem_dim),
            w_s=params.glorot(f"{name}.w_s", (mem_dim, mem_dim), mem_dim, mem_dim),
            b=params.zeros(f"{name}.b", (mem_dim,)),
            candidate=candidate,
        )

    @property
    def mem_dim(self) -> int:
        return self.w_s.shape[0]

    def __call__(self, x: Tensor, s: Tensor, update=None, reset=None) -> Tensor:
        """Rows of ``x`` ``[N, in]`` update rows of ``s`` ``[N, mem]``.

        ``update``/``reset`` override the computed gates (arrays broadcastable
        to ``[N, mem]``); used to pin the gates in tests.
        """
        if x.shape[0] != s.shape[0] or s.shape[1] != self.mem_dim:
            raise DimensionError(f"GRU rows/width mismatch: x {x.shape}, s {s.shape}")
        m = self.mem_dim
        gates = sigmoid(linear(concat([x, s], axis=1), self.w_gates, self.b_gates))
        u = gates[:, :m] if update is None else Tensor(np.broadcast_to(update, s.shape))
        z = gates[:, m:] if reset is None else Tensor(np.broadcast_to(reset, s.shape))
        cand = activation(linear(x, self.w_f) + linear(z * s, self.w_s) + self.b, self.candidate)
        return u * s + (1.0 - u) * cand


class InputFusion:
    """Two 1x1 convolutions fusing mid-level patches with a broadcast high-level vector."""

    def __init__(self, params: Params, name: str, mid_dim: int, high_dim: int, out_dim: int):
        self.conv1 = Linear(params, f"{name}.conv1", mid_dim + high_dim, out_dim)
        self.conv2 = Linear(params, f"{name}.conv2", out_dim, out_dim, init="glorot")

    def __call__(self, h: Tensor, f: Tensor) -> Tensor:
        return fuse_input_features(h, f, self)


def fuse_input_features(h: Tensor, f: Tensor, fusion: InputFusion) -> Tensor:
    """``h`` is ``[R, k, k, Dh]`` (or one ``[k, k, Dh]`` patch), ``f`` is ``[R, F]`` / ``[F]``.

    Returns ``[R, k, k, D]`` (or ``[k, k, D]``).
    """
    single = h.ndim == 3
    if single:
        h = h.reshape(1, *h.shape)
        f = f.reshape(1, -1)
    if h.ndim != 4 or f.ndim != 2 or f.shape[0] != h.shape[0]:
        raise DimensionError(f"fuse_input_features: incompatible h {h.shape} and f {f.shape}")
    r, kh, kw, dh = h.shape
    cells = kh * kw
    tiled = f.reshape(r, 1, f.shape[1]).broadcast_to((r, cells, f.shape[1])).reshape(r * cells, f.shape[1])
    x = concat([h.reshape(r * cells, dh), tiled], axis=1)
    out = fusion.conv2(relu(fusion.conv1(x)))
    out = out.reshape(r, kh, kw, out.shape[1])
    return out.reshape(kh, kw, out.shape[3]) if single else out


def memory_read(memory: Tensor, boxes: Sequence[Box], out: tuple[int, int] = (7, 7),
                matrix: np.ndarray | None = None) -> Tensor:
    """Crop every box out of the ``[H, W, D]`` memory: ``[R, h, w, D]``."""
    return crop_and_resize_many(memory, boxes, out, matrix)


def gru_write(s_r: Tensor, f_r: Tensor, cell: GruCell, update=None, reset=None) -> Tensor:
    """Apply the GRU cell-wise to aligned ``[..., D]`` patches."""
    if s_r.shape[:-1] != f_r.shape[:-1]:
        raise DimensionError(f"gru_write: patch shapes differ {s_r.shape} vs {f_r.shape}")
    shape = s_r.shape
    flat = cell(f_r.reshape(-1, f_r.shape[-1]), s_r.reshape(-1, shape[-1]), update, reset)
    return flat.reshape(shape)


def parallel_write(memory: Tensor, updates: Sequence[tuple[Box, Tensor]], coverage: np.ndarray,
                   cache=None) -> Tensor:
    """Paste every updated patch back at once, blending overlaps by coverage."""
    coverage = np.asarray(coverage)
    if coverage.shape[0] != len(updates):
        raise ConsistencyError(f"{coverage.shape[0]} coverage rows for {len(updates)} updates")
    return paste_back(memory, updates, coverage, cache)


class LocalReasoner:
    """Three 3x3 convolutions over the memory, per-box pooling, two FC layers, two heads."""

    def __init__(self, params: Params, name: str, mem_dim: int, fc_width: int, n_classes: int,
                 pool: tuple[int, int] = (7, 7), use_convs: bool = True):
        self.pool = pool
        self.use_convs = use_convs
        self.convs = []
        if use_convs:
            for k in range(3):
                w = params.he(f"{name}.conv{k}.w", (3, 3, mem_dim, mem_dim), 9 * mem_dim)
                b = params.zeros(f"{name}.conv{k}.b", (mem_dim,))
                self.convs.append((w, b))
        self.fc1 = Linear(params, f"{name}.fc1", pool[0] * pool[1] * mem_dim, fc_width)
        self.fc2 = Linear(params, f"{name}.fc2", fc_width, fc_width)
        self.logits = Linear(params, f"{name}.logits", fc_width, n_classes, init="zeros")
        self.attention = Linear(params, f"{name}.attention", fc_width, 1, init="zeros")

    def __call__(self, memory: Tensor, boxes: Sequence[Box], matrix: np.ndarray | None = None):
        return local_predict(memory, boxes, self, matrix)


def local_predict(memory: Tensor, boxes: Sequence[Box], net: LocalReasoner,
                  matrix: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Logits ``[R, C]``, attention ``[R]`` and the penultimate features ``[R, F]``."""
    x = memory
    for w, b in net.convs:
        x = relu(conv2d(x, w, b))
    pooled = crop_and_resize_many(x, boxes, net.pool, matrix)
    r = len(boxes)
    feats = relu(net.fc2(relu(net.fc1(pooled.reshape(r, -1)))))
    return net.logits(feats), net.attention(feats).reshape(r), feats


def stacked_crop_matrix(boxes: Sequence[Box], grid: tuple[int, int], out: tuple[int, int]) -> np.ndarray:
    return np.concatenate([crop_matrix(b, grid, out) for b in boxes])
