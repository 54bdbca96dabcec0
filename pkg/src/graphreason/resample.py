"""Differentiable bilinear crop-and-resize and its paste-back counterpart.

Both operations are linear in the feature map, so each box is turned into a
constant sampling matrix once and applied with :func:`matmul`; the adjoint of
a crop is then exactly the transpose, scattering each output gradient onto the
four source cells it was interpolated from.

Box coordinates here are in cell units: a map of ``H x W`` cells spans
``[0, W] x [0, H]`` and cell ``(i, j)`` has its centre at ``(j + .5, i + .5)``.
Sampling aligns corners: the first and last output samples sit on the centres
of the box's corner cells, so a full-map crop at the map's own size is the
identity.
"""
from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np

from .autodiff import DimensionError, Tensor, add, concat, matmul, mul
from .geometry import Box, GeometryError

__all__ = [
    "ConsistencyError",
    "crop_matrix", "paste_matrix", "crop_and_resize", "crop_and_resize_many",
    "paste_back", "to_grid", "clip_box",
]


class ConsistencyError(ValueError):
    """Raised when coverage weights and patches describe different region sets."""


def to_grid(box: Box, grid: tuple[int, int], scene: tuple[float, float]) -> Box:
    """Pixel box -> cell-unit box for an ``(H, W)`` grid over a ``(height, width)`` scene."""
    return Box(*box).scaled(grid[1] / scene[1], grid[0] / scene[0])


def clip_box(box: Box, grid: tuple[int, int]) -> Box:
    H, W = grid
    box = Box(*map(float, box))
    clipped = Box(min(max(box.x1, 0.0), W), min(max(box.y1, 0.0), H),
                  min(max(box.x2, 0.0), W), min(max(box.y2, 0.0), H))
    if not clipped.is_valid():
        raise GeometryError(f"box {tuple(box)} has zero area inside a {H}x{W} map")
    if clipped != box:
        warnings.warn(f"box {tuple(box)} clipped to map bounds {W}x{H}", stacklevel=3)
    return clipped


def _sample_span(lo: float, hi: float) -> tuple[float, float]:
    """Centre and half-span of the sample grid along one axis, in cell-centre units."""
    centre = 0.5 * (lo + hi) - 0.5
    half = 0.5 * max(hi - lo - 1.0, 0.0)
    return centre, half


def _interp(coords: np.ndarray, n: int) -> np.ndarray:
    """Linear-interpolation weights ``[len(coords), n]`` with edge clamping."""
    out = np.zeros((len(coords), n))
    if n == 1:
        out[:, 0] = 1.0
        return out
    u = np.clip(coords, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(u).astype(int), n - 2)
    t = u - i0
    rows = np.arange(len(coords))
    out[rows, i0] = 1.0 - t
    out[rows, i0 + 1] += t
    return out


def _axis_samples(lo: float, hi: float, n_out: int) -> np.ndarray:
    centre, half = _sample_span(lo, hi)
    if n_out == 1:
        return np.array([centre])
    return centre - half + (np.arange(n_out) * (2.0 * half)) / (n_out - 1)


def crop_matrix(box: Box, grid: tuple[int, int], out: tuple[int, int]) -> np.ndarray:
    """Sampling matrix ``[h*w, H*W]`` for one cell-unit box."""
    h, w = out
    if h < 1 or w < 1:
        raise ValueError(f"output size must be positive, got {out}")
    box = clip_box(box, grid)
    wy = _interp(_axis_samples(box.y1, box.y2, h), grid[0])
    wx = _interp(_axis_samples(box.x1, box.x2, w), grid[1])
    return np.kron(wy, wx)


def _axis_paste(lo: float, hi: float, n_cells: int, n_patch: int) -> np.ndarray:
    centre, half = _sample_span(lo, hi)
    cells = np.arange(n_cells, dtype=float)
    if n_patch == 1 or half == 0.0:
        t = np.full(n_cells, 0.5 * (n_patch - 1))
    else:
        t = (cells - (centre - half)) * (n_patch - 1) / (2.0 * half)
    return _interp(t, n_patch)


def paste_matrix(box: Box, grid: tuple[int, int], patch: tuple[int, int]) -> np.ndarray:
    """Matrix ``[H*W, h*w]`` resampling a patch back onto every grid cell.

    Cells beyond the box extrapolate by clamping to the patch edge; the
    coverage weights decide which cells actually receive the values.
    """
    box = clip_box(box, grid)
    py = _axis_paste(box.y1, box.y2, grid[0], patch[0])
    px = _axis_paste(box.x1, box.x2, grid[1], patch[1])
    return np.kron(py, px)


def crop_and_resize(fmap: Tensor, box: Box, out: tuple[int, int] = (7, 7)) -> Tensor:
    """Bilinear crop of an ``[H, W, D]`` map to ``[h, w, D]``."""
    return crop_and_resize_many(fmap, [box], out).reshape(out[0], out[1], fmap.shape[2])


def crop_and_resize_many(fmap: Tensor, boxes: Sequence[Box], out: tuple[int, int] = (7, 7),
                         matrix: np.ndarray | None = None) -> Tensor:
    """Crop every box at once; returns ``[R, h, w, D]``.

    ``matrix`` may carry the stacked sampling matrices when the caller caches them.
    """
    if fmap.ndim != 3:
        raise DimensionError(f"crop_and_resize expects an [H, W, D] map, got {fmap.shape}")
    H, W, D = fmap.shape
    if matrix is None:
        matrix = np.concatenate([crop_matrix(b, (H, W), out) for b in boxes])
    flat = matmul(Tensor(matrix), fmap.reshape(H * W, D))
    return flat.reshape(len(boxes), out[0], out[1], D)


def blend_matrices(coverage: np.ndarray, paste: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pre-compute the constant parts of :func:`paste_back`.

    ``coverage`` is ``[R, H*W]`` and ``paste`` the stacked paste matrices
    ``[R, H*W, h*w]``.  Returns the coverage-weighted scatter matrix
    ``[H*W, R*h*w]`` and the per-cell ``(keep, scale)`` factors as ``[H*W, 2]``.
    """
    n_regions, n_cells, n_patch = paste.shape
    scatter = (coverage[:, :, None] * paste).transpose(1, 0, 2).reshape(n_cells, n_regions * n_patch)
    total = coverage.sum(axis=0)
    keep = 1.0 - np.minimum(1.0, total)
    scale = 1.0 / np.maximum(1.0, total)
    return scatter, np.stack([keep, scale], axis=1)


def paste_back(memory: Tensor, patches: Sequence[tuple[Box, Tensor]], coverage: np.ndarray,
               grid_cache: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Write resized patches into an ``[H, W, D]`` memory with coverage blending.

    Each cell becomes ``(sum_r g_rc v_r(c) + (1 - min(1, sum_r g_rc)) old(c)) /
    max(1, sum_r g_rc)``: fully covered cells take the coverage-weighted mean of
    the regions writing them, partially covered cells keep the uncovered share
    of their old value.
    """
    H, W, D = memory.shape
    coverage = np.asarray(coverage, dtype=float)
    if coverage.shape != (len(patches), H * W):
        raise ConsistencyError(f"coverage shape {coverage.shape} does not match "
                         f"{len(patches)} patches on a {H}x{W} grid")
    if not patches:
        return memory
    ph, pw = patches[0][1].shape[:2]
    if grid_cache is None:
        paste = np.stack([paste_matrix(b, (H, W), (ph, pw)) for b, _ in patches])
        grid_cache = blend_matrices(coverage, paste)
    scatter, factors = grid_cache
    values = concat([p.reshape(ph * pw, D) for _, p in patches], axis=0)
    return paste_blend(memory, values, scatter, factors)


def paste_blend(memory: Tensor, values: Tensor, scatter: np.ndarray, factors: np.ndarray) -> Tensor:
    """Core of :func:`paste_back` given flattened ``[R*h*w, D]`` patch values."""
    H, W, D = memory.shape
    old = memory.reshape(H * W, D)
    mixed = add(matmul(Tensor(scatter), values), mul(old, Tensor(factors[:, :1])))
    return mul(mixed, Tensor(factors[:, 1:])).reshape(H, W, D)

