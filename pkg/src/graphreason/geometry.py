"""Boxes, overlap, the distance kernel and region-graph adjacency."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

SPATIAL_EDGE_TYPES = ("left-of", "right-of", "above", "below", "iou")
DIRECTIONAL_TYPES = SPATIAL_EDGE_TYPES[:4]


class GeometryError(ValueError):
    """Raised for degenerate or otherwise unusable boxes."""


class Box(NamedTuple):
    """Axis-aligned rectangle in pixel coordinates, ``x2 > x1`` and ``y2 > y1``."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def is_valid(self) -> bool:
        return self.x2 > self.x1 and self.y2 > self.y1

    def scaled(self, sx: float, sy: float) -> "Box":
        return Box(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)


def check_box(box: Box) -> Box:
    box = Box(*map(float, box))
    if not all(math.isfinite(v) for v in box):
        raise GeometryError(f"non-finite box {tuple(box)}")
    if not box.is_valid():
        raise GeometryError(f"degenerate box {tuple(box)}: need x2 > x1 and y2 > y1")
    return box


def intersection_area(a: Box, b: Box) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes: Sequence[Box], others: Sequence[Box] | None = None) -> np.ndarray:
    """Pairwise IoU, vectorised over both box lists."""
    a = np.asarray(boxes, dtype=float).reshape(-1, 4)
    b = a if others is None else np.asarray(others, dtype=float).reshape(-1, 4)
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(w, 0, None) * np.clip(h, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=inter > 0)


@dataclass(frozen=True)
class KernelConfig:
    bandwidth: float = 50.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"kernel bandwidth must be positive, got {self.bandwidth}")

    @classmethod
    def for_scene(cls, scene_width: float) -> "KernelConfig":
        """Desk-scale default: one twelfth of the scene width."""
        return cls(bandwidth=scene_width / 12.0)


def distance_kernel(x: float, cfg: KernelConfig = KernelConfig()) -> float:
    """exp(-x / bandwidth), mapping a pixel distance into (0, 1]."""
    if x < 0:
        raise ValueError(f"distance must be non-negative, got {x}")
    return math.exp(-x / cfg.bandwidth)


@dataclass
class SpatialAdjacency:
    """Per-edge-type R x R region adjacency.

    ``matrices[t][i, j]`` is the weight of the edge from region ``i`` to the
    region ``j`` that stands in relation ``t`` to it (``j`` is right-of ``i``
    and so on).  ``coincident`` lists the ordered pairs whose centres coincide.
    """

    matrices: dict[str, np.ndarray]
    coincident: list[tuple[int, int]] = field(default_factory=list)

    @property
    def n_regions(self) -> int:
        return next(iter(self.matrices.values())).shape[0]

    def stacked(self, types: Sequence[str] = SPATIAL_EDGE_TYPES) -> np.ndarray:
        return np.stack([self.matrices[t] for t in types])

    def subset(self, keep: Sequence[int]) -> "SpatialAdjacency":
        keep = np.asarray(keep, dtype=int)
        remap = {int(old): new for new, old in enumerate(keep)}
        return SpatialAdjacency(
            {t: m[np.ix_(keep, keep)] for t, m in self.matrices.items()},
            [(remap[i], remap[j]) for i, j in self.coincident if i in remap and j in remap],
        )


def direction_of(dx: float, dy: float) -> str:
    """Edge type for an offset from one centre to another (image y grows down).

    Quadrants split at 45 degrees; ``|dx| == |dy|`` goes to the horizontal type
    and a zero offset is ``right-of``.
    """
    if abs(dx) >= abs(dy):
        return "left-of" if dx < 0 else "right-of"
    return "above" if dy < 0 else "below"


def build_spatial_adjacency(regions: Sequence[Box], cfg: KernelConfig = KernelConfig()) -> SpatialAdjacency:
    n = len(regions)
    mats = {t: np.zeros((n, n)) for t in SPATIAL_EDGE_TYPES}
    centers = [Box(*r).center for r in regions]
    coincident = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            dx = centers[j][0] - centers[i][0]
            dy = centers[j][1] - centers[i][1]
            kind = direction_of(dx, dy)
            if dx == 0 and dy == 0:
                # right-of from the lower index, so the pair stays reciprocal
                coincident.append((i, j))
                kind = "right-of" if i < j else "left-of"
            mats[kind][i, j] = distance_kernel(math.hypot(dx, dy), cfg)
    if n:
        mats["iou"] = iou_matrix(regions)
        np.fill_diagonal(mats["iou"], 0.0)
    return SpatialAdjacency(mats, coincident)


def coverage_weights(regions: Sequence[Box], grid: tuple[int, int], scene: tuple[float, float]) -> np.ndarray:
    """Fraction of each grid cell's area inside each box, shape ``[R, H*W]``.

    ``grid`` is ``(H, W)`` in cells and ``scene`` is ``(height, width)`` in pixels.
    """
    H, W = grid
    ch, cw = scene[0] / H, scene[1] / W
    b = np.asarray(regions, dtype=float).reshape(-1, 4)
    xs = np.arange(W + 1) * cw
    ys = np.arange(H + 1) * ch
    ox = np.clip(np.minimum(b[:, None, 2], xs[None, 1:]) - np.maximum(b[:, None, 0], xs[None, :-1]), 0, None)
    oy = np.clip(np.minimum(b[:, None, 3], ys[None, 1:]) - np.maximum(b[:, None, 1], ys[None, :-1]), 0, None)
    frac = (oy[:, :, None] * ox[:, None, :]) / (ch * cw)
    return frac.reshape(len(b), H * W)
