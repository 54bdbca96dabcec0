"""Synthetic scenes whose labels can only be recovered from context.

Class layout for ``C`` classes::

    0, 1   part-a / part-b     identical features; label fixed by the whole present
    2, 3   whole-a / whole-b   separable; part-a co-occurs with whole-a, part-b with whole-b
    4, 5   row-a / row-b       chains of three aligned boxes sharing one label; each
                               non-anchor member is ambiguous with probability rho
    6..    clutter             separable fillers

Every region's feature is its class prototype plus Gaussian noise, painted
over the cells of its box.  Ambiguous members draw from a prototype shared by
both classes of their pair, so a context-blind classifier is at chance on them.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box, iou_matrix
from .knowledge import ClassVocabulary, KnowledgeGraph, from_edges, save_graph

PART_A, PART_B, WHOLE_A, WHOLE_B, ROW_A, ROW_B = range(6)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    grid: tuple[int, int] = (12, 12)
    cell_px: float = 16.0
    n_classes: int = 8
    region_range: tuple[int, int] = (5, 8)
    feature_dim: int = 16
    ambiguity: float = 0.5
    prototype_scale: float = 3.0
    noise: float = 0.5
    cell_noise: float = 0.05
    spatial_rule: bool = True
    semantic_rule: bool = True
    world_seed: int = 1234
    max_retries: int = 200

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(self.grid))
        object.__setattr__(self, "region_range", tuple(self.region_range))
        if self.n_classes < 4:
            raise ValueError("need at least 4 classes (one ambiguous pair plus context classes)")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ValueError(f"ambiguity must lie in [0, 1], got {self.ambiguity}")
        lo, hi = self.region_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad region range {self.region_range}")

    @property
    def scene_size(self) -> tuple[float, float]:
        return (self.grid[0] * self.cell_px, self.grid[1] * self.cell_px)

    @property
    def has_rows(self) -> bool:
        return self.spatial_rule and self.n_classes >= 6

    def class_names(self) -> list[str]:
        names = ["part-a", "part-b", "whole-a", "whole-b", "row-a", "row-b"][: self.n_classes]
        names += [f"clutter-{k}" for k in range(self.n_classes - len(names))]
        return names

    def vocabulary(self) -> ClassVocabulary:
        return ClassVocabulary(tuple(self.class_names()))

    def prototypes(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-class prototypes ``[C, Dh]`` and the shared ambiguous ones ``[2, Dh]``
        (index 0 for the part pair, 1 for the row pair)."""
        rng = np.random.default_rng(self.world_seed)
        raw = rng.normal(size=(self.n_classes + 2, self.feature_dim))
        raw *= self.prototype_scale / np.linalg.norm(raw, axis=1, keepdims=True)
        protos, shared = raw[: self.n_classes].copy(), raw[self.n_classes:].copy()
        protos[PART_B] = protos[PART_A] = shared[0]
        return protos, shared

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class SyntheticScene:
    scene_id: str
    features: np.ndarray          # [H, W, Dh]
    boxes: list[Box]              # pixels
    labels: np.ndarray            # [R]
    scene_size: tuple[float, float]
    ambiguous: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def grid(self) -> tuple[int, int]:
        return self.features.shape[:2]

    @property
    def n_regions(self) -> int:
        return len(self.boxes)

    def subset(self, keep: Sequence[int]) -> "SyntheticScene":
        keep = list(keep)
        amb = self.ambiguous[keep] if len(self.ambiguous) else self.ambiguous
        return SyntheticScene(self.scene_id, self.features, [self.boxes[i] for i in keep],
                              self.labels[keep], self.scene_size, amb)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(np.asarray(self.boxes, dtype="<f8").tobytes())
        h.update(np.asarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


def knowledge_graph(spec: SceneSpec) -> KnowledgeGraph:
    """The planted class hierarchy (raw, before inverses and normalisation)."""
    names = spec.class_names()
    edges = [("is-part-of", names[PART_A], names[WHOLE_A], 1.0),
             ("is-part-of", names[PART_B], names[WHOLE_B], 1.0),
             ("similarity", names[PART_A], names[PART_B], 1.0)]
    if spec.n_classes >= 6:
        edges.append(("similarity", names[ROW_A], names[ROW_B], 1.0))
    if not spec.semantic_rule:
        edges = [e for e in edges if e[0] != "is-part-of"]
    return from_edges(spec.vocabulary(), edges)


class _Canvas:
    def __init__(self, grid):
        self.occupied = np.zeros(grid, dtype=bool)

    def fits(self, r, c, h, w) -> bool:
        H, W = self.occupied.shape
        return 0 <= r and 0 <= c and r + h <= H and c + w <= W and not self.occupied[r:r + h, c:c + w].any()

    def take(self, r, c, h, w):
        self.occupied[r:r + h, c:c + w] = True


def _place_group(canvas: _Canvas, rng, cells: list[tuple[int, int, int, int]], tries: int):
    """Find an offset where every ``(dr, dc, h, w)`` cell block is free."""
    H, W = canvas.occupied.shape
    for _ in range(tries):
        r, c = int(rng.integers(0, H)), int(rng.integers(0, W))
        if all(canvas.fits(r + dr, c + dc, h, w) for dr, dc, h, w in cells):
            for dr, dc, h, w in cells:
                canvas.take(r + dr, c + dc, h, w)
            return [(r + dr, c + dc, h, w) for dr, dc, h, w in cells]
    return None


def generate_scene(spec: SceneSpec, seed: int, scene_id: str | None = None) -> SyntheticScene:
    """Pure function of ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    protos, shared = spec.prototypes()
    lo, hi = spec.region_range
    target = int(rng.integers(lo, hi + 1))

    for _ in range(spec.max_retries):
        canvas = _Canvas(spec.grid)
        blocks, labels, ambiguous = [], [], []
        ok = True

        if spec.semantic_rule:
            whole = WHOLE_A if rng.random() < 0.5 else WHOLE_B
            part = PART_A if whole == WHOLE_A else PART_B
            n_parts = int(rng.integers(1, 3))
            group = [(0, 0, 2, 3)]
            sides = [(2, 0), (2, 2), (0, 3), (-2, 0), (-2, 2), (0, -2)]
            for k in rng.permutation(len(sides))[:n_parts]:
                dr, dc = sides[k]
                group.append((dr, dc, 2, 2))
            placed = _place_group(canvas, rng, group, 50)
            if placed is None:
                ok = False
            else:
                blocks += placed
                labels += [whole] + [part] * n_parts
                ambiguous += [False] + [True] * n_parts

        if ok and spec.has_rows and len(blocks) + 3 <= target:
            row = ROW_A if rng.random() < 0.5 else ROW_B
            gap = int(rng.integers(0, 2))
            group = [(0, k * (2 + gap), 2, 2) for k in range(3)]
            placed = _place_group(canvas, rng, group, 50)
            if placed is None:
                ok = False
            else:
                anchor = int(rng.integers(0, 3))
                blocks += placed
                labels += [row] * 3
                ambiguous += [k != anchor and rng.random() < spec.ambiguity for k in range(3)]

        first_clutter = 6 if spec.n_classes > 6 else (4 if not spec.has_rows and spec.n_classes > 4 else None)
        while ok and len(blocks) < target:
            if first_clutter is None:
                cls = int(rng.integers(WHOLE_A, WHOLE_B + 1))
            else:
                cls = int(rng.integers(first_clutter, spec.n_classes))
            h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            placed = _place_group(canvas, rng, [(0, 0, h, w)], 50)
            if placed is None:
                ok = False
                break
            blocks += placed
            labels.append(cls)
            ambiguous.append(False)

        if ok and lo <= len(blocks) <= hi:
            break
    else:
        raise GenerationError(f"could not place {target} regions on a {spec.grid} grid "
                              f"after {spec.max_retries} attempts")

    H, W = spec.grid
    features = rng.normal(0.0, spec.cell_noise, size=(H, W, spec.feature_dim))
    boxes = []
    pair_of = {PART_A: 0, PART_B: 0, ROW_A: 1, ROW_B: 1}
    for (r, c, h, w), cls, amb in zip(blocks, labels, ambiguous):
        base = shared[pair_of[cls]] if amb else protos[cls]
        vec = base + rng.normal(0.0, spec.noise, size=spec.feature_dim)
        features[r:r + h, c:c + w] += vec
        px = spec.cell_px
        boxes.append(Box(c * px, r * px, (c + w) * px, (r + h) * px))
    return SyntheticScene(scene_id or f"scene-{seed}", features, boxes,
                          np.asarray(labels, dtype=np.int64), spec.scene_size,
                          np.asarray(ambiguous, dtype=bool))


# -- datasets -------------------------------------------------------------------

@dataclass
class Dataset:
    spec: SceneSpec
    splits: dict[str, list[SyntheticScene]]
    graph: KnowledgeGraph

    def __getitem__(self, split: str) -> list[SyntheticScene]:
        return self.splits[split]


def split_sizes(n: int, val_fraction: float, test_fraction: float) -> dict[str, int]:
    """Floor rule for val/test; the remainder goes to train."""
    if n < 1:
        raise ValueError("need at least one scene")
    n_val = math.floor(n * val_fraction)
    n_test = math.floor(n * test_fraction)
    if n_val + n_test > n:
        raise ValueError("val and test fractions exceed the dataset")
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def generate_dataset(spec: SceneSpec, n_scenes: int, seed: int, val_fraction: float = 0.0,
                     test_fraction: float = 0.2, out_dir: str | Path | None = None) -> Dataset:
    sizes = split_sizes(n_scenes, val_fraction, test_fraction)
    children = np.random.SeedSequence(seed).generate_state(n_scenes, dtype=np.uint64)
    scenes = [generate_scene(spec, int(s), f"s{seed}-{k:05d}") for k, s in enumerate(children)]
    splits, start = {}, 0
    for name in ("train", "val", "test"):
        splits[name] = scenes[start:start + sizes[name]]
        start += sizes[name]
    ds = Dataset(spec, splits, knowledge_graph(spec))
    if out_dir is not None:
        save_dataset(ds, out_dir, seed)
    return ds


def scene_to_record(scene: SyntheticScene) -> dict:
    H, W, D = scene.features.shape
    return {
        "id": scene.scene_id,
        "grid": [H, W, D],
        "scene": list(scene.scene_size),
        "features": np.ascontiguousarray(scene.features, dtype="<f8").tobytes().hex(),
        "regions": [[*map(float, b), int(y)] for b, y in zip(scene.boxes, scene.labels)],
        "ambiguous": [bool(a) for a in scene.ambiguous],
    }


def scene_from_record(rec: dict) -> SyntheticScene:
    H, W, D = rec["grid"]
    feats = np.frombuffer(bytes.fromhex(rec["features"]), dtype="<f8").reshape(H, W, D).copy()
    boxes = [Box(*r[:4]) for r in rec["regions"]]
    labels = np.asarray([int(r[4]) for r in rec["regions"]], dtype=np.int64)
    amb = np.asarray(rec.get("ambiguous", [False] * len(boxes)), dtype=bool)
    return SyntheticScene(rec["id"], feats, boxes, labels, tuple(rec["scene"]), amb)


def save_scenes(scenes: Sequence[SyntheticScene], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_record(s)) + "\n")


def load_scenes(path: str | Path) -> list[SyntheticScene]:
    with open(path, encoding="utf-8") as fh:
        return [scene_from_record(json.loads(line)) for line in fh if line.strip()]


def save_dataset(ds: Dataset, out_dir: str | Path, seed: int | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"spec": ds.spec.to_dict(), "seed": seed, "graph": "graph.tsv", "splits": {}}
    for name, scenes in ds.splits.items():
        save_scenes(scenes, out / f"{name}.jsonl")
        manifest["splits"][name] = {"file": f"{name}.jsonl", "ids": [s.scene_id for s in scenes],
                                    "digests": [s.digest() for s in scenes]}
    save_graph(ds.graph, out / "graph.tsv")
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return out


def load_dataset(path: str | Path) -> Dataset:
    from .knowledge import load_graph

    root = Path(path)
    with open(root / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    spec = SceneSpec.from_dict(manifest["spec"])
    splits = {name: load_scenes(root / info["file"]) for name, info in manifest["splits"].items()}
    graph = load_graph(root / manifest["graph"], spec.vocabulary())
    return Dataset(spec, splits, graph)


# -- missing-region protocol --------------------------------------------------------

@dataclass(frozen=True)
class DropProtocol:
    delta: float = 0.5
    jitter: float = 0.2
    proposals_per_box: int = 3
    mode: str = "post"

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"IoU threshold must lie in [0, 1), got {self.delta}")
        if self.mode not in ("pre", "post"):
            raise ValueError(f"mode must be 'pre' or 'post', got {self.mode!r}")


def jittered_proposals(boxes: Sequence[Box], jitter: float, per_box: int, seed: int) -> np.ndarray:
    """Each corner moved uniformly by up to ``jitter`` times the box extent: ``[R*per_box, 4]``."""
    rng = np.random.default_rng(seed)
    b = np.asarray(boxes, dtype=float).reshape(-1, 4)
    size = np.stack([b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]] * 2, axis=1)
    noise = rng.uniform(-jitter, jitter, size=(len(b), per_box, 4))
    return (b[:, None, :] + noise * size[:, None, :]).reshape(-1, 4)


def drop_regions(scene: SyntheticScene, protocol: DropProtocol, seed: int,
                 proposals: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Indices of ground-truth regions whose best proposal IoU exceeds ``delta``, and the recall."""
    if proposals is None:
        proposals = jittered_proposals(scene.boxes, protocol.jitter, protocol.proposals_per_box, seed)
    if scene.n_regions == 0:
        return np.zeros(0, dtype=int), 1.0
    best = iou_matrix(scene.boxes, proposals).max(axis=1) if len(proposals) else np.zeros(scene.n_regions)
    kept = np.nonzero(best > protocol.delta)[0]
    return kept, len(kept) / scene.n_regions
