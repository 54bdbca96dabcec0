"""Iterative roll-out of the local and global modules, attention fusion and the training loss."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, concat, log_softmax, matmul, relu, softmax, stack
from .geometry import Box, KernelConfig, SPATIAL_EDGE_TYPES, build_spatial_adjacency, coverage_weights
from .graph import (GlobalHead, GraphStack, assignment_adjacency, global_memory_update,
                    global_predict, reasoning_stack)
from .knowledge import KnowledgeGraph, prepare
from .local import GruCell, InputFusion, LocalReasoner, fuse_input_features, gru_write, local_predict
from .nn import Linear, Params
from .resample import blend_matrices, crop_matrix, paste_blend, paste_matrix, to_grid

VARIANTS = ("baseline", "local", "global", "full")
SOURCES = ("plain", "local", "global", "fused")


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 8
    feature_dim: int = 16
    memory_dim: int = 32
    fc_width: int = 64
    crop: int = 7
    variant: str = "full"
    iterations: int = 3
    n_stacks: int = 3
    gru_candidate: str = "tanh"
    cross_feed: bool = True
    spatial_path: bool = True
    semantic_path: bool = True
    spatial_memory: bool = True
    global_memory: bool = True
    graph_reasoner: bool = True
    local_convs: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    @property
    def use_local(self) -> bool:
        return self.variant in ("local", "full") and self.iterations > 0

    @property
    def use_global(self) -> bool:
        return self.variant in ("global", "full") and self.iterations > 0


@dataclass
class LossConfig:
    beta: float = 0.5
    reweight: bool = True
    plain_weight: float = 1.0
    local_weight: float = 1.0
    global_weight: float = 1.0
    fused_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


@dataclass
class PredictionRecord:
    source: str
    iteration: int
    logits: Tensor
    attention: Tensor | None
    probs: np.ndarray


@dataclass
class RolloutState:
    iteration: int = 0
    spatial_memory: Tensor | None = None
    global_memory: Tensor | None = None
    records: list[PredictionRecord] = field(default_factory=list)
    fused: PredictionRecord | None = None

    def by_source(self, source: str) -> list[PredictionRecord]:
        return [r for r in self.records if r.source == source]

    def detached_probs(self) -> dict[tuple[str, int], np.ndarray]:
        return {(r.source, r.iteration): r.probs for r in self.records}


@dataclass
class SceneInput:
    """Everything about one scene that does not depend on parameters."""

    features: Tensor           # [H, W, Dh]
    boxes: list[Box]           # cell units
    crop: np.ndarray           # [R*k*k, H*W] stacked sampling matrices
    patches: np.ndarray        # [R, k, k, Dh] cropped features
    pooled: np.ndarray         # [R, Dh]
    blend: tuple[np.ndarray, np.ndarray]
    adjacency: np.ndarray      # [5, R, R]

    @property
    def n_regions(self) -> int:
        return len(self.boxes)

    @property
    def grid(self) -> tuple[int, int]:
        return self.features.shape[:2]


def prepare_scene(features: np.ndarray, boxes: Sequence[Box], scene_size: tuple[float, float],
                  crop: int = 7, kernel: KernelConfig | None = None) -> SceneInput:
    H, W, dh = features.shape
    grid = (H, W)
    cell_boxes = [to_grid(b, grid, scene_size) for b in boxes]
    r = len(boxes)
    if r:
        cmat = np.concatenate([crop_matrix(b, grid, (crop, crop)) for b in cell_boxes])
        patches = (cmat @ features.reshape(H * W, dh)).reshape(r, crop, crop, dh)
        cover = coverage_weights(boxes, grid, scene_size)
        paste = np.stack([paste_matrix(b, grid, (crop, crop)) for b in cell_boxes])
        blend = blend_matrices(cover, paste)
    else:
        cmat = np.zeros((0, H * W))
        patches = np.zeros((0, crop, crop, dh))
        blend = (np.zeros((H * W, 0)), np.tile([1.0, 1.0], (H * W, 1)))
    kernel = kernel or KernelConfig.for_scene(scene_size[1])
    adj = build_spatial_adjacency(list(boxes), kernel).stacked(SPATIAL_EDGE_TYPES)
    return SceneInput(Tensor(features), cell_boxes, cmat, patches, patches.mean(axis=(1, 2)), blend, adj)


class ReasoningNet:
    """All parameters of the plain head and the two reasoning modules."""

    def __init__(self, config: ModelConfig, graph: KnowledgeGraph | None = None):
        self.config = cfg = config
        self.params = Params(np.random.default_rng(cfg.seed))
        self.graph = prepare(graph) if graph is not None else None
        self.kg = self.graph.stacked() if self.graph is not None else np.zeros((0, cfg.n_classes, cfg.n_classes))
        if self.kg.shape[1:] != (cfg.n_classes, cfg.n_classes):
            raise ValueError(f"knowledge graph has {self.kg.shape[1]} classes, model expects {cfg.n_classes}")
        p, C, D, F, k = self.params, cfg.n_classes, cfg.memory_dim, cfg.fc_width, cfg.crop
        high = C + D

        self.plain_fc1 = Linear(p, "plain.fc1", k * k * cfg.feature_dim, F)
        self.plain_fc2 = Linear(p, "plain.fc2", F, F)
        self.plain_logits = Linear(p, "plain.logits", F, C, init="zeros")
        self.plain_attention = Linear(p, "plain.attention", F, 1, init="zeros")

        if cfg.use_local:
            self.local_fusion = InputFusion(p, "local.fusion", cfg.feature_dim, high, D)
            self.local_gru = GruCell.create(p, "local.gru", D, D, cfg.gru_candidate)
            if not cfg.spatial_memory:
                self.local_project = Linear(p, "local.project", cfg.feature_dim, D)
            self.local_net = LocalReasoner(p, "local.net", D, F, C, (k, k), cfg.local_convs)
            self.local_feed = Linear(p, "local.feed", F + D, D, init="glorot")
        if cfg.use_global:
            self.global_fusion1 = Linear(p, "global.fusion1", cfg.feature_dim + high, D)
            self.global_fusion2 = Linear(p, "global.fusion2", D, D, init="glorot")
            if cfg.global_memory:
                self.global_gru = GruCell.create(p, "global.gru", D, D, cfg.gru_candidate)
            if cfg.graph_reasoner:
                self.class_embed = p.new("global.class_embed", p.rng.normal(0.0, 1.0, size=(C, D)))
                self.stacks = [GraphStack(p, f"global.stack{s}", D, len(SPATIAL_EDGE_TYPES), self.kg.shape[0])
                               for s in range(cfg.n_stacks)]
            self.global_head = GlobalHead(p, "global.head", D, C)
            self.global_feed = Linear(p, "global.feed", F + D, D, init="glorot")

    # -- pieces of the roll-out ---------------------------------------------------
    def plain(self, scene: SceneInput) -> tuple[Tensor, Tensor]:
        x = Tensor(scene.patches.reshape(scene.n_regions, -1))
        feats = relu(self.plain_fc2(relu(self.plain_fc1(x))))
        return self.plain_logits(feats), self.plain_attention(feats).reshape(scene.n_regions)

    def local_step(self, scene: SceneInput, memory: Tensor, high: Tensor):
        cfg = self.config
        k = cfg.crop
        if cfg.spatial_memory:
            f_r = fuse_input_features(Tensor(scene.patches), high, self.local_fusion)
            H, W = scene.grid
            s_r = matmul(Tensor(scene.crop), memory.reshape(H * W, cfg.memory_dim))
            s_new = gru_write(s_r, f_r.reshape(-1, cfg.memory_dim), self.local_gru)
            memory = paste_blend(memory, s_new, *scene.blend)
            source = memory
        else:
            source = relu(self.local_project(scene.features.reshape(-1, cfg.feature_dim)))
            source = source.reshape(*scene.grid, cfg.memory_dim)
        logits, att, feats = local_predict(source, scene.boxes, self.local_net, scene.crop)
        return memory, logits, att, feats

    def global_step(self, scene: SceneInput, memory: Tensor, high: Tensor, p_assign: np.ndarray):
        cfg = self.config
        x = concat([Tensor(scene.pooled), high], axis=1)
        x = self.global_fusion2(relu(self.global_fusion1(x)))
        if cfg.global_memory:
            memory = global_memory_update(memory, x, self.global_gru)
            rows = memory
        else:
            rows = x
        if cfg.graph_reasoner:
            rows = reasoning_stack(rows, self.class_embed, scene.adjacency, assignment_adjacency(p_assign),
                                   self.kg, self.stacks, cfg.spatial_path, cfg.semantic_path)
        logits, att = global_predict(rows, self.global_head)
        return memory, logits, att, rows

    def rollout(self, scene: SceneInput, iterations: int | None = None, frozen=None) -> RolloutState:
        return rollout(scene, self, iterations, frozen)


def _probs(logits: Tensor) -> np.ndarray:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_feed(local_feat: Tensor, global_feat: Tensor, projection: Linear) -> Tensor:
    """Concatenate (local, global) row-wise and project back to the memory input width."""
    if local_feat.shape[0] != global_feat.shape[0]:
        from .autodiff import DimensionError
        raise DimensionError(f"cross-feed row mismatch: {local_feat.shape} vs {global_feat.shape}")
    return projection(concat([local_feat, global_feat], axis=1))


def rollout(scene: SceneInput, net: ReasoningNet, iterations: int | None = None,
            frozen: dict[tuple[str, int], np.ndarray] | None = None) -> RolloutState:
    """Plain prediction, then ``I`` rounds of local/global prediction with memory writes.

    The memories are written from the newest high-level features at the start
    of each round, so round 1 sees only the plain prediction and cross-fed
    features first influence round 2.

    Each record's ``probs`` is a constant (no gradient): it drives the
    assignment edges and the loss weights.  ``frozen`` maps ``(source,
    iteration)`` to probabilities that replace the computed ones, which lets a
    finite-difference check hold those constants fixed.
    """
    frozen = frozen or {}

    def probs(source, i, logits):
        return frozen[(source, i)] if (source, i) in frozen else _probs(logits)

    cfg = net.config
    n_iter = cfg.iterations if iterations is None else iterations
    R, C, D, F = scene.n_regions, cfg.n_classes, cfg.memory_dim, cfg.fc_width
    state = RolloutState()
    f0, a0 = net.plain(scene)
    p0 = probs("plain", 0, f0)
    state.records.append(PredictionRecord("plain", 0, f0, a0, p0))
    use_local = cfg.use_local and n_iter > 0
    use_global = cfg.use_global and n_iter > 0

    zeros_ctx = Tensor(np.zeros((R, D)))
    high_l = high_g = concat([f0, zeros_ctx], axis=1)
    p_assign = p0
    if use_local:
        state.spatial_memory = Tensor(np.zeros((*scene.grid, D)))
    if use_global:
        state.global_memory = Tensor(np.zeros((R, D)))

    for i in range(1, n_iter + 1):
        state.iteration = i
        feat_l = feat_g = None
        if use_local:
            state.spatial_memory, f_l, a_l, feat_l = net.local_step(scene, state.spatial_memory, high_l)
            state.records.append(PredictionRecord("local", i, f_l, a_l, probs("local", i, f_l)))
        if use_global:
            state.global_memory, f_g, a_g, feat_g = net.global_step(scene, state.global_memory, high_g, p_assign)
            p_assign = probs("global", i, f_g)
            state.records.append(PredictionRecord("global", i, f_g, a_g, p_assign))
        if i == n_iter:
            break
        zl = Tensor(np.zeros((R, F)))
        zg = zeros_ctx
        share = cfg.cross_feed
        if use_local:
            other = feat_g if (share and feat_g is not None) else zg
            high_l = concat([f_l, cross_feed(feat_l, other, net.local_feed)], axis=1)
        if use_global:
            other = feat_l if (share and feat_l is not None) else zl
            high_g = concat([f_g, cross_feed(other, feat_g, net.global_feed)], axis=1)

    state.fused = attention_fuse(state.records)
    return state


def fusion_weights(attentions: Sequence[Tensor]) -> Tensor:
    """``softmax(-a)`` across predictions, per region: ``[N, R]``."""
    return softmax(-stack(list(attentions), axis=0), axis=0)


def attention_fuse(records: Sequence[PredictionRecord]) -> PredictionRecord:
    if not records:
        raise ValueError("attention_fuse needs at least one prediction")
    if any(r.attention is None for r in records):
        raise ValueError("every fused prediction needs an attention value")
    w = fusion_weights([r.attention for r in records])
    logits = stack([r.logits for r in records], axis=0)
    n, R, C = logits.shape
    fused = (logits * w.reshape(n, R, 1)).sum(axis=0)
    return PredictionRecord("fused", records[-1].iteration, fused, None, _probs(fused))


def reweight(p_prev: np.ndarray, labels: np.ndarray, beta: float) -> np.ndarray:
    """Hard-example weights ``max(1 - p_prev(r), beta)`` normalised over regions.

    ``p_prev`` is ``[R, C]`` probabilities or the ``[R]`` ground-truth scores.
    """
    p_prev = np.asarray(p_prev, dtype=float)
    labels = np.asarray(labels)
    if p_prev.ndim == 2:
        if np.any(labels < 0) or np.any(labels >= p_prev.shape[1]):
            raise IndexError(f"labels out of range for {p_prev.shape[1]} classes")
        p_prev = p_prev[np.arange(len(labels)), labels]
    raw = np.maximum(1.0 - p_prev, beta)
    total = raw.sum()
    if total <= 0:
        return np.full(len(raw), 1.0 / len(raw))
    return raw / total


def nll(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-region negative log-likelihood ``[R]``."""
    labels = np.asarray(labels)
    C = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= C):
        raise IndexError(f"labels out of range for {C} classes")
    return -log_softmax(logits, axis=1)[np.arange(len(labels)), labels]


def reweighted_loss(p_prev: np.ndarray, logits_curr: Tensor, labels: np.ndarray, beta: float) -> Tensor:
    """Weighted NLL of the current logits; the weights are constants."""
    w = reweight(p_prev, labels, beta)
    return (nll(logits_curr, labels) * Tensor(w)).sum()


def mean_nll(logits: Tensor, labels: np.ndarray) -> Tensor:
    return nll(logits, labels).mean()


def loss_terms(state: RolloutState, labels: np.ndarray, cfg: LossConfig = LossConfig()) -> dict[str, Tensor]:
    """Named, already-weighted loss terms: plain, local_i, global_i and fused."""
    if state.fused is None:
        raise ValueError("roll-out state has no fused prediction")
    labels = np.asarray(labels)
    beta = cfg.beta if cfg.reweight else 1.0
    plain = state.by_source("plain")[0]
    terms = {"plain": mean_nll(plain.logits, labels) * cfg.plain_weight}
    for source, weight in (("local", cfg.local_weight), ("global", cfg.global_weight)):
        prev = plain.probs
        for rec in state.by_source(source):
            terms[f"{source}_{rec.iteration}"] = reweighted_loss(prev, rec.logits, labels, beta) * weight
            prev = rec.probs
    terms["fused"] = mean_nll(state.fused.logits, labels) * cfg.fused_weight
    return terms


def total_loss(state: RolloutState, labels: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    terms = list(loss_terms(state, labels, cfg).values())
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def with_flags(config: ModelConfig, **flags) -> ModelConfig:
    return dataclasses.replace(config, **flags)
