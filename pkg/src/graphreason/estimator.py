"""A scikit-learn style front end: ``fit`` on scenes, ``predict`` region labels."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .geometry import Box
from .knowledge import KnowledgeGraph
from .metrics import MetricReport, aggregate
from .model import LossConfig, ModelConfig, ReasoningNet
from .synthetic import DropProtocol, SyntheticScene
from .train import evaluate, predict_scene, scene_input, train_network

_FLAGS = ("reweight", "cross_feed", "spatial_path", "semantic_path", "spatial_memory",
          "global_memory", "graph_reasoner", "local_convs")


def check_scenes(X, n_classes: int | None = None, require_labels: bool = False) -> list[SyntheticScene]:
    """Validate a scene list: feature grids are ``[H, W, D]`` and finite, boxes lie inside the scene."""
    if isinstance(X, SyntheticScene):
        raise TypeError("expected a sequence of scenes, got a single scene")
    scenes = list(X)
    if not scenes:
        raise ValueError("need at least one scene")
    dims = set()
    for s in scenes:
        if not isinstance(s, SyntheticScene):
            raise TypeError(f"expected SyntheticScene, got {type(s).__name__}")
        f = np.asarray(s.features)
        if f.ndim != 3 or not np.all(np.isfinite(f)):
            raise ValueError(f"scene {s.scene_id}: features must be a finite [H, W, D] grid")
        dims.add(f.shape[2])
        h, w = s.scene_size
        for b in s.boxes:
            b = Box(*b)
            if not (b.is_valid and b.x1 >= 0 and b.y1 >= 0 and b.x2 <= w and b.y2 <= h):
                raise ValueError(f"scene {s.scene_id}: box {tuple(b)} is degenerate or outside the scene")
        if require_labels:
            labels = np.asarray(s.labels)
            if labels.shape != (s.n_regions,):
                raise ValueError(f"scene {s.scene_id}: need one label per region")
            if n_classes is not None and (np.any(labels < 0) or np.any(labels >= n_classes)):
                raise ValueError(f"scene {s.scene_id}: label outside [0, {n_classes})")
    if len(dims) != 1:
        raise ValueError(f"scenes disagree on feature width: {sorted(dims)}")
    return scenes


class ReasoningClassifier(ClassifierMixin, BaseEstimator):
    """Region classifier with optional local (spatial memory) and global (graph) reasoning.

    ``X`` is a sequence of :class:`SyntheticScene`; labels are read from the
    scenes, so ``y`` is accepted only for API symmetry.  Predictions are the
    fused output, one row per region, concatenated over scenes.
    """

    def __init__(self, variant="full", n_classes=8, iterations=3, memory_dim=32, fc_width=64,
                 n_stacks=3, beta=0.5, learning_rate=1e-3, momentum=0.9, weight_decay=1e-4,
                 steps=2000, decay_step=1500, knowledge_graph=None, random_state=0,
                 reweight=True, cross_feed=True, spatial_path=True, semantic_path=True,
                 spatial_memory=True, global_memory=True, graph_reasoner=True, local_convs=True):
        self.variant = variant
        self.n_classes = n_classes
        self.iterations = iterations
        self.memory_dim = memory_dim
        self.fc_width = fc_width
        self.n_stacks = n_stacks
        self.beta = beta
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.steps = steps
        self.decay_step = decay_step
        self.knowledge_graph = knowledge_graph
        self.random_state = random_state
        self.reweight = reweight
        self.cross_feed = cross_feed
        self.spatial_path = spatial_path
        self.semantic_path = semantic_path
        self.spatial_memory = spatial_memory
        self.global_memory = global_memory
        self.graph_reasoner = graph_reasoner
        self.local_convs = local_convs

    def _model_config(self, feature_dim: int) -> ModelConfig:
        return ModelConfig(
            n_classes=self.n_classes, feature_dim=feature_dim, memory_dim=self.memory_dim,
            fc_width=self.fc_width, variant=self.variant, iterations=self.iterations,
            n_stacks=self.n_stacks, seed=self.random_state,
            **{k: getattr(self, k) for k in _FLAGS if k != "reweight"})

    def fit(self, X, y=None):
        scenes = check_scenes(X, self.n_classes, require_labels=True)
        if self.knowledge_graph is not None and not isinstance(self.knowledge_graph, KnowledgeGraph):
            raise TypeError("knowledge_graph must be a KnowledgeGraph or None")
        cfg = self._model_config(scenes[0].features.shape[2])
        result = train_network(cfg, LossConfig(beta=self.beta, reweight=self.reweight), scenes,
                               self.knowledge_graph, self.steps, self.learning_rate, self.momentum,
                               self.weight_decay, self.decay_step, self.random_state)
        self.net_ = result.net
        self.optimizer_ = result.optimizer
        self.training_log_ = result.log
        self.n_features_in_ = cfg.feature_dim
        self.classes_ = np.arange(self.n_classes)
        return self

    def _checked(self, X) -> list[SyntheticScene]:
        check_is_fitted(self, "net_")
        scenes = check_scenes(X)
        if scenes[0].features.shape[2] != self.n_features_in_:
            raise ValueError(f"scenes have {scenes[0].features.shape[2]} feature channels, "
                             f"model was fitted on {self.n_features_in_}")
        return scenes

    def predict_proba(self, X) -> np.ndarray:
        scenes = self._checked(X)
        rows = [predict_scene(self.net_, scene_input(s, self.net_.config.crop))
                for s in scenes if s.n_regions]
        return np.concatenate(rows) if rows else np.zeros((0, self.n_classes))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y=None, sample_weight=None) -> float:
        """Per-class accuracy (mean of per-class recall)."""
        return self.report(X).per_class_ac

    def report(self, X, protocol: DropProtocol | None = None, seed: int = 0) -> MetricReport:
        return evaluate(self.net_, self._checked(X), protocol, seed)

    @classmethod
    def from_network(cls, net: ReasoningNet, **params) -> "ReasoningClassifier":
        """Wrap an already trained network (e.g. a restored checkpoint)."""
        est = cls(variant=net.config.variant, n_classes=net.config.n_classes,
                  iterations=net.config.iterations, memory_dim=net.config.memory_dim,
                  fc_width=net.config.fc_width, n_stacks=net.config.n_stacks, **params)
        est.net_ = net
        est.n_features_in_ = net.config.feature_dim
        est.classes_ = np.arange(net.config.n_classes)
        return est


def labels_of(scenes: Sequence[SyntheticScene]) -> np.ndarray:
    return np.concatenate([np.asarray(s.labels) for s in scenes]) if scenes else np.zeros(0, dtype=int)


def score_report(estimator: ReasoningClassifier, scenes: Sequence[SyntheticScene]) -> MetricReport:
    return aggregate(estimator.predict_proba(scenes), labels_of(scenes), estimator.n_classes)
