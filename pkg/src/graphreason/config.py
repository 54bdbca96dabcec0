"""Experiment configuration: a flat ``key = value`` text file.

Unknown keys are errors so a mistyped ablation flag can never be silently
ignored.  The digest covers every key that changes the trained weights.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .model import VARIANTS, LossConfig, ModelConfig
from .synthetic import DropProtocol, SceneSpec


class ConfigError(ValueError):
    pass


# flag -> module the flag belongs to
ABLATION_FLAGS = {
    "reweight": None,
    "cross_feed": "both",
    "spatial_path": "global",
    "semantic_path": "global",
    "spatial_memory": "local",
    "global_memory": "global",
    "graph_reasoner": "global",
    "local_convs": "local",
}

# keys that do not influence the trained parameters
_RUN_KEYS = {"data_dir", "drop_delta", "drop_jitter", "drop_proposals", "drop_mode", "sweep_deltas",
             "log_every", "gradcheck_seeds", "gradcheck_corrupt", "eval_split"}


@dataclass
class ExperimentConfig:
    # model
    variant: str = "full"
    iterations: int = 3
    memory_dim: int = 32
    feature_dim: int = 16
    fc_width: int = 64
    n_stacks: int = 3
    gru_candidate: str = "tanh"
    # ablations; False severs the pathway
    reweight: bool = True
    cross_feed: bool = True
    spatial_path: bool = True
    semantic_path: bool = True
    spatial_memory: bool = True
    global_memory: bool = True
    graph_reasoner: bool = True
    local_convs: bool = True
    # loss and optimiser
    beta: float = 0.5
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps: int = 2000
    decay_step: int = 1500
    seed: int = 0
    # data
    n_classes: int = 8
    ambiguity: float = 0.5
    n_scenes: int = 600
    test_fraction: float = 1 / 6
    val_fraction: float = 0.0
    data_seed: int = 0
    data_dir: str = ""
    eval_split: str = "test"
    # missing-region protocol
    drop_delta: float = -1.0
    drop_jitter: float = 0.2
    drop_proposals: int = 3
    drop_mode: str = "post"
    sweep_deltas: str = "0,0.3,0.5,0.8,0.9"
    # misc
    log_every: int = 100
    gradcheck_seeds: int = 10
    gradcheck_corrupt: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        has = {"local": self.variant in ("local", "full"), "global": self.variant in ("global", "full")}
        has["both"] = has["local"] and has["global"]
        for flag, module in ABLATION_FLAGS.items():
            if not getattr(self, flag) and module is not None and not has[module]:
                raise ConfigError(f"disabling {flag!r} is meaningless for variant {self.variant!r}")
        if not self.reweight and self.variant == "baseline":
            raise ConfigError("disabling 'reweight' is meaningless for variant 'baseline'")
        if self.steps < 0 or self.iterations < 0:
            raise ConfigError("steps and iterations must be non-negative")
        if self.drop_mode not in ("pre", "post"):
            raise ConfigError(f"drop_mode must be 'pre' or 'post', got {self.drop_mode!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")

    # -- derived configs ------------------------------------------------------------
    def scene_spec(self) -> SceneSpec:
        return SceneSpec(n_classes=self.n_classes, feature_dim=self.feature_dim, ambiguity=self.ambiguity)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_classes=self.n_classes, feature_dim=self.feature_dim, memory_dim=self.memory_dim,
            fc_width=self.fc_width, variant=self.variant, iterations=self.iterations,
            n_stacks=self.n_stacks, gru_candidate=self.gru_candidate, cross_feed=self.cross_feed,
            spatial_path=self.spatial_path, semantic_path=self.semantic_path,
            spatial_memory=self.spatial_memory, global_memory=self.global_memory,
            graph_reasoner=self.graph_reasoner, local_convs=self.local_convs, seed=self.seed)

    def loss_config(self) -> LossConfig:
        return LossConfig(beta=self.beta, reweight=self.reweight)

    def drop_protocol(self, delta: float | None = None, mode: str | None = None) -> DropProtocol | None:
        delta = self.drop_delta if delta is None else delta
        if delta < 0:
            return None
        return DropProtocol(delta=delta, jitter=self.drop_jitter, proposals_per_box=self.drop_proposals,
                            mode=mode or self.drop_mode)

    def deltas(self) -> list[float]:
        return [float(x) for x in self.sweep_deltas.split(",") if x.strip()]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        keys = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in _RUN_KEYS}
        return hashlib.sha256(json.dumps(keys, sort_keys=True).encode()).hexdigest()[:16]

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, kind, key: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config(text: str, **overrides) -> ExperimentConfig:
    kinds = {f.name: _TYPES[f.type] for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse(raw, kinds[key], key)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path: str | Path | None, **overrides) -> ExperimentConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, **overrides)
