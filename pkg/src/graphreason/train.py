"""Training loop, checkpoints, evaluation under the missing-region protocol and δ sweeps."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import backward, no_grad, reset_tape
from .config import ExperimentConfig, parse_config
from .knowledge import KnowledgeGraph
from .metrics import METRIC_NAMES, MetricReport, aggregate
from .model import LossConfig, ModelConfig, ReasoningNet, SceneInput, fusion_weights, loss_terms, prepare_scene
from .optim import OptimizerState, sgd_step, zero_grad
from .synthetic import DropProtocol, SyntheticScene, drop_regions


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


SWEEP_HEADER = ["delta", "mode", "recall", *METRIC_NAMES]


def scene_input(scene: SyntheticScene, crop: int = 7) -> SceneInput:
    return prepare_scene(scene.features, scene.boxes, scene.scene_size, crop)


@dataclass
class TrainResult:
    net: ReasoningNet
    optimizer: OptimizerState
    step: int
    log: list[dict] = field(default_factory=list)
    snapshots: dict[int, dict] = field(default_factory=dict)


def _attention_summary(state) -> float:
    """Mean fusion weight of the plain prediction, a cheap view of what the fusion trusts."""
    atts = [r.attention for r in state.records]
    return float(fusion_weights(atts).data[0].mean())


def train_network(model_cfg: ModelConfig, loss_cfg: LossConfig, scenes: Sequence[SyntheticScene],
                  graph: KnowledgeGraph | None, steps: int, learning_rate: float, momentum: float = 0.9,
                  weight_decay: float = 1e-4, decay_step: int | None = None, seed: int = 0,
                  log_every: int = 100, on_decay: Callable[[TrainResult], None] | None = None,
                  inputs: Sequence[SceneInput] | None = None) -> TrainResult:
    """One scene per step, sampled with a seeded generator; one 0.1x decay at ``decay_step``."""
    if not scenes:
        raise TrainingError("no training scenes")
    net = ReasoningNet(model_cfg, graph)
    opt = OptimizerState(learning_rate=learning_rate, momentum=momentum, weight_decay=weight_decay)
    inputs = list(inputs) if inputs is not None else [scene_input(s, model_cfg.crop) for s in scenes]
    order = np.random.default_rng(np.random.SeedSequence([seed, 1])).integers(len(scenes), size=steps)
    result = TrainResult(net, opt, 0)
    for step, k in enumerate(order):
        if decay_step is not None and step == decay_step:
            opt.learning_rate *= 0.1
            if on_decay is not None:
                on_decay(result)
        reset_tape()
        state = net.rollout(inputs[k])
        terms = loss_terms(state, scenes[k].labels, loss_cfg)
        loss = sum(terms.values(), start=0.0)
        value = float(loss.data)
        if not math.isfinite(value):
            bad = [name for name, t in terms.items() if not math.isfinite(float(t.data))]
            raise TrainingError(f"non-finite loss {value} at step {step} (scene {scenes[k].scene_id}, "
                                f"terms {bad}); lower the learning rate")
        backward(loss)
        for p in net.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        sgd_step(net.params, opt)
        zero_grad(net.params)
        result.step = step + 1
        if log_every and (step % log_every == 0 or step == steps - 1):
            row = {"step": step, "loss": value, "lr": opt.learning_rate,
                   "plain_weight": _attention_summary(state)}
            row.update({k: float(t.data) for k, t in terms.items()})
            result.log.append(row)
    return result


def format_log(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    keys = list(dict.fromkeys(k for r in rows for k in r))
    out = io.StringIO()
    w = csv.DictWriter(out, keys, delimiter="\t", lineterminator="\n", restval="")
    w.writeheader()
    w.writerows(rows)
    return out.getvalue()


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path: str | Path, net: ReasoningNet, optimizer: OptimizerState, step: int,
                    config: ExperimentConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": p.data for k, p in net.params.items()}
    arrays.update({f"velocity/{k}": v for k, v in optimizer.velocity.items()})
    arrays["step"] = np.array(step)
    arrays["learning_rate"] = np.array(optimizer.learning_rate)
    arrays["digest"] = np.array(config.digest())
    arrays["config"] = np.array(config.to_text())
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    step: int
    learning_rate: float
    digest: str
    config: ExperimentConfig


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
        velocity = {k[9:]: z[k] for k in z.files if k.startswith("velocity/")}
        return Checkpoint(params, velocity, int(z["step"]), float(z["learning_rate"]),
                          str(z["digest"]), parse_config(str(z["config"])))


def restore(checkpoint: Checkpoint, config: ExperimentConfig, graph: KnowledgeGraph | None) -> ReasoningNet:
    """Rebuild the network for ``config``; refuses a checkpoint trained under another config."""
    if checkpoint.digest != config.digest():
        raise CheckpointError(f"checkpoint digest {checkpoint.digest} does not match config digest "
                              f"{config.digest()}; refusing to mix them")
    net = ReasoningNet(config.model_config(), graph)
    if set(net.params) != set(checkpoint.params):
        raise CheckpointError("checkpoint parameter names do not match the model")
    for k, p in net.params.items():
        if p.data.shape != checkpoint.params[k].shape:
            raise CheckpointError(f"shape mismatch for {k}")
        p.data = checkpoint.params[k].copy()
    return net


# -- evaluation -------------------------------------------------------------------

def predict_scene(net: ReasoningNet, inp: SceneInput) -> np.ndarray:
    with no_grad():
        return net.rollout(inp).fused.probs


def evaluate(net: ReasoningNet, scenes: Sequence[SyntheticScene], protocol: DropProtocol | None = None,
             seed: int = 0, inputs: Sequence[SceneInput] | None = None,
             cache: dict | None = None) -> MetricReport:
    """Fused predictions on every scene, optionally under the missing-region protocol.

    ``pre`` removes the dropped regions before the roll-out; ``post`` runs on
    all regions and drops them from the scoring only.  Proposals are seeded
    per scene, so every δ sees the same proposals.  ``cache`` memoises full-scene
    predictions across calls with the same network.
    """
    scores, labels = [], []
    kept_total = total = 0
    for idx, scene in enumerate(scenes):
        keep = np.arange(scene.n_regions)
        if protocol is not None:
            keep, _ = drop_regions(scene, protocol, seed=seed * 1_000_003 + idx)
        kept_total += len(keep)
        total += scene.n_regions
        if len(keep) == 0:
            continue
        if protocol is not None and protocol.mode == "pre" and len(keep) < scene.n_regions:
            sub = scene.subset(keep)
            probs = predict_scene(net, scene_input(sub, net.config.crop))
        else:
            if cache is not None and idx in cache:
                probs = cache[idx]
            else:
                inp = inputs[idx] if inputs is not None else scene_input(scene, net.config.crop)
                probs = predict_scene(net, inp)
                if cache is not None:
                    cache[idx] = probs
            probs = probs[keep]
        scores.append(probs)
        labels.append(scene.labels[keep])
    recall = kept_total / total if total else 1.0
    if not scores:
        nan = float("nan")
        return MetricReport(nan, nan, nan, nan, recall=recall)
    report = aggregate(np.concatenate(scores), np.concatenate(labels), net.config.n_classes)
    if protocol is not None:
        report.recall = recall
    return report


def sweep(net: ReasoningNet, scenes: Sequence[SyntheticScene], deltas: Sequence[float],
          modes: Sequence[str] = ("pre", "post"), jitter: float = 0.2, proposals: int = 3,
          seed: int = 0) -> list[dict]:
    rows = []
    cache: dict = {}
    inputs = [scene_input(s, net.config.crop) for s in scenes]
    for mode in modes:
        for delta in deltas:
            proto = DropProtocol(delta=delta, jitter=jitter, proposals_per_box=proposals, mode=mode)
            rep = evaluate(net, scenes, proto, seed, inputs, cache)
            rows.append({"delta": delta, "mode": mode, "recall": rep.recall, **rep.values()})
    return rows


def format_sweep(rows: Sequence[dict]) -> str:
    out = io.StringIO()
    w = csv.DictWriter(out, SWEEP_HEADER, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return out.getvalue()
