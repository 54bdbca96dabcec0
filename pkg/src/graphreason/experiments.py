"""Train-and-evaluate helpers for comparing variants across seeds."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .metrics import MetricReport
from .model import ReasoningNet
from .synthetic import Dataset, generate_dataset
from .train import evaluate, scene_input, train_network


@dataclass
class RunResult:
    config: ExperimentConfig
    net: ReasoningNet
    report: MetricReport
    seconds: float


def dataset_for(cfg: ExperimentConfig) -> Dataset:
    return generate_dataset(cfg.scene_spec(), cfg.n_scenes, cfg.data_seed, cfg.val_fraction, cfg.test_fraction)


def run(cfg: ExperimentConfig, ds: Dataset, inputs=None) -> RunResult:
    """Train ``cfg`` on the train split and report on ``cfg.eval_split``."""
    start = time.perf_counter()
    result = train_network(cfg.model_config(), cfg.loss_config(), ds["train"], ds.graph, cfg.steps,
                           cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.decay_step, cfg.seed,
                           log_every=0, inputs=inputs)
    report = evaluate(result.net, ds[cfg.eval_split], cfg.drop_protocol(), cfg.seed)
    return RunResult(cfg, result.net, report, time.perf_counter() - start)


def compare(base: ExperimentConfig, variants, seeds, ds: Dataset | None = None) -> dict[str, list[RunResult]]:
    """Every variant for every seed on one shared dataset."""
    ds = ds or dataset_for(base)
    inputs = [scene_input(s) for s in ds["train"]]
    return {v: [run(base.replace(variant=v, seed=s), ds, inputs) for s in seeds] for v in variants}


def mean_metric(results: list[RunResult], name: str = "per_class_ac") -> float:
    return float(np.mean([getattr(r.report, name) for r in results]))
