"""Average precision and accuracy, aggregated per instance and per class."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


METRIC_NAMES = ("per_instance_ap", "per_instance_ac", "per_class_ap", "per_class_ac")


def average_precision(scores, positives) -> float:
    """All-points AP with the precision envelope.

    Ranks by descending score; equal scores keep their input order.  Returns
    ``nan`` when there is no positive.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    positives = np.asarray(positives, dtype=bool).ravel()
    if scores.shape != positives.shape:
        raise MetricError(f"{scores.size} scores for {positives.size} flags")
    n_pos = int(positives.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # a correctly rounded sum makes the result independent of summation order
    return math.fsum(envelope[hits]) / n_pos


@dataclass
class MetricReport:
    per_instance_ap: float
    per_instance_ac: float
    per_class_ap: float
    per_class_ac: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)
    n_instances: int = 0
    recall: float | None = None

    def values(self) -> dict[str, float]:
        out = {k: getattr(self, k) for k in METRIC_NAMES}
        if self.recall is not None:
            out["recall"] = self.recall
        return out

    def lines(self) -> str:
        """One ``name<TAB>value`` line per metric."""
        return "".join(f"{k}\t{v!r}\n" for k, v in self.values().items())

    def text(self, class_names=None) -> str:
        rows = [f"{k} = {v:.4f}" for k, v in self.values().items()]
        rows.append(f"instances = {self.n_instances}")
        for c, d in sorted(self.per_class.items()):
            name = class_names[c] if class_names is not None else str(c)
            rows.append(f"class {name}: n={int(d['count'])} ap={d['ap']:.4f} ac={d['ac']:.4f}")
        return "\n".join(rows) + "\n"


def parse_lines(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            name, value = line.split("\t")
            out[name] = float(value)
    return out


def predicted_labels(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; the lowest index wins ties."""
    return np.argmax(scores, axis=1)


def aggregate(scores, labels, n_classes: int | None = None) -> MetricReport:
    """Report over ``[R, C]`` scores.  Classes without instances are left out of the class means."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int).ravel()
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise MetricError(f"need a non-empty [R, C] score matrix, got {scores.shape}")
    if scores.shape[0] != labels.size:
        raise MetricError(f"{scores.shape[0]} score rows for {labels.size} labels")
    n_classes = scores.shape[1] if n_classes is None else n_classes
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise MetricError("label out of range")
    onehot = labels[:, None] == np.arange(scores.shape[1])[None, :]
    pred = predicted_labels(scores)
    correct = pred == labels

    per_class = {}
    for c in np.unique(labels):
        mask = labels == c
        per_class[int(c)] = {"count": float(mask.sum()),
                             "ap": average_precision(scores[:, c], mask),
                             "ac": float(correct[mask].mean())}
    return MetricReport(
        per_instance_ap=average_precision(scores.ravel(), onehot.ravel()),
        per_instance_ac=int(correct.sum()) / labels.size,
        per_class_ap=math.fsum(d["ap"] for d in per_class.values()) / len(per_class),
        per_class_ac=math.fsum(d["ac"] for d in per_class.values()) / len(per_class),
        per_class=per_class,
        n_instances=int(labels.size),
    )
