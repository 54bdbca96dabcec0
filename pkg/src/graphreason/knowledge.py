"""Class vocabulary and the multi-relational class-to-class knowledge graph.

Graphs are stored densely (one ``C x C`` matrix per edge type) and exchanged
as a UTF-8 TSV edge list::

    # comment lines start with '#'
    edge_type<TAB>src_class<TAB>dst_class<TAB>weight
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

# Named inverses; any other directed type T gets "T-inv".
INVERSE_NAMES = {
    "is-part-of": "has-part",
    "is-kind-of": "has-kind",
    "plural-form": "singular-form",
}
SYMMETRIC_TYPES = frozenset({"similarity"})


class GraphLoadError(ValueError):
    pass


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self._lookup[name]
        except KeyError:
            raise KeyError(f"unknown class {name!r}") from None

    @property
    def _lookup(self) -> dict[str, int]:
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = {n: i for i, n in enumerate(self.names)}
            object.__setattr__(self, "_cache", cache)
        return cache


def inverse_name(edge_type: str) -> str:
    if edge_type in INVERSE_NAMES:
        return INVERSE_NAMES[edge_type]
    for fwd, inv in INVERSE_NAMES.items():
        if edge_type == inv:
            return fwd
    if edge_type.endswith("-inv"):
        return edge_type[:-4]
    return f"{edge_type}-inv"


def default_directed(edge_type: str) -> bool:
    return edge_type not in SYMMETRIC_TYPES


@dataclass(frozen=True)
class KnowledgeGraph:
    """Edge type -> ``C x C`` non-negative adjacency, plus a directedness flag per type."""

    vocab: ClassVocabulary
    adjacency: dict[str, np.ndarray] = field(default_factory=dict)
    directed: dict[str, bool] = field(default_factory=dict)

    @property
    def edge_types(self) -> list[str]:
        return list(self.adjacency)

    @property
    def n_classes(self) -> int:
        return len(self.vocab)

    def stacked(self) -> np.ndarray:
        """All adjacencies as ``[T, C, C]`` in edge-type order."""
        if not self.adjacency:
            return np.zeros((0, self.n_classes, self.n_classes))
        return np.stack(list(self.adjacency.values()))

    def edges(self) -> list[tuple[str, str, str, float]]:
        out = []
        for t, a in self.adjacency.items():
            src, dst = np.nonzero(a)
            for s, d in zip(src, dst):
                if not self.directed.get(t, True) and d < s:
                    continue
                out.append((t, self.vocab.names[s], self.vocab.names[d], float(a[s, d])))
        return out


def from_edges(vocab: ClassVocabulary, edges: Iterable[tuple[str, str, str, float]],
               directed: Mapping[str, bool] | None = None) -> KnowledgeGraph:
    """Build a graph from ``(type, src, dst, weight)`` tuples; duplicates sum."""
    n = len(vocab)
    adjacency: dict[str, np.ndarray] = {}
    flags: dict[str, bool] = {}
    for t, s, d, w in edges:
        w = float(w)
        if w < 0:
            raise GraphLoadError(f"negative weight {w} on {t} edge {s}->{d}")
        if t not in adjacency:
            adjacency[t] = np.zeros((n, n))
            flags[t] = (directed or {}).get(t, default_directed(t))
        i, j = vocab.index(s), vocab.index(d)
        adjacency[t][i, j] += w
        if not flags[t] and i != j:
            adjacency[t][j, i] += w
    return KnowledgeGraph(vocab, adjacency, flags)


def load_graph(path: str | Path, vocab: ClassVocabulary,
               directed: Mapping[str, bool] | None = None) -> KnowledgeGraph:
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise GraphLoadError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            t, s, d, w = parts
            for name in (s, d):
                if name not in vocab._lookup:
                    raise GraphLoadError(f"{path}:{lineno}: unknown class {name!r}")
            try:
                weight = float(w)
            except ValueError:
                raise GraphLoadError(f"{path}:{lineno}: bad weight {w!r}") from None
            if weight < 0:
                raise GraphLoadError(f"{path}:{lineno}: negative weight {weight}")
            edges.append((t, s, d, weight))
    return from_edges(vocab, edges, directed)


def save_graph(graph: KnowledgeGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# edge_type\tsrc\tdst\tweight\n")
        for t, s, d, w in graph.edges():
            fh.write(f"{t}\t{s}\t{d}\t{w!r}\n")


def add_inverse_edges(graph: KnowledgeGraph) -> KnowledgeGraph:
    """Add the transposed type for every directed type that lacks one."""
    adjacency = dict(graph.adjacency)
    flags = dict(graph.directed)
    for t in graph.edge_types:
        if not flags[t]:
            continue
        inv = inverse_name(t)
        if inv not in adjacency:
            adjacency[inv] = graph.adjacency[t].T.copy()
            flags[inv] = True
    return dataclasses.replace(graph, adjacency=adjacency, directed=flags)


def row_normalize(graph: KnowledgeGraph, tol: float = 1e-12) -> KnowledgeGraph:
    """Divide each nonzero row by its sum.

    Rows already summing to 1 within ``tol`` are left bit-for-bit alone, which
    makes a second pass an exact no-op.
    """
    adjacency = {}
    for t, a in graph.adjacency.items():
        sums = a.sum(axis=1, keepdims=True)
        scale = (sums > 0) & (np.abs(sums - 1.0) > tol)
        adjacency[t] = np.divide(a, sums, out=a.copy(), where=scale)
    return dataclasses.replace(graph, adjacency=adjacency)


def validate(graph: KnowledgeGraph, vocab: ClassVocabulary | None = None,
             normalized: bool = True, tol: float = 1e-9) -> list[str]:
    """List invariant violations; an empty list means the graph is sound."""
    problems = []
    vocab = vocab or graph.vocab
    n = len(vocab)
    if graph.vocab.names != vocab.names:
        problems.append("graph vocabulary differs from the given vocabulary")
    for t, a in graph.adjacency.items():
        if a.shape != (n, n):
            problems.append(f"{t}: adjacency shape {a.shape} != ({n}, {n})")
            continue
        if np.any(a < 0):
            problems.append(f"{t}: negative weights")
        if normalized:
            sums = a.sum(axis=1)
            for row in np.nonzero((sums > 0) & (np.abs(sums - 1.0) > tol))[0]:
                problems.append(f"{t}: row {vocab.names[row]!r} sums to {sums[row]:.6g}, not 1")
        if graph.directed.get(t, True):
            inv = inverse_name(t)
            if inv not in graph.adjacency:
                problems.append(f"{t}: directed type without inverse {inv!r}")
            elif not np.array_equal(graph.adjacency[inv] > 0, a.T > 0):
                problems.append(f"{t}: inverse {inv!r} is not its transpose")
        elif not np.array_equal(a > 0, a.T > 0):
            problems.append(f"{t}: symmetric type has asymmetric support")
    return problems


def prepare(graph: KnowledgeGraph) -> KnowledgeGraph:
    """Inverse edges then row normalisation, the form the reasoning module consumes."""
    return row_normalize(add_inverse_edges(graph))


def edge_type_names(graphs: Sequence[KnowledgeGraph]) -> list[str]:
    seen: dict[str, None] = {}
    for g in graphs:
        seen.update(dict.fromkeys(g.edge_types))
    return list(seen)
