"""Global reasoning over region and class nodes.

Per stack::

    G_spatial  = sum_e A_e M_r W_e                              (region graph)
    G_semantic = sum_t K_t relu(Q M_r W_rc + M_c W_c) W_t       (knowledge graph)
    G_r        = relu(G_spatial + relu(P G_semantic W_cr))

with ``P`` the ``R x C`` soft-max assignment and ``Q`` its transpose
normalised over regions.  Edge-type sums run as one matmul against the
concatenated adjacencies.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import DimensionError, Tensor, matmul, relu
from .geometry import SPATIAL_EDGE_TYPES, SpatialAdjacency
from .nn import Linear, Params


class ContractError(ValueError):
    pass


@dataclass
class AssignmentEdges:
    """``region_to_class`` is ``p`` itself ``[R, C]``; ``class_from_region`` is
    ``p.T`` with each class row normalised over regions ``[C, R]``."""

    region_to_class: np.ndarray
    class_from_region: np.ndarray


def assignment_adjacency(p: np.ndarray, tol: float = 1e-6) -> AssignmentEdges:
    p = np.asarray(p, dtype=float)
    if p.ndim != 2:
        raise DimensionError(f"assignment scores must be [R, C], got {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > tol):
        raise ContractError("assignment scores must be soft-max rows summing to 1")
    pt = p.T
    mass = pt.sum(axis=1, keepdims=True)
    q = np.divide(pt, mass, out=np.zeros_like(pt), where=mass > 0)
    return AssignmentEdges(p, q)


def _edge_sum(adj: np.ndarray, x: Tensor, weights: Tensor) -> Tensor:
    """``sum_e adj[e] @ x @ weights[e]`` for ``adj [E, N, M]``, ``x [M, D]``, ``weights [E, D, D']``."""
    n_types, n_out, n_in = adj.shape
    d_in, d_out = weights.shape[1], weights.shape[2]
    if x.shape != (n_in, d_in) or weights.shape[0] != n_types:
        raise DimensionError(f"edge sum: adj {adj.shape}, x {x.shape}, weights {weights.shape}")
    xw = matmul(x, weights.transpose(1, 0, 2).reshape(d_in, n_types * d_out))
    xw = xw.reshape(n_in, n_types, d_out).transpose(1, 0, 2).reshape(n_types * n_in, d_out)
    cat = adj.transpose(1, 0, 2).reshape(n_out, n_types * n_in)
    return matmul(Tensor(cat), xw)


def _as_stack(adj) -> np.ndarray:
    if isinstance(adj, SpatialAdjacency):
        return adj.stacked(SPATIAL_EDGE_TYPES)
    return np.asarray(adj, dtype=float)


def spatial_path(m_r: Tensor, adj, weights: Tensor) -> Tensor:
    """``sum_e A_e M_r W_e``; ``adj`` is a :class:`SpatialAdjacency` or ``[E, R, R]``."""
    adj = _as_stack(adj)
    if adj.shape[0] == 0:
        return Tensor(np.zeros((m_r.shape[0], weights.shape[2])))
    return _edge_sum(adj, m_r, weights)


def semantic_path(m_r: Tensor, m_c: Tensor, assign: AssignmentEdges, kg: np.ndarray,
                  w_rc: Tensor, w_c: Tensor, w_types: Tensor) -> Tensor:
    """Class-space features ``[C, D]``; ``kg`` is the stacked ``[T, C, C]`` knowledge graph."""
    kg = np.asarray(kg, dtype=float)
    n_classes = m_c.shape[0]
    if assign.class_from_region.shape != (n_classes, m_r.shape[0]):
        raise DimensionError(f"assignment {assign.class_from_region.shape} vs "
                             f"{n_classes} classes / {m_r.shape[0]} regions")
    if kg.shape[0] == 0 or not np.any(kg):
        return Tensor(np.zeros((n_classes, w_types.shape[2] if w_types.ndim == 3 else m_c.shape[1])))
    hop = relu(matmul(matmul(Tensor(assign.class_from_region), m_r), w_rc) + matmul(m_c, w_c))
    return _edge_sum(kg, hop, w_types)


def merge_paths(g_spatial: Tensor, g_semantic: Tensor, assign: AssignmentEdges, w_cr: Tensor) -> Tensor:
    back = relu(matmul(matmul(Tensor(assign.region_to_class), g_semantic), w_cr))
    return relu(g_spatial + back)


class GraphStack:
    """Weights of one reasoning stack; no sharing across stacks or edge types."""

    def __init__(self, params: Params, name: str, dim: int, n_spatial: int, n_semantic: int):
        rng = params.rng
        scale = np.sqrt(1.0 / dim)

        def mat(key, *shape):
            return params.new(f"{name}.{key}", rng.normal(0.0, scale, size=shape))

        self.w_spatial = mat("w_spatial", n_spatial, dim, dim)
        self.w_rc = mat("w_rc", dim, dim)
        self.w_c = mat("w_c", dim, dim)
        self.w_semantic = mat("w_semantic", max(n_semantic, 1), dim, dim)
        self.w_cr = mat("w_cr", dim, dim)


def stack_step(m_r: Tensor, m_c: Tensor, adj: np.ndarray, assign: AssignmentEdges, kg: np.ndarray,
               stack: GraphStack, use_spatial: bool = True, use_semantic: bool = True) -> Tensor:
    """One stack's ``G_r`` (before the residual add)."""
    zeros = Tensor(np.zeros(m_r.shape))
    g_sp = spatial_path(m_r, adj, stack.w_spatial) if use_spatial else zeros
    if use_semantic and kg.shape[0]:
        g_sem = semantic_path(m_r, m_c, assign, kg, stack.w_rc, stack.w_c, stack.w_semantic)
    else:
        g_sem = Tensor(np.zeros((m_c.shape[0], m_r.shape[1])))
    return merge_paths(g_sp, g_sem, assign, stack.w_cr)


def reasoning_stack(m_r: Tensor, m_c: Tensor, adj, assign: AssignmentEdges, kg: np.ndarray,
                    stacks: Sequence[GraphStack], use_spatial: bool = True,
                    use_semantic: bool = True) -> Tensor:
    """Residual stacks: ``M <- M + G_r(M)`` for each stack in turn."""
    adj = _as_stack(adj)
    kg = np.asarray(kg, dtype=float).reshape(-1, m_c.shape[0], m_c.shape[0])
    for stack in stacks:
        m_r = m_r + stack_step(m_r, m_c, adj, assign, kg, stack, use_spatial, use_semantic)
    return m_r


class GlobalHead:
    def __init__(self, params: Params, name: str, dim: int, n_classes: int):
        self.logits = Linear(params, f"{name}.logits", dim, n_classes, init="zeros")
        self.attention = Linear(params, f"{name}.attention", dim, 1, init="zeros")


def global_predict(rows: Tensor, head: GlobalHead) -> tuple[Tensor, Tensor]:
    """Row-wise linear heads: logits ``[R, C]`` and attention ``[R]``."""
    return head.logits(rows), head.attention(rows).reshape(rows.shape[0])


def global_memory_update(memory: Tensor, fused: Tensor, cell, update=None, reset=None) -> Tensor:
    """Per-region GRU write of the ``[R, D]`` vector memory."""
    if memory.shape[0] != fused.shape[0]:
        raise DimensionError(f"memory rows {memory.shape[0]} != input rows {fused.shape[0]}")
    return cell(fused, memory, update, reset)
