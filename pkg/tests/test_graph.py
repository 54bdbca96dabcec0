import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphreason.autodiff import Tensor, softmax
from graphreason.graph import (ContractError, GlobalHead, GraphStack, assignment_adjacency,
                               global_memory_update, global_predict, merge_paths, reasoning_stack, semantic_path,
                               spatial_path, stack_step)
from graphreason.local import GruCell
from graphreason.nn import Params

import oracles


def relu(x):
    return np.maximum(x, 0.0)


def random_probs(rng, r, c):
    z = rng.normal(size=(r, c))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_assignment_uniform():
    a = assignment_adjacency(np.full((3, 4), 0.25))
    assert np.all(a.region_to_class == 0.25)
    assert np.allclose(a.class_from_region, 1 / 3)


def test_assignment_single_region():
    a = assignment_adjacency(np.array([[0.5, 0.5, 0.0]]))
    assert a.class_from_region[:, 0].tolist() == [1.0, 1.0, 0.0]


def test_assignment_rejects_unnormalized():
    with pytest.raises(ContractError):
        assignment_adjacency(np.array([[0.5, 0.6]]))


@settings(max_examples=40)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 1000))
def test_assignment_row_sums(r, c, seed):
    p = random_probs(np.random.default_rng(seed), r, c)
    if c > 1:
        # an unused class leaves a zero row in the class-from-region matrix
        p[:, 0] = 0.0
        p /= p.sum(axis=1, keepdims=True)
    a = assignment_adjacency(p)
    assert np.all(np.abs(a.region_to_class.sum(axis=1) - 1) <= 1e-9)
    sums = a.class_from_region.sum(axis=1)
    assert np.all((np.abs(sums - 1) <= 1e-9) | (sums == 0))


def test_spatial_identity_case():
    m = np.random.default_rng(0).normal(size=(3, 4))
    out = spatial_path(Tensor(m), np.eye(3)[None], Tensor(np.eye(4)[None])).data
    assert np.array_equal(out, m)


def test_spatial_zero_adjacency():
    out = spatial_path(Tensor(np.ones((3, 2))), np.zeros((5, 3, 3)), Tensor(np.ones((5, 2, 2)))).data
    assert not out.any()


def test_spatial_two_region_hand_case():
    w = 0.4
    adj = np.zeros((2, 2, 2))
    adj[0, 0, 1] = w  # right-of: 0 -> 1
    adj[1, 1, 0] = w  # left-of: 1 -> 0
    m = np.array([[1.0, 2.0], [3.0, 5.0]])
    out = spatial_path(Tensor(m), adj, Tensor(np.stack([np.eye(2)] * 2))).data
    assert np.allclose(out, [[1.2, 2.0], [0.4, 0.8]], atol=1e-15)


@settings(max_examples=30)
@given(st.floats(-5, 5), st.integers(0, 1000))
def test_spatial_linear(alpha, seed):
    rng = np.random.default_rng(seed)
    m, adj, w = rng.normal(size=(4, 3)), rng.uniform(size=(5, 4, 4)), Tensor(rng.normal(size=(5, 3, 3)))
    a = spatial_path(Tensor(alpha * m), adj, w).data
    b = alpha * spatial_path(Tensor(m), adj, w).data
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_semantic_empty_graph_is_zero():
    rng = np.random.default_rng(1)
    assign = assignment_adjacency(random_probs(rng, 3, 4))
    w = Tensor(np.eye(2))
    out = semantic_path(Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(4, 2))), assign,
                        np.zeros((2, 4, 4)), w, w, Tensor(np.stack([np.eye(2)] * 2))).data
    assert out.shape == (4, 2) and not out.any()


def test_semantic_size_one_hand_case():
    m_r, m_c = np.array([[1.0, -3.0]]), np.array([[0.5, 1.0]])
    assign = assignment_adjacency(np.ones((1, 1)))
    eye = Tensor(np.eye(2))
    out = semantic_path(Tensor(m_r), Tensor(m_c), assign, np.ones((1, 1, 1)), eye, eye, Tensor(np.eye(2)[None])).data
    assert np.array_equal(out, relu(m_r + m_c))


@settings(max_examples=20)
@given(st.integers(1, 6), st.integers(0, 1000))
def test_semantic_shape_independent_of_regions(r, seed):
    rng = np.random.default_rng(seed)
    assign = assignment_adjacency(random_probs(rng, r, 3))
    w = Tensor(rng.normal(size=(2, 2)))
    out = semantic_path(Tensor(rng.normal(size=(r, 2))), Tensor(rng.normal(size=(3, 2))), assign,
                        rng.uniform(size=(2, 3, 3)), w, w, Tensor(rng.normal(size=(2, 2, 2))))
    assert out.shape == (3, 2)


def test_merge_cases():
    assign = assignment_adjacency(np.ones((1, 1)))
    eye = Tensor(np.eye(2))
    assert not merge_paths(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), assign, eye).data.any()
    g_s = np.array([[-1.0, 2.0]])
    assert np.array_equal(merge_paths(Tensor(g_s), Tensor(np.zeros((1, 2))), assign, eye).data, relu(g_s))
    g_c = np.array([[3.0, -4.0]])
    out = merge_paths(Tensor(g_s), Tensor(g_c), assign, eye).data
    assert np.array_equal(out, relu(g_s + relu(g_c)))


def make_stacks(seed, n, dim=3, n_sem=2):
    p = Params(np.random.default_rng(seed))
    return [GraphStack(p, f"s{k}", dim, 5, n_sem) for k in range(n)]


def problem(seed, r=4, c=3, d=3):
    rng = np.random.default_rng(seed)
    m_r, m_c = rng.normal(size=(r, d)), rng.normal(size=(c, d))
    adj = rng.uniform(size=(5, r, r)) * (1 - np.eye(r))
    kg = rng.uniform(size=(2, c, c))
    return m_r, m_c, adj, assignment_adjacency(random_probs(rng, r, c)), kg


def test_zero_weight_stacks_are_identity():
    m_r, m_c, adj, assign, kg = problem(2)
    stacks = make_stacks(0, 3)
    for s in stacks:
        for t in (s.w_spatial, s.w_rc, s.w_c, s.w_semantic, s.w_cr):
            t.data = np.zeros_like(t.data)
    out = reasoning_stack(Tensor(m_r), Tensor(m_c), adj, assign, kg, stacks).data
    assert np.array_equal(out, m_r)


def test_single_stack_matches_oracle_composition():
    m_r, m_c, adj, assign, kg = problem(3)
    [s] = make_stacks(1, 1)
    g_sp = sum(adj[e] @ m_r @ s.w_spatial.data[e] for e in range(5))
    hop = relu(assign.class_from_region @ m_r @ s.w_rc.data + m_c @ s.w_c.data)
    g_sem = sum(kg[t] @ hop @ s.w_semantic.data[t] for t in range(2))
    want = m_r + relu(g_sp + relu(assign.region_to_class @ g_sem @ s.w_cr.data))
    got = reasoning_stack(Tensor(m_r), Tensor(m_c), adj, assign, kg, [s]).data
    assert np.allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("n", [1, 3, 5])
def test_stack_output_shape(n):
    m_r, m_c, adj, assign, kg = problem(4)
    assert reasoning_stack(Tensor(m_r), Tensor(m_c), adj, assign, kg, make_stacks(2, n)).shape == m_r.shape


@settings(max_examples=20)
@given(st.permutations(range(4)), st.integers(0, 1000))
def test_region_permutation_equivariance(perm, seed):
    perm = np.array(perm)
    m_r, m_c, adj, assign, kg = problem(seed)
    p = assign.region_to_class
    stacks = make_stacks(seed, 2)
    base = reasoning_stack(Tensor(m_r), Tensor(m_c), adj, assign, kg, stacks).data
    moved = reasoning_stack(Tensor(m_r[perm]), Tensor(m_c), adj[:, perm][:, :, perm],
                            assignment_adjacency(p[perm]), kg, stacks).data
    assert np.allclose(moved, base[perm], atol=1e-10)
    s0 = stacks[0]
    sem = semantic_path(Tensor(m_r), Tensor(m_c), assign, kg, s0.w_rc, s0.w_c, s0.w_semantic).data
    sem_moved = semantic_path(Tensor(m_r[perm]), Tensor(m_c), assignment_adjacency(p[perm]), kg, s0.w_rc,
                              s0.w_c, s0.w_semantic).data
    assert np.allclose(sem, sem_moved, atol=1e-10)


def test_stack_step_path_switches():
    m_r, m_c, adj, assign, kg = problem(5)
    [s] = make_stacks(3, 1)
    only_sp = stack_step(Tensor(m_r), Tensor(m_c), adj, assign, kg, s, use_semantic=False).data
    g_sp = sum(adj[e] @ m_r @ s.w_spatial.data[e] for e in range(5))
    assert np.allclose(only_sp, relu(g_sp), atol=1e-12)


def make_cell(seed=0, dim=3):
    cell = GruCell.create(Params(np.random.default_rng(seed)), "g", dim, dim)
    cell.b.data = np.random.default_rng(seed + 1).normal(size=dim)
    return cell


def test_global_memory_identity_and_reduction():
    rng = np.random.default_rng(6)
    mem, x = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    cell = make_cell()
    assert np.array_equal(global_memory_update(Tensor(mem), Tensor(x), cell, update=1.0).data, mem)
    out = global_memory_update(Tensor(np.zeros((4, 3))), Tensor(x), cell, update=0.0, reset=0.0).data
    assert np.allclose(out, np.tanh(x @ cell.w_f.data + cell.b.data), atol=1e-14)


def test_global_memory_scalar_oracle():
    rng = np.random.default_rng(7)
    mem, x = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    cell = make_cell(seed=9)
    got = global_memory_update(Tensor(mem), Tensor(x), cell).data
    for r in range(4):
        want = oracles.gru_cell(x[r], mem[r], cell.w_gates.data, cell.b_gates.data, cell.w_f.data, cell.w_s.data,
                                cell.b.data)
        assert np.allclose(got[r], want, atol=1e-12)


def test_global_predict_uniform_and_permutation():
    head = GlobalHead(Params(np.random.default_rng(0)), "h", 3, 5)
    logits, att = global_predict(Tensor(np.zeros((4, 3))), head)
    assert np.allclose(softmax(logits, axis=1).data, 0.2) and att.shape == (4,)
    head.logits.w.data = np.random.default_rng(1).normal(size=(3, 5))
    rows = np.random.default_rng(2).normal(size=(4, 3))
    perm = [3, 1, 0, 2]
    a, _ = global_predict(Tensor(rows), head)
    b, _ = global_predict(Tensor(rows[perm]), head)
    assert np.array_equal(b.data, a.data[perm])

