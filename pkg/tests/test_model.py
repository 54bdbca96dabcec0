import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphreason import autodiff as ad
from graphreason.autodiff import DimensionError, Tensor
from graphreason.checks import tiny_problem
from graphreason.model import (LossConfig, ModelConfig, PredictionRecord, ReasoningNet, RolloutState, attention_fuse,
                               cross_feed, fusion_weights, loss_terms, reweight, reweighted_loss, total_loss,
                               with_flags)
from graphreason.nn import Linear, Params

import oracles


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@pytest.mark.parametrize("iterations,expected", [(0, 1), (1, 3), (3, 7)])
def test_rollout_record_count(iterations, expected):
    net, scene, _ = tiny_problem(np.random.default_rng(0), iterations=iterations)
    state = net.rollout(scene)
    assert len(state.records) == expected
    assert state.fused is not None and state.fused.attention is None
    for rec in state.records:
        assert np.all(np.abs(rec.probs.sum(axis=1) - 1) <= 1e-9)


@pytest.mark.parametrize("variant,sources", [("baseline", {"plain"}), ("local", {"plain", "local"}),
                                             ("global", {"plain", "global"}),
                                             ("full", {"plain", "local", "global"})])
def test_variant_sources(variant, sources):
    net, scene, _ = tiny_problem(np.random.default_rng(1), variant=variant, iterations=2)
    assert {r.source for r in net.rollout(scene).records} == sources


def _twin_without_cross_feed(net):
    twin = ReasoningNet(with_flags(net.config, cross_feed=False), net.graph)
    for name, t in net.params.items():
        twin.params[name].data = t.data.copy()
    return twin


def test_cross_feed_only_affects_later_iterations():
    net, scene, _ = tiny_problem(np.random.default_rng(2), iterations=3)
    twin = _twin_without_cross_feed(net)
    a, b = net.rollout(scene).records, twin.rollout(scene).records
    for ra, rb in zip(a, b):
        same = np.array_equal(ra.logits.data, rb.logits.data)
        assert same == (ra.iteration <= 1), (ra.source, ra.iteration)


def identity_feed(f, d):
    proj = Linear(Params(np.random.default_rng(0)), "p", f + d, f, init="zeros")
    proj.w.data[:f] = np.eye(f)
    return proj


def test_cross_feed_local_pass_through():
    local = np.random.default_rng(3).normal(size=(3, 4))
    out = cross_feed(Tensor(local), Tensor(np.zeros((3, 2))), identity_feed(4, 2)).data
    assert np.array_equal(out, local)


def test_cross_feed_order_matters():
    rng = np.random.default_rng(4)
    proj = Linear(Params(rng), "p", 6, 3)
    a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))
    ab, ba = cross_feed(a, b, proj), cross_feed(b, a, proj)
    assert ab.shape == (2, 3)
    assert not np.allclose(ab.data, ba.data)


def test_cross_feed_row_mismatch():
    with pytest.raises(DimensionError):
        cross_feed(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 2))), identity_feed(4, 2))


def record(logits, att, source="local", i=1):
    return PredictionRecord(source, i, Tensor(np.asarray(logits, float)), Tensor(np.asarray(att, float)),
                            np.zeros(np.shape(logits)))


def test_equal_attention_gives_mean():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(3, 2, 4))
    fused = attention_fuse([record(l, [0.7, -0.2]) for l in logits])
    assert np.allclose(fused.logits.data, logits.mean(axis=0), atol=1e-14)


def test_fusion_weights_two_records():
    w = fusion_weights([Tensor([0.0]), Tensor([math.log(3)])]).data[:, 0]
    assert np.allclose(w, [0.75, 0.25], atol=1e-15)


@settings(max_examples=40)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=7), st.floats(-50, 50))
def test_fusion_shift_invariance(atts, shift):
    a = [Tensor([x]) for x in atts]
    b = [Tensor([x + shift]) for x in atts]
    wa, wb = fusion_weights(a).data[:, 0], fusion_weights(b).data[:, 0]
    assert np.allclose(wa, wb, atol=1e-12)
    lowest = np.flatnonzero(np.array(atts) == min(atts))
    assert np.argmax(wa) in lowest and np.argmax(wb) in lowest


def test_fuse_errors():
    with pytest.raises(ValueError):
        attention_fuse([])
    with pytest.raises(ValueError):
        attention_fuse([PredictionRecord("plain", 0, Tensor(np.zeros((1, 2))), None, np.zeros((1, 2)))])


def test_reweight_examples():
    assert np.allclose(reweight(np.array([1.0, 0.2, 0.6]), None, 0.5), np.array([0.5, 0.8, 0.5]) / 1.8)
    assert np.array_equal(reweight(np.array([0.1, 0.9, 0.4, 0.0]), None, 1.0), np.full(4, 0.25))
    assert np.allclose(reweight(np.ones(5), None, 0.3), 0.2, rtol=0, atol=1e-15)


@settings(max_examples=40)
@given(st.integers(1, 6), st.integers(2, 5), st.floats(0, 1), st.integers(0, 1000))
def test_reweight_oracle(r, c, beta, seed):
    rng = np.random.default_rng(seed)
    p = np.exp(log_softmax(rng.normal(size=(r, c))))
    labels = rng.integers(0, c, size=r)
    got = reweight(p, labels, beta)
    assert np.allclose(got, oracles.reweight(p[np.arange(r), labels], beta), atol=1e-12)
    assert got.sum() == pytest.approx(1.0, abs=1e-12)


def test_reweight_label_range():
    with pytest.raises(IndexError):
        reweight(np.full((2, 3), 1 / 3), np.array([0, 3]), 0.5)


def test_beta_must_be_in_unit_interval():
    with pytest.raises(ValueError):
        LossConfig(beta=1.5)


def test_reweighted_loss_treats_weights_as_constants():
    rng = np.random.default_rng(6)
    labels = np.array([0, 2, 1])
    p_prev = np.exp(log_softmax(rng.normal(size=(3, 4))))
    z = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    ad.reset_tape()
    reweighted_loss(p_prev, z, labels, 0.5).backward()
    w = reweight(p_prev, labels, 0.5)
    onehot = np.eye(4)[labels]
    assert np.allclose(z.grad, w[:, None] * (np.exp(log_softmax(z.data)) - onehot), atol=1e-12)


def _state(logits_by_source, iterations):
    state = RolloutState()
    for (source, i), z in logits_by_source.items():
        z = np.asarray(z, float)
        state.records.append(PredictionRecord(source, i, Tensor(z), Tensor(np.zeros(len(z))),
                                              np.exp(log_softmax(z))))
    state.iteration = iterations
    state.fused = attention_fuse(state.records)
    return state


def test_certain_predictions_give_zero_loss():
    labels = np.array([1, 0])
    z = np.where(np.eye(3)[labels] > 0, 0.0, -1e4)
    state = _state({("plain", 0): z, ("local", 1): z, ("global", 1): z}, 1)
    assert total_loss(state, labels).data == pytest.approx(0.0, abs=1e-12)


def test_no_iterations_total_is_plain_plus_fused():
    net, scene, labels = tiny_problem(np.random.default_rng(7), iterations=0)
    state = net.rollout(scene)
    terms = loss_terms(state, labels)
    assert set(terms) == {"plain", "fused"}
    assert total_loss(state, labels).data == pytest.approx(terms["plain"].data + terms["fused"].data, abs=1e-14)


def test_total_loss_matches_per_term_oracle():
    net, scene, labels = tiny_problem(np.random.default_rng(8), iterations=2)
    cfg = LossConfig(beta=0.3, plain_weight=0.5, local_weight=2.0, global_weight=1.5, fused_weight=0.7)
    state = net.rollout(scene)
    rows = np.arange(len(labels))

    def nll(rec):
        return -log_softmax(rec.logits.data)[rows, labels]

    plain = state.by_source("plain")[0]
    want = 0.5 * nll(plain).mean() + 0.7 * nll(state.fused).mean()
    for source, weight in (("local", 2.0), ("global", 1.5)):
        prev = plain.probs[rows, labels]
        for rec in state.by_source(source):
            w = oracles.reweight(prev, 0.3)
            want += weight * float((w * nll(rec)).sum())
            prev = rec.probs[rows, labels]
    assert total_loss(state, labels, cfg).data == pytest.approx(want, rel=1e-12)
    assert set(loss_terms(state, labels, cfg)) == {"plain", "local_1", "local_2", "global_1", "global_2", "fused"}


def test_step_zero_loss_is_log_classes():
    net, scene, labels = tiny_problem(np.random.default_rng(9), iterations=2)
    fresh = ReasoningNet(net.config, net.graph)
    terms = loss_terms(fresh.rollout(scene), labels)
    for name, t in terms.items():
        assert float(t.data) == pytest.approx(math.log(4), abs=1e-12), name


def test_reweight_off_uses_uniform_weights():
    net, scene, labels = tiny_problem(np.random.default_rng(10), iterations=1)
    state = net.rollout(scene)
    off = loss_terms(state, labels, LossConfig(reweight=False))
    local = state.by_source("local")[0]
    want = -log_softmax(local.logits.data)[np.arange(3), labels].mean()
    assert float(off["local_1"].data) == pytest.approx(want, rel=1e-12)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(variant="other")
    with pytest.raises(ValueError):
        ModelConfig(iterations=-1)
