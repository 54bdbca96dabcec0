"""The finite-difference suite: every differentiable operation plus the end-to-end loss."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Box, KernelConfig, build_spatial_adjacency
from .gradcheck import GradCheckReport, finite_diff_check
from .graph import (GlobalHead, GraphStack, assignment_adjacency, global_memory_update, global_predict,
                    merge_paths, reasoning_stack, semantic_path, spatial_path)
from .knowledge import ClassVocabulary, from_edges
from .local import GruCell, InputFusion, LocalReasoner, fuse_input_features, gru_write, local_predict
from .model import ModelConfig, PredictionRecord, ReasoningNet, attention_fuse, cross_feed, \
    prepare_scene, reweighted_loss, total_loss
from .nn import Linear, Params
from .resample import crop_and_resize, paste_back
from .geometry import coverage_weights

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _positive(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(0.5, 2.0, size=shape), requires_grad=True)


def _probe(rng, out_shape) -> np.ndarray:
    # contract every output with a fixed random tensor so each output coordinate matters
    return rng.normal(size=out_shape)


def _scalarize(fn, rng, shape):
    w = Tensor(_probe(rng, shape))
    return lambda: (fn() * w).sum()


def _unary_case(op):
    def case(rng):
        x = _leaf(rng, 3, 4)
        return _scalarize(lambda: op(x), rng, (3, 4)), {"x": x}
    return case


def _binary_case(op, positive_b=False, shapes=((3, 4), (3, 4))):
    def case(rng):
        a = _leaf(rng, *shapes[0])
        b = _positive(rng, *shapes[1]) if positive_b else _leaf(rng, *shapes[1])
        out = op(a, b).shape
        return _scalarize(lambda: op(a, b), rng, out), {"a": a, "b": b}
    return case


def _take_case(rng):
    x = _leaf(rng, 4, 5)
    idx = (np.array([0, 2, 2, 3]), np.array([1, 1, 4, 0]))
    return _scalarize(lambda: x[idx], rng, (4,)), {"x": x}


def _concat_case(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    return _scalarize(lambda: ad.concat([a, b], axis=1), rng, (2, 5)), {"a": a, "b": b}


def _stack_case(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
    return _scalarize(lambda: ad.stack([a, b], axis=0), rng, (2, 2, 3)), {"a": a, "b": b}


def _reduce_case(rng):
    x = _leaf(rng, 3, 4)
    return lambda: x.sum(axis=0).mean() + x.mean(axis=1).sum() * 0.5, {"x": x}


def _shape_case(rng):
    x = _leaf(rng, 2, 3, 4)
    return _scalarize(lambda: x.transpose(2, 0, 1).reshape(4, 6), rng, (4, 6)), {"x": x}


def _broadcast_case(rng):
    x = _leaf(rng, 1, 4)
    return _scalarize(lambda: x.broadcast_to((3, 4)), rng, (3, 4)), {"x": x}


def _xent_case(rng):
    x = _leaf(rng, 3, 4)
    return lambda: ad.softmax_xent(x, np.array([0, 3, 1]))[1].sum(), {"x": x}


def _conv_case(rng):
    x, k, b = _leaf(rng, 5, 4, 2), _leaf(rng, 3, 3, 2, 3), _leaf(rng, 3)
    return _scalarize(lambda: ad.conv2d(x, k, b), rng, (5, 4, 3)), {"x": x, "kernel": k, "bias": b}


def _crop_case(rng):
    fmap = _leaf(rng, 6, 5, 2)
    box = Box(0.7, 1.2, 4.1, 5.3)
    return _scalarize(lambda: crop_and_resize(fmap, box, (3, 3)), rng, (3, 3, 2)), {"fmap": fmap}


def _paste_case(rng):
    memory = _leaf(rng, 6, 6, 2)
    p1, p2 = _leaf(rng, 3, 3, 2), _leaf(rng, 3, 3, 2)
    scene_boxes = [Box(8, 8, 40, 56), Box(24, 16, 88, 72)]
    cover = coverage_weights(scene_boxes, (6, 6), (96.0, 96.0))
    grid_boxes = [b.scaled(1 / 16, 1 / 16) for b in scene_boxes]
    return (_scalarize(lambda: paste_back(memory, list(zip(grid_boxes, (p1, p2))), cover), rng, (6, 6, 2)),
            {"memory": memory, "patch0": p1, "patch1": p2})


def _gru_case(rng):
    params = Params(rng)
    cell = GruCell.create(params, "gru", 3, 4)
    s, f = _leaf(rng, 2, 2, 4), _leaf(rng, 2, 2, 3)
    return _scalarize(lambda: gru_write(s, f, cell), rng, (2, 2, 4)), {**params, "s": s, "f": f}


def _fusion_case(rng):
    params = Params(rng)
    fusion = InputFusion(params, "fuse", 2, 3, 4)
    h, f = _leaf(rng, 2, 3, 3, 2), _leaf(rng, 2, 3)
    return _scalarize(lambda: fuse_input_features(h, f, fusion), rng, (2, 3, 3, 4)), {**params, "h": h, "f": f}


def _local_predict_case(rng):
    params = Params(rng)
    net = LocalReasoner(params, "local", 2, 5, 3, pool=(2, 2))
    _off_zero(params, rng)
    memory = _leaf(rng, 5, 5, 2)
    boxes = [Box(0.5, 0.5, 3.0, 4.0), Box(2.0, 1.0, 5.0, 3.5)]

    def f():
        logits, att, _ = local_predict(memory, boxes, net)
        return (logits * Tensor(w1)).sum() + (att * Tensor(w2)).sum()
    w1, w2 = rng.normal(size=(2, 3)), rng.normal(size=2)
    return f, {**params, "memory": memory}


def _graph_inputs(rng, n_regions=3, n_classes=4, dim=3):
    boxes = [Box(0, 0, 10, 10), Box(14, 2, 24, 12), Box(4, 16, 16, 26)][:n_regions]
    adj = build_spatial_adjacency(boxes, KernelConfig(bandwidth=20.0)).stacked()
    logits = rng.normal(size=(n_regions, n_classes))
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    kg = rng.uniform(0, 1, size=(2, n_classes, n_classes)) * (rng.uniform(size=(2, n_classes, n_classes)) < 0.5)
    return adj, assignment_adjacency(p), kg


def _spatial_case(rng):
    adj, _, _ = _graph_inputs(rng)
    m, w = _leaf(rng, 3, 3), _leaf(rng, 5, 3, 3)
    return _scalarize(lambda: spatial_path(m, adj, w), rng, (3, 3)), {"m_r": m, "w": w}


def _semantic_case(rng):
    _, assign, kg = _graph_inputs(rng)
    m_r, m_c = _leaf(rng, 3, 3), _leaf(rng, 4, 3)
    w_rc, w_c, w_t = _leaf(rng, 3, 3), _leaf(rng, 3, 3), _leaf(rng, 2, 3, 3)
    fn = lambda: semantic_path(m_r, m_c, assign, kg, w_rc, w_c, w_t)
    return _scalarize(fn, rng, (4, 3)), {"m_r": m_r, "m_c": m_c, "w_rc": w_rc, "w_c": w_c, "w_types": w_t}


def _merge_case(rng):
    _, assign, _ = _graph_inputs(rng)
    g_sp, g_sem, w = _leaf(rng, 3, 3), _leaf(rng, 4, 3), _leaf(rng, 3, 3)
    return _scalarize(lambda: merge_paths(g_sp, g_sem, assign, w), rng, (3, 3)), \
        {"g_spatial": g_sp, "g_semantic": g_sem, "w_cr": w}


def _stack_module_case(rng):
    adj, assign, kg = _graph_inputs(rng)
    params = Params(rng)
    stacks = [GraphStack(params, f"s{i}", 3, 5, 2) for i in range(2)]
    m_r, m_c = _leaf(rng, 3, 3), _leaf(rng, 4, 3)
    fn = lambda: reasoning_stack(m_r, m_c, adj, assign, kg, stacks)
    return _scalarize(fn, rng, (3, 3)), {**params, "m_r": m_r, "m_c": m_c}


def _global_case(rng):
    params = Params(rng)
    cell = GruCell.create(params, "gru", 3, 4)
    head = GlobalHead(params, "head", 4, 3)
    head.attention.w.data = rng.normal(size=head.attention.w.shape)
    memory, x = _leaf(rng, 3, 4), _leaf(rng, 3, 3)
    w1, w2 = rng.normal(size=(3, 3)), rng.normal(size=3)

    def f():
        logits, att = global_predict(global_memory_update(memory, x, cell), head)
        return (logits * Tensor(w1)).sum() + (att * Tensor(w2)).sum()
    return f, {**params, "memory": memory, "x": x}


def _cross_feed_case(rng):
    params = Params(rng)
    proj = Linear(params, "feed", 5, 3, init="glorot")
    lf, gf = _leaf(rng, 3, 2), _leaf(rng, 3, 3)
    return _scalarize(lambda: cross_feed(lf, gf, proj), rng, (3, 3)), {**params, "local": lf, "global": gf}


def _fuse_case(rng):
    logits = [_leaf(rng, 3, 4) for _ in range(3)]
    atts = [_leaf(rng, 3) for _ in range(3)]
    recs = [PredictionRecord("plain", 0, f, a, np.zeros((3, 4))) for f, a in zip(logits, atts)]
    leaves = {f"logits{i}": t for i, t in enumerate(logits)} | {f"att{i}": t for i, t in enumerate(atts)}
    return _scalarize(lambda: attention_fuse(recs).logits, rng, (3, 4)), leaves


def _reweight_case(rng):
    logits = _leaf(rng, 3, 4)
    p_prev = rng.dirichlet(np.ones(4), size=3)
    return lambda: reweighted_loss(p_prev, logits, np.array([1, 0, 3]), 0.5), {"logits": logits}


def _off_zero(params, rng) -> None:
    # zero-initialised biases put ReLU inputs exactly on the kink; probe a generic point instead
    for p in params.values():
        if not np.any(p.data):
            p.data = rng.normal(0.0, 0.3, size=p.shape)


def tiny_problem(rng, variant: str = "full", iterations: int = 1):
    """A 3-region, 4-class scene with a small full model: ``(net, scene input, labels)``."""
    names = ["a", "b", "c", "d"]
    vocab = ClassVocabulary(names)
    graph = from_edges(vocab, [("is-part-of", "a", "c", 1.0), ("similarity", "b", "d", 0.5)])
    cfg = ModelConfig(n_classes=4, feature_dim=2, memory_dim=3, fc_width=4, crop=2, variant=variant,
                      iterations=iterations, n_stacks=2, seed=int(rng.integers(1 << 30)))
    net = ReasoningNet(cfg, graph)
    _off_zero(net.params, rng)
    boxes = [Box(0, 0, 48, 32), Box(32, 16, 80, 64), Box(8, 48, 56, 96)]
    scene = prepare_scene(rng.normal(size=(6, 6, 2)), boxes, (96.0, 96.0), crop=2)
    return net, scene, np.array([0, 2, 3])


def _total_loss_case(rng):
    net, scene, labels = tiny_problem(rng)
    # soft-max scores feed the assignment edges and loss weights as constants; pin them
    # so the finite differences see the same function the reverse sweep differentiates
    with ad.no_grad():
        frozen = net.rollout(scene).detached_probs()
    return lambda: total_loss(net.rollout(scene, frozen=frozen), labels), dict(net.params)


CASES: dict[str, Case] = {
    "add": _binary_case(lambda a, b: a + b, shapes=((3, 4), (4,))),
    "sub": _binary_case(lambda a, b: a - b),
    "mul": _binary_case(lambda a, b: a * b, shapes=((3, 4), (3, 1))),
    "div": _binary_case(lambda a, b: a / b, positive_b=True),
    "matmul": _binary_case(lambda a, b: a @ b, shapes=((3, 4), (4, 2))),
    "neg": _unary_case(lambda x: -x),
    "exp": _unary_case(ad.Tensor.exp),
    "log": lambda rng: (lambda x: (_scalarize(lambda: x.log(), rng, (3, 4)), {"x": x}))(_positive(rng, 3, 4)),
    "relu": _unary_case(ad.relu),
    "sigmoid": _unary_case(ad.sigmoid),
    "tanh": _unary_case(ad.tanh),
    "softmax": _unary_case(lambda x: ad.softmax(x, axis=1)),
    "log_softmax": _unary_case(lambda x: ad.log_softmax(x, axis=1)),
    "softmax_xent": _xent_case,
    "sum_mean": _reduce_case,
    "reshape_transpose": _shape_case,
    "broadcast_to": _broadcast_case,
    "take": _take_case,
    "concat": _concat_case,
    "stack": _stack_case,
    "conv2d": _conv_case,
    "crop_and_resize": _crop_case,
    "paste_back": _paste_case,
    "gru_write": _gru_case,
    "fuse_input_features": _fusion_case,
    "local_predict": _local_predict_case,
    "spatial_path": _spatial_case,
    "semantic_path": _semantic_case,
    "merge_paths": _merge_case,
    "reasoning_stack": _stack_module_case,
    "global_memory_update": _global_case,
    "cross_feed": _cross_feed_case,
    "attention_fuse": _fuse_case,
    "reweighted_loss": _reweight_case,
    "total_loss": _total_loss_case,
}


def run_case(name: str, seed: int, corrupt: bool = False, tol: float = 1e-4,
             max_coords: int | None = 4) -> GradCheckReport:
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(name)] + [ord(c) for c in name]))
    fn, leaves = CASES[name](rng)
    analytic = None
    if corrupt:
        # the test hook: pretend the adjoint returned a slightly wrong gradient
        ad.reset_tape()
        for p in leaves.values():
            p.grad = None
        ad.backward(fn())
        analytic = {k: (0.0 if p.grad is None else p.grad) * 1.01 + 1e-3 for k, p in leaves.items()}
    return finite_diff_check(fn, leaves, name=f"{name}[seed={seed}]", tol=tol, max_coords=max_coords,
                             rng=rng, analytic=analytic)


def gradient_suite(seeds: Iterable[int] = range(10), names: Iterable[str] | None = None,
                   corrupt: str = "", max_coords: int | None = 4) -> list[GradCheckReport]:
    """One report per operation, carrying the worst error over all seeds."""
    seeds = list(seeds)
    out = []
    for name in (names or CASES):
        reports = [run_case(name, s, corrupt == name, max_coords=max_coords) for s in seeds]
        worst = max(reports, key=lambda r: r.max_rel_error)
        out.append(GradCheckReport(name, worst.max_rel_error, sum(r.n_coords for r in reports),
                                   worst.tol, f"{worst.name}:{worst.worst}"))
    return out
