import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphreason.knowledge import (ClassVocabulary, GraphLoadError, KnowledgeGraph, add_inverse_edges,
                                   from_edges, load_graph, prepare, row_normalize, save_graph, validate)

VOCAB = ClassVocabulary(("leg", "chair", "table", "seat"))


def write(tmp_path, text):
    p = tmp_path / "kg.tsv"
    p.write_text(text, encoding="utf-8")
    return p


def test_vocabulary_unique_and_indexed():
    assert VOCAB.index("table") == 2 and len(VOCAB) == 4
    with pytest.raises(ValueError):
        ClassVocabulary(("a", "a"))
    with pytest.raises(KeyError):
        VOCAB.index("lamp")


def test_empty_file(tmp_path):
    g = load_graph(write(tmp_path, "# nothing here\n"), VOCAB)
    assert g.edge_types == []


def test_duplicates_sum(tmp_path):
    g = load_graph(write(tmp_path, "is-part-of\tleg\tchair\t1\nis-part-of\tleg\tchair\t2\n"), VOCAB)
    assert g.adjacency["is-part-of"][0, 1] == 3.0


def test_unknown_class_cites_line(tmp_path):
    with pytest.raises(GraphLoadError, match=":2:"):
        load_graph(write(tmp_path, "is-part-of\tleg\tchair\t1\nis-part-of\tlamp\tchair\t1\n"), VOCAB)


def test_negative_weight(tmp_path):
    with pytest.raises(GraphLoadError, match="negative"):
        load_graph(write(tmp_path, "is-part-of\tleg\tchair\t-1\n"), VOCAB)


def test_round_trip_exact(tmp_path):
    g = from_edges(VOCAB, [("is-part-of", "leg", "chair", 0.1 + 0.2), ("similarity", "chair", "seat", 1 / 3),
                           ("is-kind-of", "seat", "chair", 2.5)])
    save_graph(g, tmp_path / "out.tsv")
    back = load_graph(tmp_path / "out.tsv", VOCAB)
    assert back.edge_types == g.edge_types
    for t in g.edge_types:
        assert np.array_equal(back.adjacency[t], g.adjacency[t])
        assert back.directed[t] == g.directed[t]


def test_inverse_part_of():
    g = add_inverse_edges(from_edges(VOCAB, [("is-part-of", "leg", "chair", 0.7)]))
    assert g.adjacency["has-part"][1, 0] == 0.7


def test_symmetric_type_not_inverted():
    g = from_edges(VOCAB, [("similarity", "chair", "seat", 1.0)])
    assert add_inverse_edges(g).edge_types == ["similarity"]
    assert g.adjacency["similarity"][3, 1] == 1.0


def test_two_directed_types_become_four():
    g = from_edges(VOCAB, [("is-part-of", "leg", "chair", 1.0), ("spatial-near", "chair", "table", 1.0)])
    out = add_inverse_edges(g)
    assert len(out.edge_types) == 4
    assert "spatial-near-inv" in out.edge_types


def test_inversion_is_idempotent():
    g = add_inverse_edges(from_edges(VOCAB, [("is-part-of", "leg", "chair", 1.0)]))
    assert add_inverse_edges(g).edge_types == g.edge_types


def _graph_with_rows(*rows):
    a = np.array(rows, dtype=float)
    vocab = ClassVocabulary(tuple(f"c{i}" for i in range(a.shape[0])))
    return KnowledgeGraph(vocab, {"t": a}, {"t": True})


def test_row_normalize_examples():
    g = row_normalize(_graph_with_rows([2, 2, 0, 0], [0, 0, 0, 0], [1, 3, 0, 0], [0, 0, 0, 5]))
    a = g.adjacency["t"]
    assert a[0].tolist() == [0.5, 0.5, 0, 0]
    assert a[1].tolist() == [0, 0, 0, 0]
    assert a[2].tolist() == [0.25, 0.75, 0, 0]


@settings(max_examples=40)
@given(st.lists(st.lists(st.floats(0, 10), min_size=4, max_size=4), min_size=4, max_size=4))
def test_row_normalize_idempotent_and_sums(rows):
    once = row_normalize(_graph_with_rows(*rows))
    twice = row_normalize(once)
    assert np.array_equal(once.adjacency["t"], twice.adjacency["t"])
    sums = once.adjacency["t"].sum(axis=1)
    assert np.all((sums == 0) | (np.abs(sums - 1) < 1e-9))


def test_validate_clean_graph():
    g = prepare(from_edges(VOCAB, [("is-part-of", "leg", "chair", 2.0), ("is-part-of", "seat", "chair", 1.0),
                                   ("similarity", "chair", "seat", 1.0)]))
    assert validate(g, VOCAB) == []


def test_validate_bad_row_sum():
    a = np.zeros((4, 4))
    a[1, 2], a[1, 3] = 1.0, 0.5
    g = KnowledgeGraph(VOCAB, {"similarity": a + a.T}, {"similarity": False})
    problems = validate(g, VOCAB)
    assert len([p for p in problems if "sums to" in p and "'chair'" in p]) == 1


def test_validate_missing_inverse():
    g = row_normalize(from_edges(VOCAB, [("is-part-of", "leg", "chair", 1.0)]))
    problems = validate(g, VOCAB)
    assert len(problems) == 1 and "inverse" in problems[0]
