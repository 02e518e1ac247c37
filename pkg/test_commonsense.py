#!/usr/bin/env python3
"""
测试 TSV 解析与常识图编译
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# 添加项目路径
sys.path.insert(0, str(Path(__file__).parent))

from gbnet.commonsense import (
    CONDITIONAL_FAMILIES, GRAPH_MAGIC, assemble, compile_conditional_edges, read_graph, summarize, write_graph,
)
from gbnet.errors import (
    FormatError, InputError, MissingEmbeddingError, ParseError, SignatureError, UniquenessError, VocabularyError,
)
from gbnet.graph_core import BACKGROUND_LABEL, NodeKind
from gbnet.tsv_parser import (
    OntologyEdgeRecord, load_embeddings, load_label_list, load_ontology_edges, load_triplet_counts,
)


def _write(tmp_path: Path, name: str, text: str) -> Path:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _embeddings(labels, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return {label: rng.normal(size=dim) for label in labels}


# ========== TSV ==========

def test_ontology_single_record(tmp_path):
    records = load_ontology_edges(_write(tmp_path, "o.tsv", "hand\tPartOf\tperson\t1.0\n"))
    assert records == [OntologyEdgeRecord("hand", "PartOf", "person", 1.0, 1)]


def test_ontology_empty_and_comments(tmp_path):
    assert load_ontology_edges(_write(tmp_path, "empty.tsv", "")) == []
    assert load_ontology_edges(_write(tmp_path, "c.tsv", "# src\trel\tdst\n\n")) == []


def test_ontology_unknown_relation(tmp_path):
    with pytest.raises(VocabularyError) as info:
        load_ontology_edges(_write(tmp_path, "bad.tsv", "# header\na\tFoo\tb\t1.0\n"))
    assert info.value.line_no == 2
    assert info.value.exit_code == 2


def test_ontology_bad_weight_and_columns(tmp_path):
    with pytest.raises(ParseError) as info:
        load_ontology_edges(_write(tmp_path, "w.tsv", "a\tIsA\tb\t1.5\n"))
    assert info.value.line_no == 1
    with pytest.raises(ParseError):
        load_ontology_edges(_write(tmp_path, "cols.tsv", "a\tIsA\n"))


def test_ontology_default_weight_and_unknown_labels(tmp_path):
    path = _write(tmp_path, "o.tsv", "a\tIsA\tb\nx\tIsA\tb\t0.5\n")
    records = load_ontology_edges(path, known_labels={"a", "b"})
    assert [(r.src_label, r.weight) for r in records] == [("a", 1.0)]


def test_label_list_and_counts(tmp_path):
    assert load_label_list(_write(tmp_path, "l.txt", "# labels\ncat\n\ndog\n")) == ["cat", "dog"]
    counts = load_triplet_counts(_write(tmp_path, "t.tsv", "cat\ton\tmat\t2\ncat\ton\tmat\t1\n"))
    assert counts == {("cat", "on", "mat"): 3}
    with pytest.raises(ParseError):
        load_triplet_counts(_write(tmp_path, "neg.tsv", "cat\ton\tmat\t-1\n"))


def test_embeddings_dimension_check(tmp_path):
    table = load_embeddings(_write(tmp_path, "e.tsv", "cat\t1,2,3\ndog\t0.5,0,1\n"))
    assert table["cat"].tolist() == [1.0, 2.0, 3.0]
    with pytest.raises(ParseError):
        load_embeddings(_write(tmp_path, "bad.tsv", "cat\t1,2,3\ndog\t1,2\n"))


# ========== 条件概率边 ==========

def _edge_weight(edges, relation, src, dst):
    matches = [e.weight for e in edges if (e.relation, e.src_label, e.dst_label) == (relation, src, dst)]
    assert len(matches) == 1
    return matches[0]


def test_conditional_marginalization():
    edges = compile_conditional_edges({("A", "p", "B"): 3, ("C", "p", "B"): 1})
    assert _edge_weight(edges, "subjectGivenPredicate", "p", "A") == pytest.approx(0.75)
    assert _edge_weight(edges, "subjectGivenPredicate", "p", "C") == pytest.approx(0.25)
    assert _edge_weight(edges, "predicateGivenObject", "B", "p") == pytest.approx(1.0)


def test_conditional_single_triplet():
    edges = compile_conditional_edges({("A", "p", "B"): 1})
    assert len(edges) == 6
    assert all(e.weight == 1.0 for e in edges)
    kinds = {e.relation: (e.src_kind, e.dst_kind) for e in edges}
    assert kinds["subjectGivenPredicate"] == (NodeKind.CP, NodeKind.CE)
    assert kinds["predicateGivenSubject"] == (NodeKind.CE, NodeKind.CP)
    assert kinds["objectGivenSubject"] == (NodeKind.CE, NodeKind.CE)


def test_conditional_omits_unobserved_subjects():
    edges = compile_conditional_edges({("A", "p", "B"): 2})
    assert not [e for e in edges if e.relation == "predicateGivenSubject" and e.src_label == "B"]


def test_conditional_rows_normalized():
    """100 张随机计数表：六族条件边每个源类别的出权重和为 1"""
    rng = np.random.default_rng(5)
    families = {name for name, _, _ in CONDITIONAL_FAMILIES}
    for _ in range(100):
        n_entity, n_predicate = int(rng.integers(1, 8)), int(rng.integers(1, 6))
        counts = {
            (f"e{rng.integers(n_entity)}", f"p{rng.integers(n_predicate)}", f"e{rng.integers(n_entity)}"):
                int(rng.integers(1, 10_000))
            for _ in range(int(rng.integers(1, 60)))
        }
        totals = {}
        for e in compile_conditional_edges(counts):
            key = (e.relation, e.src_label)
            totals[key] = totals.get(key, 0.0) + e.weight
        assert {relation for relation, _ in totals} == families
        assert max(abs(v - 1.0) for v in totals.values()) <= 1e-9


def test_conditional_empty():
    with pytest.raises(InputError):
        compile_conditional_edges({})


# ========== 组装 ==========

def test_assemble_counts_with_background():
    entities = [f"ent{i:03d}" for i in range(150)]
    predicates = [f"pred{i:02d}" for i in range(50)]
    graph = assemble(entities, predicates, [], [], _embeddings(entities + predicates))
    assert graph.n_entity_classes == 151
    assert graph.n_predicate_classes == 51
    assert summarize(graph)["CE"] == 151 and summarize(graph)["CP"] == 51
    assert len(graph.graph.edges) == 0
    assert graph.entity_labels[0] == BACKGROUND_LABEL
    assert not graph.entity_embeddings[0].any()


def test_assemble_routes_cp_isa():
    entities, predicates = ["cat", "dog"], ["on", "above"]
    ontology = [OntologyEdgeRecord("on", "IsA", "above", 1.0, 1)]
    graph = assemble(entities, predicates, ontology, [], _embeddings(entities + predicates))
    assert summarize(graph)["CP->CP"] == 1
    edge = graph.graph.edges[0]
    assert graph.graph.node(edge.src).label == "on"
    assert graph.graph.node(edge.dst).label == "above"


def test_assemble_sorted_local_order():
    graph = assemble(["zebra", "ant"], ["on"], [], [], _embeddings(["zebra", "ant", "on"]))
    assert graph.entity_labels == [BACKGROUND_LABEL, "ant", "zebra"]
    assert graph.predicate_labels == [BACKGROUND_LABEL, "on"]


def test_assemble_errors():
    labels = ["cat", "dog", "on"]
    with pytest.raises(MissingEmbeddingError) as info:
        assemble(["cat", "dog"], ["on"], [], [], _embeddings(["cat", "on"]))
    assert info.value.label == "dog"
    with pytest.raises(UniquenessError):
        assemble(["cat", "cat"], ["on"], [], [], _embeddings(labels))
    with pytest.raises(InputError):
        assemble(["cat"], ["on"], [OntologyEdgeRecord("cat", "IsA", "bird", 1.0, 7)], [], _embeddings(labels))


def test_assemble_signature_error():
    from gbnet.commonsense import LabeledEdge
    bad = LabeledEdge("cat", NodeKind.CP, "on", NodeKind.CP, "IsA", 1.0)
    with pytest.raises(SignatureError):
        assemble(["cat"], ["on"], [], [bad], _embeddings(["cat", "on"]))


def test_assemble_deduplicates():
    entities, predicates = ["cat", "dog"], ["on"]
    ontology = [
        OntologyEdgeRecord("cat", "SimilarTo", "dog", 0.5, 1),
        OntologyEdgeRecord("cat", "SimilarTo", "dog", 0.5, 2),
    ]
    graph = assemble(entities, predicates, ontology, [], _embeddings(entities + predicates))
    assert len(graph.graph.edges) == 1


# ========== GBKG 文件 ==========

def test_graph_file_roundtrip(tmp_path):
    entities, predicates = ["cat", "dog"], ["on", "near"]
    conditional = compile_conditional_edges({("cat", "on", "dog"): 2, ("dog", "near", "cat"): 1})
    ontology = [OntologyEdgeRecord("cat", "SimilarTo", "dog", 0.25, 1)]
    graph = assemble(entities, predicates, ontology, conditional, _embeddings(entities + predicates))
    path = tmp_path / "kg.gbkg"
    write_graph(graph, path)
    assert path.read_text(encoding="utf-8").splitlines()[0] == GRAPH_MAGIC

    loaded = read_graph(path)
    assert loaded.entity_labels == graph.entity_labels
    assert loaded.predicate_labels == graph.predicate_labels
    assert np.array_equal(loaded.entity_embeddings, graph.entity_embeddings)
    assert [(e.src, e.dst, e.etype, e.weight) for e in loaded.graph.edges] == \
           [(e.src, e.dst, e.etype, e.weight) for e in graph.graph.edges]


def test_graph_file_errors(tmp_path):
    with pytest.raises(FormatError):
        read_graph(_write(tmp_path, "bad.gbkg", "GBKG 2\n"))
    with pytest.raises(ParseError) as info:
        read_graph(_write(tmp_path, "line.gbkg", "GBKG 1\nNODE 0 CE __background__\nNODE x CE cat\n"))
    assert info.value.line_no == 3
