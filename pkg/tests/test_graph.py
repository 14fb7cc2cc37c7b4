import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_graph
from oracles import floyd_warshall_tokens
from hopgraph.errors import ValidationError
from hopgraph.graph import (
    EntityNode,
    PredicateNode,
    SceneGraph,
    add_skip_edges,
    build_sequence,
    compute_distance_matrix,
    graph_diameter_visual,
    graph_from_dict,
    graph_to_dict,
)
from hopgraph.schemas import validate


def test_small_graph_distances(small_graph):
    seq = build_sequence(small_graph, [5, 6])
    d = compute_distance_matrix(seq, add_skip_edges(small_graph)).d
    # tokens: CLS t t SEP man horse rope ride hold
    man, horse, rope, ride, hold = range(4, 9)
    assert d[man, horse] == 1  # skip edge
    assert d[ride, man] == 1
    assert d[ride, rope] == 2  # ride - man|... - rope via the entity clique
    assert d[ride, hold] == 2  # both touch the man
    assert d[0, ride] == 1 and d[1, 2] == 1
    assert (np.diag(d) == 1).all()
    assert (d == d.T).all()


@given(st.integers(0, 2**32 - 1))
def test_distance_matches_floyd_warshall(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng)
    text = rng.integers(0, 9, size=int(rng.integers(0, 4)))
    seq = build_sequence(g, text)
    d = compute_distance_matrix(seq, add_skip_edges(g))
    np.testing.assert_array_equal(d.d, floyd_warshall_tokens(g, seq))


def test_isolated_predicate_gets_sentinel():
    f = np.zeros(2)
    g = SceneGraph([EntityNode(0, (0, 0, 0.5, 0.5), f)], [PredicateNode(0, (0, 0, 1, 1), f)], [])
    seq = build_sequence(g)
    d = compute_distance_matrix(seq, add_skip_edges(g))
    assert d.unreachable == seq.n + 1
    assert d.d[2, 3] == seq.n + 1 and d.d[3, 3] == 1
    with pytest.raises(ValidationError):
        compute_distance_matrix(seq, add_skip_edges(g), unreachable_sentinel=0)


def test_diameter_with_skip_edges(small_graph):
    assert graph_diameter_visual(add_skip_edges(small_graph)) == 2


def test_union_box_must_contain_endpoints():
    f = np.zeros(2)
    ents = [EntityNode(0, (0, 0, 0.2, 0.2), f), EntityNode(1, (0.8, 0.8, 1, 1), f)]
    with pytest.raises(ValidationError, match="does not contain"):
        SceneGraph(ents, [PredicateNode(0, (0, 0, 0.5, 0.5), f)], [(0, 0, 1)])


@pytest.mark.parametrize("box", [(0.5, 0, 0.4, 1), (0, 0, 1.2, 1), (0, 0, float("nan"), 1)])
def test_bad_boxes_rejected(box):
    with pytest.raises(ValidationError):
        EntityNode(0, box, np.zeros(2))


def test_dangling_triplet_rejected():
    f = np.zeros(2)
    with pytest.raises(ValidationError):
        SceneGraph([EntityNode(0, (0, 0, 1, 1), f)], [PredicateNode(0, (0, 0, 1, 1), f)], [(0, 0, 3)])


def test_feature_dim_check(small_graph):
    small_graph.validate(feature_dim=4)
    with pytest.raises(ValidationError, match="feature length"):
        small_graph.validate(feature_dim=8)


def test_round_trip_through_json(small_graph):
    doc = graph_to_dict(small_graph, caption="the man is riding the horse", explicit_edges=True)
    validate(doc, "scene_graph")
    back = graph_from_dict(json.loads(json.dumps(doc)))
    assert back.triplets == small_graph.triplets
    assert back.edges == small_graph.edges
    for a, b in zip(back.entities, small_graph.entities):
        assert a.bbox == b.bbox and a.label == b.label
        np.testing.assert_array_equal(a.feature, b.feature)


def test_schema_rejects_bad_documents(small_graph):
    doc = graph_to_dict(small_graph)
    doc["entities"][0]["class"] = -1
    with pytest.raises(ValidationError, match="invalid at"):
        graph_from_dict(doc)
    doc = graph_to_dict(small_graph)
    del doc["predicates"][0]["feature"]
    with pytest.raises(ValidationError, match="lacks"):
        graph_from_dict(doc)
