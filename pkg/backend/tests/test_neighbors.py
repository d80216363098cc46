import logging

import numpy as np
import pytest

from app.errors import DimMismatch, EmptyTrain, KTooLarge, MismatchedK, MismatchedNodes
from app.services.neighbors import (
    FGVC_KS,
    build_graph,
    graph_overlap,
    knn_classify,
    knn_sweep,
    overlap_pairwise,
)


def brute_force_neighbors(x, k, metric):
    """Independent O(N^2) scan with ties broken by lower index."""
    if metric == "cosine":
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
        scores = x @ x.T
    else:
        scores = -np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
    result = []
    for i in range(x.shape[0]):
        candidates = [j for j in range(x.shape[0]) if j != i]
        candidates.sort(key=lambda j: (-scores[i, j], j))
        result.append(candidates[:k])
    return np.array(result)


@pytest.mark.parametrize("metric", ["cosine", "euclidean"])
def test_graph_matches_brute_force(make_set, rng, metric):
    x = rng.normal(size=(1000, 8))
    graph = build_graph(make_set(x), k=5, metric=metric)
    assert graph.neighbor_index.shape == (1000, 5)
    assert np.array_equal(graph.neighbor_index, brute_force_neighbors(x, 5, metric))


def test_graph_orders_nodes_by_id(make_set):
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.1]])
    graph = build_graph(make_set(x, ids=["c", "a", "b"]), k=1)
    assert graph.node_ids == ("a", "b", "c")
    assert graph.neighbors("c") == ["b"]
    assert graph.neighbor_ids == [["b"], ["c"], ["b"]]
    frame = graph.to_frame()
    assert list(frame.columns) == ["node_id", "rank", "neighbor_id", "similarity"]
    assert len(frame) == 3


def test_k_bounds(make_set, rng):
    embeddings = make_set(rng.normal(size=(4, 2)))
    with pytest.raises(KTooLarge):
        build_graph(embeddings, k=4)
    with pytest.raises(KTooLarge):
        build_graph(embeddings, k=0)


def test_overlap_of_a_graph_with_itself(make_set, rng):
    graph = build_graph(make_set(rng.normal(size=(60, 5))), k=7)
    assert graph_overlap(graph, graph) == 1.0


def test_overlap_is_symmetric_and_bounded(make_set, rng):
    x = rng.normal(size=(80, 6))
    g1 = build_graph(make_set(x, tag="a"), k=5)
    g2 = build_graph(make_set(x + rng.normal(scale=0.5, size=x.shape), tag="b"), k=5)
    value = graph_overlap(g1, g2)
    assert value == graph_overlap(g2, g1)
    assert 0.0 < value < 1.0


def test_overlap_counts_shared_neighbors(make_set):
    # mirroring the points keeps every angular gap, so both graphs coincide
    angles = np.array([0.0, 0.1, 0.3, 0.6, 1.0])
    x = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    g1 = build_graph(make_set(x, tag="a"), k=1)
    g2 = build_graph(make_set(x * [1.0, -1.0], tag="b"), k=1)
    assert graph_overlap(g1, g2) == 1.0

    shifted = np.stack([np.cos(angles[::-1]), np.sin(angles[::-1])], axis=1)
    g3 = build_graph(make_set(shifted, tag="c"), k=1)
    expected = np.mean([a == b for a, b in zip(g1.neighbor_ids, g3.neighbor_ids)])
    assert graph_overlap(g1, g3) == expected


def test_overlap_requires_matching_graphs(make_set, rng):
    x = rng.normal(size=(10, 3))
    g1 = build_graph(make_set(x), k=2)
    with pytest.raises(MismatchedK):
        graph_overlap(g1, build_graph(make_set(x), k=3))
    with pytest.raises(MismatchedNodes):
        graph_overlap(g1, build_graph(make_set(x, ids=[f"z{i}" for i in range(10)]), k=2))


def test_overlap_pairwise_report(make_set, rng):
    x = rng.normal(size=(30, 4))
    graphs = [build_graph(make_set(x + s * rng.normal(size=x.shape), tag=f"m{i}"), k=3)
              for i, s in enumerate((0.0, 0.2, 1.0))]
    report = overlap_pairwise(graphs)
    assert report.metric_name == "nn_graph_overlap"
    assert report.params == {"k": 3, "metric": "cosine", "n": 30}
    assert np.array_equal(np.diag(report.matrix), np.ones(3))
    assert np.array_equal(report.matrix, report.matrix.T)


# --------------------------
# k-NN classification
# --------------------------

def test_knn_on_separated_blobs(make_set, blobs):
    train_x, train_y, test_x, test_y = blobs()
    train = make_set(train_x, tag="m", labels=train_y)
    test = make_set(test_x, tag="m", labels=test_y)
    for voting in ("uniform", "temperature_weighted"):
        result = knn_classify(train, test, k=10, voting=voting)
        assert result.accuracy == 1.0
        assert result.n_correct == result.n_total == len(test_y)
        assert result.per_class_accuracy == {0: 1.0, 1: 1.0, 2: 1.0}


def test_tie_goes_to_the_nearest_neighbor(make_set):
    train = make_set([[1.0, 0.0], [0.0, 1.0]], labels=[0, 1])
    test = make_set([[0.2, 1.0]], labels=[1])
    result = knn_classify(train, test, k=2, voting="uniform")
    assert result.predictions.tolist() == [1]


def test_temperature_weighting_prefers_closer_votes(make_set):
    train = make_set([[1.0, 0.05], [1.0, -0.05], [0.6, 0.8]], labels=[0, 0, 1])
    test = make_set([[0.6, 0.8]], labels=[1])
    assert knn_classify(train, test, k=3, voting="uniform").predictions.tolist() == [0]
    assert knn_classify(train, test, k=3, temperature=0.07).predictions.tolist() == [1]


def test_sweep_prefers_the_smallest_k_on_ties(make_set, blobs):
    train_x, train_y, test_x, test_y = blobs()
    train = make_set(train_x, labels=train_y)
    test = make_set(test_x, labels=test_y)
    sweep = knn_sweep(train, test, ks=[20, 5, 10])
    assert sweep.best.k == 5
    assert sweep.table == {5: 1.0, 10: 1.0, 20: 1.0}


def test_sweep_matches_individual_runs(make_set, rng):
    train = make_set(rng.normal(size=(120, 5)), labels=rng.integers(0, 3, size=120))
    test = make_set(rng.normal(size=(40, 5)), labels=rng.integers(0, 3, size=40))
    sweep = knn_sweep(train, test, ks=[1, 7, 15])
    for k in (1, 7, 15):
        assert sweep.table[k] == knn_classify(train, test, k=k).accuracy


def test_sweep_skips_zero(make_set, blobs, caplog):
    train_x, train_y, test_x, test_y = blobs(n_train=20)
    train = make_set(train_x, labels=train_y)
    test = make_set(test_x, labels=test_y)
    with caplog.at_level(logging.WARNING):
        sweep = knn_sweep(train, test, ks=FGVC_KS)
    assert 0 not in sweep.table
    assert sorted(sweep.table) == [5, 10, 15, 20, 25, 30, 35, 40, 45, 50]
    assert "non-positive" in caplog.text


def test_knn_input_checks(make_set, rng):
    train = make_set(rng.normal(size=(10, 3)))
    test = make_set(rng.normal(size=(4, 3)), labels=[0, 1, 0, 1])
    with pytest.raises(EmptyTrain):
        knn_classify(train, test, k=3)
    labelled = make_set(rng.normal(size=(10, 3)), labels=[0, 1] * 5)
    with pytest.raises(KTooLarge):
        knn_classify(labelled, test, k=11)
    with pytest.raises(DimMismatch):
        knn_classify(labelled, make_set(rng.normal(size=(4, 2)), labels=[0, 1, 0, 1]), k=3)


@pytest.mark.parametrize("metric", ["cosine", "euclidean"])
def test_graph_ignores_row_order(make_set, rng, metric):
    embeddings = make_set(rng.normal(size=(120, 6)))
    shuffled = embeddings.take(rng.permutation(120))
    graph, reordered = build_graph(embeddings, k=4, metric=metric), build_graph(shuffled, k=4, metric=metric)
    assert reordered.node_ids == graph.node_ids
    assert reordered.neighbor_ids == graph.neighbor_ids


def test_cosine_graph_ignores_row_scale(make_set, rng):
    x = rng.normal(size=(120, 6))
    scaled = x * rng.uniform(0.1, 10.0, size=(120, 1))
    graph, rescaled = build_graph(make_set(x), k=4), build_graph(make_set(scaled), k=4)
    assert np.array_equal(rescaled.neighbor_index, graph.neighbor_index)


def test_knn_on_its_own_training_set(make_set, rng):
    embeddings = make_set(rng.normal(size=(80, 5)), labels=rng.integers(0, 4, size=80))
    for voting in ("uniform", "temperature_weighted"):
        assert knn_classify(embeddings, embeddings, k=1, voting=voting).accuracy == 1.0
