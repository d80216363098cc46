"""Exact nearest-neighbor graphs, neighbor-graph overlap, and the k-NN classification benchmark."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..config import get_settings
from ..errors import (
    DimMismatch,
    EmptyTrain,
    InvalidParameter,
    KTooLarge,
    LabelMismatch,
    MismatchedK,
    MismatchedNodes,
)
from .embedding_store import EmbeddingSet, l2_normalize
from .reports import PairwiseReport

logger = logging.getLogger(__name__)

METRICS = ("cosine", "euclidean")
VOTING = ("uniform", "temperature_weighted")
DEFAULT_K = 200
DEFAULT_TEMPERATURE = 0.07
FGVC_KS = (0, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50)
_BLOCK_ROWS = 1024


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """Top-k neighbor lists, one per node, stored as row indices into ``node_ids``."""

    model_tag: str
    k: int
    node_ids: Tuple[str, ...]
    neighbor_index: np.ndarray
    similarities: np.ndarray
    similarity_metric: str = "cosine"

    @property
    def neighbor_ids(self) -> List[List[str]]:
        return [[self.node_ids[j] for j in row] for row in self.neighbor_index]

    def neighbors(self, node_id: str) -> List[str]:
        row = self.node_ids.index(node_id)
        return [self.node_ids[j] for j in self.neighbor_index[row]]

    def to_frame(self) -> pd.DataFrame:
        """Long table of (node_id, rank, neighbor_id, similarity)."""
        n = len(self.node_ids)
        ids = np.asarray(self.node_ids, dtype=object)
        return pd.DataFrame({
            "node_id": np.repeat(ids, self.k),
            "rank": np.tile(np.arange(1, self.k + 1), n),
            "neighbor_id": ids[self.neighbor_index.ravel()],
            "similarity": self.similarities.ravel(),
        })


@dataclass
class KnnEvalResult:
    k: int
    accuracy: float
    voting: str
    temperature: float
    n_correct: int = 0
    n_total: int = 0
    per_class_accuracy: Optional[Dict[int, float]] = None
    predictions: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "accuracy": self.accuracy,
            "voting": self.voting,
            "temperature": self.temperature,
            "n_correct": self.n_correct,
            "n_total": self.n_total,
            "per_class_accuracy": self.per_class_accuracy,
        }


@dataclass
class KnnSweepResult:
    best: KnnEvalResult
    table: Dict[int, float]

    def to_dict(self) -> dict:
        return {"best_k": self.best.k, "best": self.best.to_dict(), "table": dict(self.table)}


def _scores(queries: np.ndarray, keys: np.ndarray, metric: str, key_sq_norms: np.ndarray) -> np.ndarray:
    """Higher is nearer. Cosine expects unit rows; euclidean drops the per-query constant ||q||^2."""
    products = queries @ keys.T
    if metric == "cosine":
        return products
    return 2.0 * products - key_sq_norms[None, :]


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores per row, descending, ties broken by lower index."""
    part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(scores, part, axis=1).min(axis=1)
    result = np.empty((scores.shape[0], k), dtype=np.int64)
    for r in range(scores.shape[0]):
        candidates = np.flatnonzero(scores[r] >= kth[r])
        order = np.lexsort((candidates, -scores[r, candidates]))
        result[r] = candidates[order[:k]]
    return result


def _ranked_neighbors(queries: np.ndarray, keys: np.ndarray, k: int, metric: str,
                      exclude_self: bool) -> Tuple[np.ndarray, np.ndarray]:
    key_sq_norms = np.einsum("ij,ij->i", keys, keys)
    index = np.empty((queries.shape[0], k), dtype=np.int64)
    for start in range(0, queries.shape[0], _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, queries.shape[0])
        scores = _scores(queries[start:stop], keys, metric, key_sq_norms)
        if exclude_self:
            rows = np.arange(stop - start)
            scores[rows, rows + start] = -np.inf
        index[start:stop] = _top_k(scores, k)
    sims = _similarity_of(queries, keys, index, metric)
    return index, sims


def _similarity_of(queries: np.ndarray, keys: np.ndarray, index: np.ndarray, metric: str) -> np.ndarray:
    neighbors = keys[index]
    if metric == "cosine":
        return np.einsum("ij,ikj->ik", queries, neighbors)
    diff = neighbors - queries[:, None, :]
    return -np.sqrt(np.einsum("ikj,ikj->ik", diff, diff))


def _prepare(embeddings: EmbeddingSet, metric: str) -> EmbeddingSet:
    if metric not in METRICS:
        raise InvalidParameter(f"unknown metric '{metric}', expected one of {METRICS}")
    return l2_normalize(embeddings) if metric == "cosine" else embeddings


def build_graph(embeddings: EmbeddingSet, k: int, metric: str = "cosine") -> NeighborGraph:
    """Exact top-k neighbor graph (self excluded). Nodes are kept in lexicographic id order.

    Stored similarities are cosine similarities, or negated euclidean distances.
    """
    if k < 1 or k > embeddings.n - 1:
        raise KTooLarge(k, embeddings.n - 1)
    prepared = _prepare(embeddings, metric)
    order = sorted(range(prepared.n), key=lambda i: prepared.sample_ids[i])
    prepared = prepared.take(order)
    x = prepared.matrix
    index, sims = _ranked_neighbors(x, x, k, metric, exclude_self=True)
    return NeighborGraph(prepared.model_tag, k, prepared.sample_ids, index, sims, metric)


def graph_overlap(g1: NeighborGraph, g2: NeighborGraph) -> float:
    """Mean over nodes of |N1(v) & N2(v)| / k."""
    if g1.k != g2.k:
        raise MismatchedK(f"graphs use k={g1.k} and k={g2.k}")
    if set(g1.node_ids) != set(g2.node_ids):
        raise MismatchedNodes(f"'{g1.model_tag}' and '{g2.model_tag}' cover different nodes")

    position = {sid: i for i, sid in enumerate(g1.node_ids)}
    remap = np.array([position[sid] for sid in g2.node_ids])
    # rows of g2 in g1's node order, neighbor indices in g1's index space
    rows_in_g1 = np.empty(len(remap), dtype=np.int64)
    rows_in_g1[remap] = np.arange(len(remap))
    b = remap[g2.neighbor_index[rows_in_g1]]
    a = g1.neighbor_index

    shared = 0
    for start in range(0, a.shape[0], _BLOCK_ROWS):
        block_a = a[start:start + _BLOCK_ROWS]
        block_b = b[start:start + _BLOCK_ROWS]
        shared += int((block_a[:, :, None] == block_b[:, None, :]).any(axis=2).sum())
    return shared / (a.shape[0] * g1.k)


def overlap_pairwise(graphs: Sequence[NeighborGraph], max_workers: Optional[int] = None) -> PairwiseReport:
    if len(graphs) < 2:
        raise InvalidParameter("overlap_pairwise needs at least two graphs")
    m = len(graphs)
    matrix = np.eye(m)
    pairs = list(combinations(range(m), 2))
    with ThreadPoolExecutor(max_workers=max_workers or get_settings().threads) as pool:
        values = list(pool.map(lambda ij: graph_overlap(graphs[ij[0]], graphs[ij[1]]), pairs))
    for (i, j), value in zip(pairs, values):
        matrix[i, j] = matrix[j, i] = value
    params = {"k": graphs[0].k, "metric": graphs[0].similarity_metric, "n": len(graphs[0].node_ids)}
    return PairwiseReport("nn_graph_overlap", [g.model_tag for g in graphs], matrix, params)


# --------------------------
# k-NN classification
# --------------------------

def _check_knn_inputs(train: EmbeddingSet, test: EmbeddingSet, k_max: int) -> None:
    if train.labels is None:
        raise EmptyTrain(f"training set '{train.model_tag}' carries no labels")
    if test.labels is None:
        raise LabelMismatch(f"test set '{test.model_tag}' carries no labels")
    if train.d != test.d:
        raise DimMismatch(train.d, test.d)
    if k_max > train.n:
        raise KTooLarge(k_max, train.n)


def _knn_neighbors(train: EmbeddingSet, test: EmbeddingSet, k_max: int) -> Tuple[np.ndarray, np.ndarray]:
    train_x = l2_normalize(train).matrix
    test_x = l2_normalize(test).matrix
    return _ranked_neighbors(test_x, train_x, k_max, "cosine", exclude_self=False)


def _vote(neighbor_labels: np.ndarray, sims: np.ndarray, num_classes: int, voting: str,
          temperature: float) -> np.ndarray:
    n, k = neighbor_labels.shape
    weights = np.ones_like(sims) if voting == "uniform" else np.exp(sims / temperature)
    flat = (np.arange(n)[:, None] * num_classes + neighbor_labels).ravel()
    scores = np.bincount(flat, weights=weights.ravel(), minlength=n * num_classes).reshape(n, num_classes)

    best = scores.max(axis=1)
    tied = scores == best[:, None]
    predictions = np.argmax(scores, axis=1)
    for r in np.flatnonzero(tied.sum(axis=1) > 1):
        # nearest neighbor whose class is among the tied ones, else lowest tied class
        for label in neighbor_labels[r]:
            if tied[r, label]:
                predictions[r] = label
                break
    return predictions


def _evaluate(predictions: np.ndarray, truth: np.ndarray, k: int, voting: str, temperature: float) -> KnnEvalResult:
    correct = predictions == truth
    per_class = {int(c): float(correct[truth == c].mean()) for c in np.unique(truth)}
    n_correct = int(correct.sum())
    return KnnEvalResult(
        k=k,
        accuracy=n_correct / len(truth),
        voting=voting,
        temperature=temperature,
        n_correct=n_correct,
        n_total=len(truth),
        per_class_accuracy=per_class,
        predictions=predictions,
    )


def knn_classify(train: EmbeddingSet, test: EmbeddingSet, k: int = DEFAULT_K,
                 voting: str = "temperature_weighted", temperature: float = DEFAULT_TEMPERATURE) -> KnnEvalResult:
    """k-NN on cosine similarity of L2-normalized embeddings.

    Weighted voting scores a class by the sum of exp(sim / temperature) over its neighbors;
    uniform voting counts neighbors.
    """
    if voting not in VOTING:
        raise InvalidParameter(f"unknown voting '{voting}', expected one of {VOTING}")
    if k < 1:
        raise InvalidParameter(f"k must be positive, got {k}")
    _check_knn_inputs(train, test, k)
    index, sims = _knn_neighbors(train, test, k)
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    predictions = _vote(train.labels[index], sims, num_classes, voting, temperature)
    result = _evaluate(predictions, test.labels, k, voting, temperature)
    logger.info("k-NN '%s' k=%d: accuracy %.4f", test.model_tag, k, result.accuracy)
    return result


def knn_sweep(train: EmbeddingSet, test: EmbeddingSet, ks: Sequence[int] = FGVC_KS,
              voting: str = "temperature_weighted", temperature: float = DEFAULT_TEMPERATURE) -> KnnSweepResult:
    """Evaluate several k from one shared neighbor ranking; best accuracy wins, smaller k on ties."""
    if voting not in VOTING:
        raise InvalidParameter(f"unknown voting '{voting}', expected one of {VOTING}")
    valid = sorted({int(k) for k in ks if k > 0})
    skipped = [k for k in ks if k <= 0]
    if skipped:
        logger.warning("Skipping non-positive k values %s", skipped)
    if not valid:
        raise InvalidParameter("no positive k in the sweep")
    _check_knn_inputs(train, test, valid[-1])

    index, sims = _knn_neighbors(train, test, valid[-1])
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    neighbor_labels = train.labels[index]
    best, table = None, {}
    for k in valid:
        predictions = _vote(neighbor_labels[:, :k], sims[:, :k], num_classes, voting, temperature)
        result = _evaluate(predictions, test.labels, k, voting, temperature)
        table[k] = result.accuracy
        if best is None or result.accuracy > best.accuracy:
            best = result
    logger.info("k-NN sweep '%s': best k=%d, accuracy %.4f", test.model_tag, best.k, best.accuracy)
    return KnnSweepResult(best=best, table=table)
