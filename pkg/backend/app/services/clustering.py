"""k-means (k-means++ seeding, Lloyd or mini-batch updates) and clustering accuracy.

Accuracy maps clusters to ground-truth classes either one-to-one (Hungarian matching on the
contingency matrix) or many-to-one (each cluster to its majority class).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from ..config import get_settings
from ..errors import InvalidParameter, KClassMismatch, KTooLarge, LabelMismatch
from .embedding_store import EmbeddingSet, LabelSet, make_rng

logger = logging.getLogger(__name__)

MODES = ("auto", "lloyd", "minibatch")
DEFAULT_N_INIT = 10
DEFAULT_BATCH = 16_384
MAX_ITER = 300
MINIBATCH_THRESHOLD = 100_000


@dataclass
class ClusterResult:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_init_runs: int
    best_run_index: int
    seed: int
    mode: str = "lloyd"
    sample_ids: Optional[tuple] = None
    run_inertias: List[float] = field(default_factory=list)
    inertia_trace: List[float] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        ids = self.sample_ids or tuple(str(i) for i in range(len(self.assignments)))
        return pd.DataFrame({"id": ids, "cluster": self.assignments})

    def summary(self) -> dict:
        return {
            "k": self.k,
            "mode": self.mode,
            "inertia": self.inertia,
            "n_init_runs": self.n_init_runs,
            "best_run_index": self.best_run_index,
            "seed": self.seed,
            "run_inertias": list(self.run_inertias),
        }


@dataclass
class ClusterAccuracy:
    mode: str
    mapping: Dict[int, int]
    accuracy: float
    contingency: np.ndarray
    n_correct: int = 0

    def contingency_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.contingency,
                             index=pd.Index(range(self.contingency.shape[0]), name="cluster"),
                             columns=[f"class_{c}" for c in range(self.contingency.shape[1])])
        return frame

    def to_dict(self) -> dict:
        return {"mode": self.mode, "accuracy": self.accuracy, "n_correct": self.n_correct,
                "mapping": dict(self.mapping)}


# --------------------------
# k-means
# --------------------------

def _sq_distances(x: np.ndarray, sq_norms: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    c_sq = np.einsum("ij,ij->i", centroids, centroids)
    d = sq_norms[:, None] - 2.0 * (x @ centroids.T) + c_sq[None, :]
    return np.maximum(d, 0.0)


def _assign(x: np.ndarray, sq_norms: np.ndarray, centroids: np.ndarray):
    labels = np.argmin(_sq_distances(x, sq_norms, centroids), axis=1)
    diff = x - centroids[labels]
    return labels, np.einsum("ij,ij->i", diff, diff)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2 seeding: each next center is drawn with probability proportional to its squared
    distance to the nearest chosen center."""
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = np.einsum("ij,ij->i", x - x[chosen[0]], x - x[chosen[0]])
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            candidate = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a center; pick an unused row
            unused = np.setdiff1d(np.arange(n), chosen)
            candidate = int(unused[rng.integers(unused.size)])
        chosen.append(candidate)
        diff = x - x[candidate]
        np.minimum(closest, np.einsum("ij,ij->i", diff, diff), out=closest)
    return x[chosen].copy()


def _reseed_empty(x: np.ndarray, centroids: np.ndarray, counts: np.ndarray, point_sq: np.ndarray) -> None:
    empty = np.flatnonzero(counts == 0)
    if not empty.size:
        return
    logger.debug("Reseeding %d empty clusters", empty.size)
    farthest = np.argsort(-point_sq, kind="stable")
    for cluster, point in zip(empty, farthest):
        centroids[cluster] = x[point]


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int):
    sq_norms = np.einsum("ij,ij->i", x, x)
    k = centroids.shape[0]
    trace, previous = [], None
    for _ in range(max_iter):
        labels, point_sq = _assign(x, sq_norms, centroids)
        trace.append(math.fsum(point_sq))
        if previous is not None and np.array_equal(labels, previous):
            break
        previous = labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centroids = centroids.copy()
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        _reseed_empty(x, centroids, counts, point_sq)
    labels, point_sq = _assign(x, sq_norms, centroids)
    return labels, centroids, math.fsum(point_sq), trace


def _minibatch(x: np.ndarray, centroids: np.ndarray, batch: int, rng: np.random.Generator):
    n = x.shape[0]
    k = centroids.shape[0]
    batch = min(batch, n)
    steps = math.ceil(10 * n / batch)
    sq_norms = np.einsum("ij,ij->i", x, x)
    centroids = centroids.copy()
    # the seeding point counts as one observation per center
    counts = np.ones(k)
    for _ in range(steps):
        idx = rng.choice(n, size=batch, replace=False)
        labels = np.argmin(_sq_distances(x[idx], sq_norms[idx], centroids), axis=1)
        hits = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x[idx])
        touched = hits > 0
        # per-center learning rate 1/count, applied batch-wise as a running mean
        centroids[touched] = (counts[touched, None] * centroids[touched] + sums[touched]) / (
            counts[touched] + hits[touched])[:, None]
        counts += hits

    labels, point_sq = _assign(x, sq_norms, centroids)
    full_counts = np.bincount(labels, minlength=k)
    if (full_counts == 0).any():
        _reseed_empty(x, centroids, full_counts, point_sq)
        labels, point_sq = _assign(x, sq_norms, centroids)
    return labels, centroids, math.fsum(point_sq), []


def kmeans(embeddings: EmbeddingSet, k: int, n_init: int = DEFAULT_N_INIT, mode: str = "auto",
           batch: int = DEFAULT_BATCH, seed: int = 0, max_iter: int = MAX_ITER,
           max_workers: Optional[int] = None) -> ClusterResult:
    """Best of ``n_init`` k-means++-seeded runs by full-data inertia; run r uses seed + r."""
    if mode not in MODES:
        raise InvalidParameter(f"unknown k-means mode '{mode}', expected one of {MODES}")
    if k < 1 or k > embeddings.n:
        raise KTooLarge(k, embeddings.n)
    if n_init < 1:
        raise InvalidParameter(f"n_init must be positive, got {n_init}")
    if mode == "auto":
        mode = "minibatch" if embeddings.n > MINIBATCH_THRESHOLD else "lloyd"
    if mode == "minibatch" and batch < k:
        raise InvalidParameter(f"mini-batch size {batch} is smaller than k={k}")

    x = embeddings.matrix

    def single_run(run: int):
        rng = make_rng(seed + run)
        centroids = kmeans_plusplus(x, k, rng)
        if mode == "lloyd":
            return _lloyd(x, centroids, max_iter)
        return _minibatch(x, centroids, batch, rng)

    with ThreadPoolExecutor(max_workers=max_workers or get_settings().threads) as pool:
        runs = list(pool.map(single_run, range(n_init)))

    inertias = [run[2] for run in runs]
    best = int(np.argmin(inertias))
    labels, centroids, inertia, trace = runs[best]
    logger.info("k-means '%s' k=%d (%s): best run %d of %d, inertia %.6g",
                embeddings.model_tag, k, mode, best, n_init, inertia)
    return ClusterResult(
        k=k,
        assignments=labels,
        centroids=centroids,
        inertia=inertia,
        n_init_runs=n_init,
        best_run_index=best,
        seed=seed,
        mode=mode,
        sample_ids=embeddings.sample_ids,
        run_inertias=inertias,
        inertia_trace=trace,
    )


# --------------------------
# Accuracy
# --------------------------

def contingency_matrix(assignments: np.ndarray, labels: np.ndarray, k: int, num_classes: int) -> np.ndarray:
    """k x C counts of samples per (cluster, class)."""
    flat = np.asarray(assignments) * num_classes + np.asarray(labels)
    return np.bincount(flat, minlength=k * num_classes).reshape(k, num_classes)


def _labels_for(result: ClusterResult, labels: LabelSet) -> np.ndarray:
    if result.sample_ids is None:
        if labels.n != len(result.assignments):
            raise LabelMismatch(f"{labels.n} labels for {len(result.assignments)} clustered samples")
        return labels.labels
    return labels.for_ids(result.sample_ids)


def hungarian_match(contingency: np.ndarray) -> Dict[int, int]:
    """Cluster -> class one-to-one mapping maximizing the matched count."""
    rows, cols = linear_sum_assignment(-contingency)
    return {int(r): int(c) for r, c in zip(rows, cols)}


def hungarian_accuracy(result: ClusterResult, labels: LabelSet) -> ClusterAccuracy:
    if result.k != labels.num_classes:
        raise KClassMismatch(result.k, labels.num_classes)
    truth = _labels_for(result, labels)
    table = contingency_matrix(result.assignments, truth, result.k, labels.num_classes)
    mapping = hungarian_match(table)
    matched = int(sum(table[r, c] for r, c in mapping.items()))
    return ClusterAccuracy("hungarian", mapping, matched / len(truth), table, matched)


def greedy_accuracy(result: ClusterResult, labels: LabelSet) -> ClusterAccuracy:
    """Each cluster goes to the class with most of its members (lowest class index on ties)."""
    if result.k < labels.num_classes:
        logger.warning("Greedy mapping with k=%d < %d classes; some classes can never be predicted",
                       result.k, labels.num_classes)
    truth = _labels_for(result, labels)
    table = contingency_matrix(result.assignments, truth, result.k, labels.num_classes)
    targets = np.argmax(table, axis=1)
    mapping = {int(r): int(c) for r, c in enumerate(targets)}
    matched = int(table[np.arange(result.k), targets].sum())
    return ClusterAccuracy("greedy", mapping, matched / len(truth), table, matched)
