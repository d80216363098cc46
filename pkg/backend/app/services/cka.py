"""Linear centered kernel alignment between embedding sets, and augmentation invariance.

CKA(K, L) = HSIC(K, L) / sqrt(HSIC(K, K) * HSIC(L, L)) with K = X X^T and L = Y Y^T.
The 1/(n-1)^2 factor of HSIC appears in numerator and denominator and is dropped.
With column-centered X_c, Y_c the same value is ||Y_c^T X_c||_F^2 / (||X_c^T X_c||_F ||Y_c^T Y_c||_F),
which needs O(D^2) memory instead of O(N^2).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..config import get_settings
from ..errors import DegenerateInput, InvalidParameter, NotAligned
from .embedding_store import EmbeddingSet, align, l2_normalize, sample_indices
from .reports import PairwiseReport

logger = logging.getLogger(__name__)

DEFAULT_SUBSAMPLE = 10_000
METHODS = ("auto", "features", "gram")


@dataclass(frozen=True)
class CkaScore:
    value: float
    n: int
    d_x: int
    d_y: int
    subsample_seed: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _center(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=0, keepdims=True)


def _canonical_order(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Order the operands independently of argument order, so cka(a, b) == cka(b, a) bit for bit."""
    if x.shape[1] != y.shape[1]:
        return (x, y) if x.shape[1] < y.shape[1] else (y, x)
    differ = np.flatnonzero(x.ravel() != y.ravel())
    if differ.size and x.ravel()[differ[0]] > y.ravel()[differ[0]]:
        return y, x
    return x, y


def _feature_space_cka(x: np.ndarray, y: np.ndarray) -> float:
    cross = np.linalg.norm(x.T @ y) ** 2
    norm_x = np.linalg.norm(x.T @ x)
    norm_y = np.linalg.norm(y.T @ y)
    if norm_x == 0.0 or norm_y == 0.0:
        raise DegenerateInput("a centered embedding matrix is all zeros")
    return float(cross / (norm_x * norm_y))


def _center_gram(gram: np.ndarray) -> np.ndarray:
    # H K H without materializing H
    row_means = gram.mean(axis=0, keepdims=True)
    col_means = gram.mean(axis=1, keepdims=True)
    return gram - row_means - col_means + gram.mean()


def _gram_cka(x: np.ndarray, y: np.ndarray) -> float:
    k = _center_gram(x @ x.T)
    l = _center_gram(y @ y.T)
    hsic_kl = np.sum(k * l)
    hsic_kk = np.sum(k * k)
    hsic_ll = np.sum(l * l)
    if hsic_kk == 0.0 or hsic_ll == 0.0:
        raise DegenerateInput("a centered Gram matrix is all zeros")
    return float(hsic_kl / np.sqrt(hsic_kk * hsic_ll))


def check_aligned(a: EmbeddingSet, b: EmbeddingSet) -> None:
    if a.n != b.n:
        raise NotAligned(f"'{a.model_tag}' has {a.n} rows, '{b.model_tag}' has {b.n}")
    if a.sample_ids != b.sample_ids:
        raise NotAligned(f"'{a.model_tag}' and '{b.model_tag}' do not share the same sample id order")


def linear_cka(a: EmbeddingSet, b: EmbeddingSet, method: str = "auto", normalize: bool = False) -> CkaScore:
    """Linear CKA between two aligned embedding sets.

    ``method="features"`` works on D x D cross-covariances, ``"gram"`` on N x N Gram
    matrices; ``"auto"`` uses the Gram form only when a feature dimension reaches N.
    """
    if method not in METHODS:
        raise InvalidParameter(f"unknown CKA method '{method}', expected one of {METHODS}")
    check_aligned(a, b)
    if a.n < 3:
        raise DegenerateInput(f"linear CKA needs at least 3 samples, got {a.n}")
    if normalize:
        a, b = l2_normalize(a), l2_normalize(b)

    x, y = _canonical_order(_center(a.matrix), _center(b.matrix))
    if method == "auto":
        method = "gram" if max(a.d, b.d) >= a.n else "features"
    value = _gram_cka(x, y) if method == "gram" else _feature_space_cka(x, y)
    return CkaScore(value=value, n=a.n, d_x=a.d, d_y=b.d)


def cka_pairwise(sets: Sequence[EmbeddingSet], subsample: Optional[Tuple[int, int]] = None,
                 normalize: bool = False, default_subsample: int = DEFAULT_SUBSAMPLE,
                 seed: int = 0, max_workers: Optional[int] = None) -> PairwiseReport:
    """Symmetric CKA matrix over ``sets`` after alignment.

    One subsample (``(n, seed)``) is drawn and shared by every set. Without an explicit
    subsample, sets larger than ``default_subsample`` rows are cut down to that size.
    """
    if len(sets) < 2:
        raise InvalidParameter("cka_pairwise needs at least two embedding sets")
    aligned, _ = align(sets)
    n_total = aligned[0].n
    if subsample is None and n_total > default_subsample:
        subsample = (default_subsample, seed)
    if subsample is not None:
        size, sample_seed = subsample
        indices = sample_indices(n_total, size, sample_seed)
        aligned = [s.take(indices) for s in aligned]
    if normalize:
        aligned = [l2_normalize(s) for s in aligned]

    m = len(aligned)
    matrix = np.eye(m)
    pairs = list(combinations(range(m), 2))
    workers = max_workers or get_settings().threads
    with ThreadPoolExecutor(max_workers=workers) as pool:
        values = list(pool.map(lambda ij: linear_cka(aligned[ij[0]], aligned[ij[1]]).value, pairs))
    for (i, j), value in zip(pairs, values):
        matrix[i, j] = matrix[j, i] = value

    params = {"n": aligned[0].n, "normalize": normalize}
    if subsample is not None:
        params["subsample_n"], params["subsample_seed"] = int(subsample[0]), int(subsample[1])
    logger.info("CKA over %d sets, n=%d", m, aligned[0].n)
    return PairwiseReport("linear_cka", [s.model_tag for s in aligned], matrix, params)


def augmentation_invariance(clean: EmbeddingSet, augmented: EmbeddingSet, normalize: bool = False) -> CkaScore:
    """CKA between embeddings of the same images with and without an augmentation; 1.0 = unchanged."""
    if clean.sample_ids != augmented.sample_ids:
        raise NotAligned("clean and augmented sets must hold the same images in the same order")
    if clean.model_tag != augmented.model_tag:
        logger.warning("Invariance between different model tags: '%s' vs '%s'",
                       clean.model_tag, augmented.model_tag)
    return linear_cka(clean, augmented, normalize=normalize)


def invariance_table(pairs: List[Tuple[str, str, EmbeddingSet, EmbeddingSet]],
                     normalize: bool = False) -> List[dict]:
    """Rows of (model_tag, augmentation, cka) for several clean/augmented pairs."""
    rows = []
    for tag, augmentation, clean, augmented in pairs:
        score = augmentation_invariance(clean, augmented, normalize=normalize)
        rows.append({"model_tag": tag, "augmentation": augmentation, "cka": score.value, "n": score.n})
    return rows
