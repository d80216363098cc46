"""Uniformity and tolerance of embeddings on the unit hypersphere."""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from ..errors import InvalidParameter, LabelMismatch, NoPositivePairs, NotNormalized, TooFewSamples
from .embedding_store import EmbeddingSet, LabelSet, make_rng

logger = logging.getLogger(__name__)

DEFAULT_T = 2.0
EXACT_THRESHOLD = 5_000
DEFAULT_PAIR_BUDGET = 10_000_000
_BLOCK_ROWS = 512
_PAIR_CHUNK = 1_000_000


@dataclass(frozen=True)
class GeometryScore:
    uniformity: Optional[float] = None
    tolerance: Optional[float] = None
    t: float = DEFAULT_T
    n_pairs_evaluated: int = 0
    exact: bool = True
    standard_error: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _require_normalized(embeddings: EmbeddingSet) -> None:
    if not embeddings.normalized:
        raise NotNormalized(embeddings.model_tag)


def uniformity(embeddings: EmbeddingSet, t: float = DEFAULT_T, pair_budget: Optional[int] = None,
               seed: int = 0, exact: Optional[bool] = None, exact_threshold: int = EXACT_THRESHOLD,
               include_self_pairs: bool = False) -> GeometryScore:
    """log of the mean Gaussian potential exp(-t * ||x_i - x_j||^2) over ordered pairs i != j.

    Sets with at most ``exact_threshold`` rows are enumerated in full; larger ones are
    estimated from ``pair_budget`` seeded random pairs unless ``exact`` forces a mode.
    """
    _require_normalized(embeddings)
    if embeddings.n < 2:
        raise TooFewSamples(f"uniformity needs at least 2 samples, got {embeddings.n}")
    if t <= 0:
        raise InvalidParameter(f"t must be positive, got {t}")

    if exact is None:
        exact = embeddings.n <= exact_threshold
    if exact:
        log_total, count = _exact_log_potential(embeddings.matrix, t, include_self_pairs)
        value = min(log_total - math.log(count), 0.0)
        return GeometryScore(uniformity=value, t=t, n_pairs_evaluated=count, exact=True)

    budget = int(pair_budget or DEFAULT_PAIR_BUDGET)
    if budget < 1:
        raise InvalidParameter(f"pair_budget must be positive, got {budget}")
    log_mean, relative_sd = _sampled_log_potential(embeddings.matrix, t, budget, seed, include_self_pairs)
    logger.debug("Monte-Carlo uniformity for '%s' over %d pairs", embeddings.model_tag, budget)
    return GeometryScore(
        uniformity=min(log_mean, 0.0),
        t=t,
        n_pairs_evaluated=budget,
        exact=False,
        # delta method: sd(log mean) ~ sd(mean) / mean
        standard_error=relative_sd / math.sqrt(budget),
    )


def _exact_log_potential(x: np.ndarray, t: float, include_self_pairs: bool):
    # potentials can underflow for large t, so everything stays in log space
    n = x.shape[0]
    sq_norms = np.einsum("ij,ij->i", x, x)
    partials = []
    for start in range(0, n, _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, n)
        block = x[start:stop]
        sq_dist = sq_norms[start:stop, None] + sq_norms[None, :] - 2.0 * (block @ x.T)
        np.maximum(sq_dist, 0.0, out=sq_dist)
        log_potential = -t * sq_dist
        if not include_self_pairs:
            rows = np.arange(stop - start)
            log_potential[rows, rows + start] = -np.inf
        partials.append(logsumexp(log_potential))
    count = n * n if include_self_pairs else n * (n - 1)
    return float(logsumexp(partials)), count


def _sampled_log_potential(x: np.ndarray, t: float, budget: int, seed: int, include_self_pairs: bool):
    n = x.shape[0]
    rng = make_rng(seed)
    firsts, seconds = [], []
    remaining = budget
    while remaining > 0:
        size = min(_PAIR_CHUNK, remaining)
        i = rng.integers(0, n, size=size)
        if include_self_pairs:
            j = rng.integers(0, n, size=size)
        else:
            j = rng.integers(0, n - 1, size=size)
            j += j >= i
        diff = x[i] - x[j]
        log_potential = -t * np.einsum("ij,ij->i", diff, diff)
        firsts.append(logsumexp(log_potential))
        seconds.append(logsumexp(2.0 * log_potential))
        remaining -= size
    log_budget = math.log(budget)
    log_mean = float(logsumexp(firsts)) - log_budget
    log_second = float(logsumexp(seconds)) - log_budget
    # variance / mean^2 = E[p^2] / E[p]^2 - 1
    relative_variance = max(math.expm1(min(log_second - 2.0 * log_mean, 700.0)), 0.0)
    return log_mean, math.sqrt(relative_variance)


def tolerance(embeddings: EmbeddingSet, labels: Optional[LabelSet] = None, unconditional: bool = False,
              include_self_pairs: bool = False) -> GeometryScore:
    """Mean cosine similarity over ordered same-class pairs i != j.

    With ``unconditional`` the same-class sum is divided by the number of all ordered pairs,
    i.e. the mean of <x_i, x_j> * [l(i) == l(j)] over every pair.
    """
    _require_normalized(embeddings)
    if labels is not None:
        if labels.sample_ids != embeddings.sample_ids:
            raise LabelMismatch("labels are not aligned with the embedding set")
        y = labels.labels
    elif embeddings.labels is not None:
        y = embeddings.labels
    else:
        raise LabelMismatch(f"embedding set '{embeddings.model_tag}' carries no labels")

    x = embeddings.matrix
    classes, inverse, sizes = np.unique(y, return_inverse=True, return_counts=True)
    sums = np.zeros((classes.size, x.shape[1]))
    np.add.at(sums, inverse, x)
    sq_norms = np.einsum("ij,ij->i", x, x)
    self_terms = np.bincount(inverse, weights=sq_norms, minlength=classes.size)

    per_class = np.einsum("ij,ij->i", sums, sums)
    if not include_self_pairs:
        per_class = per_class - self_terms
        positive_pairs = int(np.sum(sizes * (sizes - 1)))
    else:
        positive_pairs = int(np.sum(sizes * sizes))
    if int(np.sum(sizes * (sizes - 1))) == 0:
        raise NoPositivePairs()

    n = x.shape[0]
    if unconditional:
        count = n * n if include_self_pairs else n * (n - 1)
    else:
        count = positive_pairs
    value = math.fsum(per_class.tolist()) / count
    return GeometryScore(tolerance=value, n_pairs_evaluated=count, exact=True)


def geometry_score(embeddings: EmbeddingSet, labels: Optional[LabelSet] = None, t: float = DEFAULT_T,
                   pair_budget: Optional[int] = None, seed: int = 0, exact: Optional[bool] = None,
                   unconditional: bool = False, include_self_pairs: bool = False) -> GeometryScore:
    """Uniformity and (when labels are available) tolerance in one score."""
    u = uniformity(embeddings, t=t, pair_budget=pair_budget, seed=seed, exact=exact,
                   include_self_pairs=include_self_pairs)
    tol = None
    if labels is not None or embeddings.labels is not None:
        tol = tolerance(embeddings, labels, unconditional=unconditional,
                        include_self_pairs=include_self_pairs).tolerance
    return GeometryScore(
        uniformity=u.uniformity,
        tolerance=tol,
        t=t,
        n_pairs_evaluated=u.n_pairs_evaluated,
        exact=u.exact,
        standard_error=u.standard_error,
    )
