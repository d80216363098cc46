"""Linear probes on frozen embeddings and linear-prediction overlap across models."""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson
import pandas as pd
from pydantic import BaseModel, Field

from ..config import get_settings
from ..errors import (
    DegenerateLabels,
    DimMismatch,
    IngestError,
    InvalidParameter,
    LabelMismatch,
    MisalignedPredictions,
)
from .embedding_store import EmbeddingSet, LabelSet, make_rng
from .reports import PairwiseReport

logger = logging.getLogger(__name__)


class ProbeConfig(BaseModel):
    epochs: int = Field(40, ge=1)
    batch_size: int = Field(256, ge=1)
    base_lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    standardize: bool = True
    full_batch: bool = False
    holdout_fraction: float = Field(0.0, ge=0, lt=1)
    strict: bool = False
    seed: int = 0

    @property
    def learning_rate(self) -> float:
        """Base rate scaled linearly with the batch size (reference batch 256)."""
        return self.base_lr * self.batch_size / 256


@dataclass
class ProbeModel:
    weights: np.ndarray
    bias: np.ndarray
    config: ProbeConfig
    model_tag: str = ""
    feature_mean: Optional[np.ndarray] = None
    feature_var: Optional[np.ndarray] = None
    loss_history: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dims(self) -> int:
        return self.weights.shape[1]

    def transform(self, x: np.ndarray) -> np.ndarray:
        if self.feature_mean is None:
            return x
        return (x - self.feature_mean) / np.sqrt(self.feature_var)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.transform(x) @ self.weights.T + self.bias


@dataclass
class PredictionSet:
    model_tag: str
    sample_ids: Tuple[str, ...]
    predictions: np.ndarray
    correct: Optional[np.ndarray] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"id": list(self.sample_ids), "prediction": self.predictions})


@dataclass
class ProbeEvaluation:
    predictions: PredictionSet
    accuracy: Optional[float]


# --------------------------
# Training
# --------------------------

def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def probe_loss_and_grad(weights: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray,
                        weight_decay: float = 0.0) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean multinomial cross-entropy (+ L2 on weights only) and its gradients."""
    logits = x @ weights.T + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    n = x.shape[0]
    loss = float(np.mean(log_norm - shifted[np.arange(n), y]))
    loss += 0.5 * weight_decay * float(np.sum(weights * weights))

    delta = _softmax(logits)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grad_w = delta.T @ x + weight_decay * weights
    grad_b = delta.sum(axis=0)
    return loss, grad_w, grad_b


def _standardization(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    # constant dimensions pass through centered
    var[var == 0] = 1.0
    return mean, var


def _holdout_split(n: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    order = make_rng(seed).permutation(n)
    n_hold = max(1, int(round(n * fraction)))
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def train_probe(train: EmbeddingSet, config: Optional[ProbeConfig] = None,
                num_classes: Optional[int] = None) -> ProbeModel:
    """Fit a linear classifier with mini-batch SGD + momentum and a cosine learning-rate decay.

    With ``standardize`` the features are whitened per dimension using frozen train-set
    statistics before the linear layer.
    """
    config = config or ProbeConfig()
    if train.labels is None:
        raise LabelMismatch(f"training set '{train.model_tag}' carries no labels")
    y_all = train.labels
    num_classes = num_classes or int(y_all.max()) + 1
    if y_all.max() >= num_classes:
        raise LabelMismatch(f"label {int(y_all.max())} outside {num_classes} classes")

    absent = np.setdiff1d(np.arange(num_classes), y_all)
    if absent.size:
        if config.strict:
            raise DegenerateLabels(f"classes {absent.tolist()} have no training samples")
        logger.warning("Probe '%s': classes %s have no training samples", train.model_tag, absent.tolist())
    if train.n < num_classes:
        logger.warning("Probe '%s': %d samples for %d classes", train.model_tag, train.n, num_classes)

    x_all = train.matrix
    if config.holdout_fraction > 0:
        fit_idx, hold_idx = _holdout_split(train.n, config.holdout_fraction, config.seed)
    else:
        fit_idx, hold_idx = np.arange(train.n), None
    x, y = x_all[fit_idx], y_all[fit_idx]

    mean = var = None
    if config.standardize:
        mean, var = _standardization(x)
        x = (x - mean) / np.sqrt(var)

    n, d = x.shape
    weights = np.zeros((num_classes, d))
    bias = np.zeros(num_classes)
    velocity_w = np.zeros_like(weights)
    velocity_b = np.zeros_like(bias)
    batch = n if config.full_batch else min(config.batch_size, n)
    steps_per_epoch = math.ceil(n / batch)
    total_steps = config.epochs * steps_per_epoch
    lr0 = config.learning_rate
    rng = make_rng(config.seed)

    history = []
    best = (-1.0, None)
    step = 0
    for epoch in range(config.epochs):
        order = np.arange(n) if config.full_batch else rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            _, grad_w, grad_b = probe_loss_and_grad(weights, bias, x[idx], y[idx], config.weight_decay)
            lr = 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))
            velocity_w = config.momentum * velocity_w + grad_w
            velocity_b = config.momentum * velocity_b + grad_b
            weights -= lr * velocity_w
            bias -= lr * velocity_b
            step += 1
        loss, _, _ = probe_loss_and_grad(weights, bias, x, y, config.weight_decay)
        history.append(loss)
        logger.debug("Probe '%s' epoch %d: loss %.6f", train.model_tag, epoch, loss)

        if hold_idx is not None:
            candidate = ProbeModel(weights.copy(), bias.copy(), config, train.model_tag, mean, var)
            hold_pred = np.argmax(candidate.logits(x_all[hold_idx]), axis=1)
            accuracy = float(np.mean(hold_pred == y_all[hold_idx]))
            if accuracy > best[0]:
                best = (accuracy, (epoch, candidate))

    if hold_idx is not None:
        epoch, model = best[1]
        model.loss_history = history
        model.best_epoch = epoch
        logger.info("Probe '%s': best held-out epoch %d (accuracy %.4f)", train.model_tag, epoch, best[0])
        return model

    logger.info("Probe '%s' trained: %d epochs, final loss %.6f", train.model_tag, config.epochs, history[-1])
    return ProbeModel(weights, bias, config, train.model_tag, mean, var, history)


def evaluate_probe(model: ProbeModel, test: EmbeddingSet) -> ProbeEvaluation:
    """Argmax of the logits (lowest class on ties), with accuracy when the test set has labels."""
    if test.d != model.dims:
        raise DimMismatch(model.dims, test.d)
    predictions = np.argmax(model.logits(test.matrix), axis=1)
    correct = accuracy = None
    if test.labels is not None:
        correct = predictions == test.labels
        accuracy = float(correct.sum()) / test.n
    tag = test.model_tag or model.model_tag
    return ProbeEvaluation(PredictionSet(tag, test.sample_ids, predictions, correct), accuracy)


def train_probes(pairs: Sequence[Tuple[EmbeddingSet, EmbeddingSet]], config: Optional[ProbeConfig] = None,
                 num_classes: Optional[int] = None,
                 max_workers: Optional[int] = None) -> List[Tuple[ProbeModel, ProbeEvaluation]]:
    """Train and evaluate one probe per (train, test) pair in parallel."""
    def fit(pair):
        model = train_probe(pair[0], config, num_classes)
        return model, evaluate_probe(model, pair[1])

    with ThreadPoolExecutor(max_workers=max_workers or get_settings().threads) as pool:
        return list(pool.map(fit, pairs))


# --------------------------
# Persistence
# --------------------------

def save_probe(model: ProbeModel, stem: str) -> Tuple[str, str]:
    """JSON header (dims, config, standardization, bias) + little-endian float32 weight blob."""
    header = {
        "model_tag": model.model_tag,
        "num_classes": model.num_classes,
        "dims": model.dims,
        "config": model.config.model_dump(),
        "bias": model.bias,
        "feature_mean": model.feature_mean,
        "feature_var": model.feature_var,
        "best_epoch": model.best_epoch,
        "weights_file": os.path.basename(stem + ".f32"),
    }
    with open(stem + ".json", "wb") as fh:
        fh.write(orjson.dumps(header, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY))
    np.ascontiguousarray(model.weights, dtype="<f4").tofile(stem + ".f32")
    return stem + ".json", stem + ".f32"


def load_probe(stem: str) -> ProbeModel:
    try:
        with open(stem + ".json", "rb") as fh:
            header = orjson.loads(fh.read())
        shape = (int(header["num_classes"]), int(header["dims"]))
    except (OSError, orjson.JSONDecodeError, KeyError) as exc:
        raise IngestError(f"invalid probe header: {exc}", stem + ".json") from None
    weights = np.fromfile(stem + ".f32", dtype="<f4")
    if weights.size != shape[0] * shape[1]:
        raise IngestError(f"weight blob has {weights.size} values, expected {shape[0] * shape[1]}", stem + ".f32")

    def optional(key):
        return None if header.get(key) is None else np.asarray(header[key], dtype=np.float64)

    return ProbeModel(
        weights=weights.reshape(shape).astype(np.float64),
        bias=np.asarray(header["bias"], dtype=np.float64),
        config=ProbeConfig(**header["config"]),
        model_tag=header.get("model_tag", ""),
        feature_mean=optional("feature_mean"),
        feature_var=optional("feature_var"),
        best_epoch=header.get("best_epoch"),
    )


def load_predictions(path: str, model_tag: Optional[str] = None) -> PredictionSet:
    """Read a prediction CSV with columns (id, prediction)."""
    if not os.path.exists(path):
        raise IngestError("file not found", path)
    frame = pd.read_csv(path, dtype={"id": str})
    if list(frame.columns[:2]) != ["id", "prediction"]:
        raise IngestError("expected columns id,prediction", path)
    tag = model_tag or os.path.splitext(os.path.basename(path))[0]
    return PredictionSet(tag, tuple(frame["id"]), frame["prediction"].to_numpy(dtype=np.int64))


# --------------------------
# Linear prediction overlap
# --------------------------

@dataclass
class OverlapPartition:
    """Correctness partition of a group of classifiers over the same samples."""

    model_tags: List[str]
    n_samples: int
    all_correct: int
    none_correct: int
    unique_correct: Dict[str, int]
    exactly_correct: List[int]
    agreement: int
    reference: Optional[str] = None
    reference_block: Optional[Dict[str, int]] = None

    def fraction(self, count: int) -> float:
        return count / self.n_samples

    def to_dict(self) -> dict:
        payload = {
            "model_tags": list(self.model_tags),
            "n_samples": self.n_samples,
            "counts": {
                "all_correct": self.all_correct,
                "none_correct": self.none_correct,
                "unique_correct": dict(self.unique_correct),
                "exactly_correct": list(self.exactly_correct),
                "agreement": self.agreement,
            },
            "fractions": {
                "all_correct": self.fraction(self.all_correct),
                "none_correct": self.fraction(self.none_correct),
                "unique_correct": {tag: self.fraction(c) for tag, c in self.unique_correct.items()},
                "exactly_correct": [self.fraction(c) for c in self.exactly_correct],
                "agreement": self.fraction(self.agreement),
            },
        }
        if self.reference is not None:
            payload["reference"] = self.reference
            payload["counts"]["reference_block"] = dict(self.reference_block)
            payload["fractions"]["reference_block"] = {
                key: self.fraction(c) for key, c in self.reference_block.items()
            }
        return payload


def _aligned_predictions(predsets: Sequence[PredictionSet]) -> np.ndarray:
    if len(predsets) < 2:
        raise InvalidParameter("overlap needs at least two prediction sets")
    ids = predsets[0].sample_ids
    rows = []
    for preds in predsets:
        if len(preds.sample_ids) != len(ids) or set(preds.sample_ids) != set(ids):
            raise MisalignedPredictions(f"'{preds.model_tag}' does not cover the same samples")
        if preds.sample_ids == ids:
            rows.append(np.asarray(preds.predictions))
        else:
            position = {sid: i for i, sid in enumerate(preds.sample_ids)}
            rows.append(np.asarray(preds.predictions)[[position[sid] for sid in ids]])
    return np.vstack(rows)


def overlap_partition(predsets: Sequence[PredictionSet], labels: LabelSet,
                      reference: Optional[str] = None) -> OverlapPartition:
    """Which samples all / none / exactly-one / exactly-j classifiers get right, plus agreement.

    With a ``reference`` tag the group splits into the reference model and the rest, giving
    the exhaustive blocks both / reference_only / others_only / neither, where "others"
    means at least one of the remaining models is correct.
    """
    predictions = _aligned_predictions(predsets)
    tags = [p.model_tag for p in predsets]
    if len(set(tags)) != len(tags):
        raise InvalidParameter(f"duplicate model tags in overlap group: {tags}")
    try:
        truth = labels.for_ids(predsets[0].sample_ids)
    except LabelMismatch as exc:
        raise MisalignedPredictions(str(exc)) from None

    correct = predictions == truth[None, :]
    n_correct = correct.sum(axis=0)
    m, n = correct.shape
    unique = {tag: int(np.sum(correct[i] & (n_correct == 1))) for i, tag in enumerate(tags)}
    exactly = np.bincount(n_correct, minlength=m + 1).tolist()
    agreement = int(np.sum(np.all(predictions == predictions[0], axis=0)))

    block = None
    if reference is not None:
        if reference not in tags:
            raise InvalidParameter(f"reference '{reference}' is not in the group {tags}")
        ref = correct[tags.index(reference)]
        others = np.delete(correct, tags.index(reference), axis=0).any(axis=0)
        block = {
            "both_correct": int(np.sum(ref & others)),
            "reference_only": int(np.sum(ref & ~others)),
            "others_only": int(np.sum(~ref & others)),
            "neither": int(np.sum(~ref & ~others)),
        }

    return OverlapPartition(
        model_tags=tags,
        n_samples=n,
        all_correct=int(exactly[m]),
        none_correct=int(exactly[0]),
        unique_correct=unique,
        exactly_correct=[int(c) for c in exactly],
        agreement=agreement,
        reference=reference,
        reference_block=block,
    )


def agreement_pairwise(predsets: Sequence[PredictionSet]) -> PairwiseReport:
    """Fraction of samples on which each pair of classifiers predicts the same class."""
    predictions = _aligned_predictions(predsets)
    m, n = predictions.shape
    matrix = np.eye(m)
    for i, j in combinations(range(m), 2):
        matrix[i, j] = matrix[j, i] = int(np.sum(predictions[i] == predictions[j])) / n
    return PairwiseReport("linear_prediction_agreement", [p.model_tag for p in predsets], matrix, {"n": n})
