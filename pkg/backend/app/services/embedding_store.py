"""Ingestion boundary: load, validate, normalize, align and subsample embedding matrices.

Everything downstream receives :class:`EmbeddingSet` objects built here. Matrices are
always held as read-only float64 arrays, whatever width they were stored in.
"""

import logging
import os
import re
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson
import pandas as pd

from ..errors import (
    DuplicateIDs,
    EmptyIntersection,
    IngestError,
    InvalidParameter,
    LabelMismatch,
    MalformedHeader,
    MalformedValue,
    NonFiniteValue,
    RaggedRow,
    SampleTooLarge,
    ZeroDimension,
    ZeroNormRow,
)

logger = logging.getLogger(__name__)

FORMATS = ("npy", "csv", "rawf32")
NORM_TOLERANCE = 1e-5
_SUPPORTED_NPY_DTYPES = (np.dtype("<f4"), np.dtype("<f8"))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator used for every random draw in the package.

    Philox is a counter-based generator whose stream does not depend on the platform.
    """
    return np.random.Generator(np.random.Philox(int(seed)))


def _first_nonfinite_row(matrix: np.ndarray) -> Optional[int]:
    bad = ~np.isfinite(matrix).all(axis=1)
    if bad.any():
        return int(np.flatnonzero(bad)[0])
    return None


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


# --------------------------
# Domain types
# --------------------------

@dataclass(frozen=True, eq=False)
class LabelSet:
    sample_ids: Tuple[str, ...]
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        ids = tuple(str(i) for i in self.sample_ids)
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or len(labels) != len(ids):
            raise LabelMismatch(f"{len(ids)} ids but labels of shape {labels.shape}")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.mod(labels, 1) == 0):
                raise LabelMismatch("labels must be integers")
        labels = np.array(labels, dtype=np.int64)
        if labels.size and labels.min() < 0:
            raise LabelMismatch("labels must be non-negative")
        if self.num_classes < 1 or (labels.size and labels.max() + 1 > self.num_classes):
            raise LabelMismatch(f"num_classes={self.num_classes} does not cover the labels")
        if len(set(ids)) != len(ids):
            raise DuplicateIDs(_duplicates(ids))
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "labels", _readonly(labels))

    @classmethod
    def from_labels(cls, labels, sample_ids: Optional[Sequence[str]] = None,
                    num_classes: Optional[int] = None) -> "LabelSet":
        labels = np.asarray(labels, dtype=np.int64)
        if sample_ids is None:
            sample_ids = [str(i) for i in range(len(labels))]
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 1
        return cls(tuple(sample_ids), labels, int(num_classes))

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    def for_ids(self, sample_ids: Sequence[str]) -> np.ndarray:
        """Labels in the order of ``sample_ids``; every id must be present."""
        index = {sid: i for i, sid in enumerate(self.sample_ids)}
        try:
            positions = [index[sid] for sid in sample_ids]
        except KeyError as exc:
            raise LabelMismatch(f"no label for sample id {exc.args[0]!r}") from None
        return self.labels[positions]

    def restrict(self, sample_ids: Sequence[str]) -> "LabelSet":
        return LabelSet(tuple(sample_ids), self.for_ids(sample_ids), self.num_classes)


def _duplicates(ids: Sequence[str]) -> List[str]:
    seen, dups = set(), []
    for sid in ids:
        if sid in seen:
            dups.append(sid)
        seen.add(sid)
    return dups


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """An N x D embedding matrix with sample ids, optional labels and a model tag."""

    model_tag: str
    sample_ids: Tuple[str, ...]
    matrix: np.ndarray
    labels: Optional[np.ndarray] = None
    normalized: bool = False

    def __post_init__(self):
        matrix = self.matrix
        if not (isinstance(matrix, np.ndarray) and matrix.dtype == np.float64 and not matrix.flags.writeable):
            matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] < 1 or matrix.shape[1] < 1:
            raise ZeroDimension(f"expected a non-empty 2-D matrix, got shape {matrix.shape}")
        bad_row = _first_nonfinite_row(matrix)
        if bad_row is not None:
            raise NonFiniteValue(bad_row)

        ids = tuple(str(i) for i in self.sample_ids)
        if len(ids) != matrix.shape[0]:
            raise IngestError(f"{len(ids)} sample ids for {matrix.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise DuplicateIDs(_duplicates(ids))

        labels = self.labels
        if labels is not None:
            labels = np.array(labels, dtype=np.int64)
            if labels.shape != (matrix.shape[0],):
                raise LabelMismatch(f"{labels.shape[0]} labels for {matrix.shape[0]} rows")
            if labels.min() < 0:
                raise LabelMismatch("labels must be non-negative")
            labels = _readonly(labels)

        if self.normalized:
            norms = np.linalg.norm(matrix, axis=1)
            off = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOLERANCE)
            if off.size:
                raise IngestError(f"row {int(off[0])} is flagged normalized but has norm {norms[off[0]]:.6g}")

        object.__setattr__(self, "matrix", _readonly(matrix))
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def take(self, indices) -> "EmbeddingSet":
        indices = np.asarray(indices, dtype=np.int64)
        return EmbeddingSet(
            model_tag=self.model_tag,
            sample_ids=tuple(self.sample_ids[i] for i in indices),
            matrix=self.matrix[indices],
            labels=None if self.labels is None else self.labels[indices],
            normalized=self.normalized,
        )

    def with_labels(self, labels: LabelSet) -> "EmbeddingSet":
        return replace(self, labels=labels.for_ids(self.sample_ids))

    def label_set(self, num_classes: Optional[int] = None) -> LabelSet:
        if self.labels is None:
            raise LabelMismatch(f"embedding set '{self.model_tag}' carries no labels")
        return LabelSet.from_labels(self.labels, self.sample_ids, num_classes)

    def summary(self) -> Dict:
        """Ingest summary: shape, row-norm statistics and label coverage"""
        norms = np.linalg.norm(self.matrix, axis=1)
        summary = {
            "model_tag": self.model_tag,
            "rows": self.n,
            "dims": self.d,
            "normalized": self.normalized,
            "unit_norm_rows": bool(np.all(np.abs(norms - 1.0) <= NORM_TOLERANCE)),
            "norm_min": float(norms.min()),
            "norm_mean": float(norms.mean()),
            "norm_max": float(norms.max()),
            "has_labels": self.has_labels,
        }
        if self.labels is not None:
            summary["num_classes"] = int(np.unique(self.labels).size)
        return summary

    def dimension_statistics(self) -> pd.DataFrame:
        """Per-dimension mean/std/min/max table."""
        frame = pd.DataFrame(self.matrix)
        return frame.agg(["mean", "std", "min", "max"]).T


# --------------------------
# Loading
# --------------------------

def load_ids(path: str) -> List[str]:
    if not os.path.exists(path):
        raise IngestError("file not found", path)
    with open(path, "r", encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def load_embeddings(path: str, format: str = "npy", model_tag: Optional[str] = None,
                    ids_path: Optional[str] = None, header: bool = False) -> EmbeddingSet:
    """Read an embedding matrix from ``path`` in one of npy / csv / rawf32."""
    if format not in FORMATS:
        raise InvalidParameter(f"unknown embedding format '{format}', expected one of {FORMATS}")
    if not os.path.exists(path):
        raise IngestError("file not found", path)

    if format == "npy":
        matrix = _read_npy(path)
    elif format == "csv":
        matrix = _read_csv(path, header=header)
    else:
        matrix = _read_rawf32(path)

    matrix = np.array(matrix, dtype=np.float64)
    bad_row = _first_nonfinite_row(matrix)
    if bad_row is not None:
        raise NonFiniteValue(bad_row, path)

    if ids_path:
        sample_ids = load_ids(ids_path)
        if len(sample_ids) != matrix.shape[0]:
            raise IngestError(f"id file has {len(sample_ids)} entries for {matrix.shape[0]} rows", ids_path)
    else:
        sample_ids = [str(i) for i in range(matrix.shape[0])]

    tag = model_tag or os.path.splitext(os.path.basename(path))[0]
    embeddings = EmbeddingSet(tag, tuple(sample_ids), matrix)
    logger.info("Loaded %s (%s): N=%d, D=%d", path, format, embeddings.n, embeddings.d)
    return embeddings


def _read_npy(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        try:
            version = np.lib.format.read_magic(fh)
        except ValueError as exc:
            raise MalformedHeader(str(exc), offset=0, path=path) from None
        try:
            if version == (1, 0):
                shape, fortran_order, dtype = np.lib.format.read_array_header_1_0(fh)
            elif version == (2, 0):
                shape, fortran_order, dtype = np.lib.format.read_array_header_2_0(fh)
            else:
                raise MalformedHeader(f"unsupported NPY version {version}", offset=6, path=path)
        except ValueError as exc:
            if isinstance(exc, MalformedHeader):
                raise
            raise MalformedHeader(str(exc), offset=8, path=path) from None
        data_offset = fh.tell()

    if len(shape) != 2:
        raise MalformedHeader(f"expected a 2-D array, got shape {shape}", offset=10, path=path)
    if fortran_order:
        raise MalformedHeader("Fortran-ordered arrays are not supported", offset=10, path=path)
    if dtype not in _SUPPORTED_NPY_DTYPES:
        raise MalformedHeader(f"unsupported dtype {dtype.str}, expected <f4 or <f8", offset=10, path=path)
    if shape[0] == 0 or shape[1] == 0:
        raise ZeroDimension(f"array has shape {shape}", path)

    row_bytes = shape[1] * dtype.itemsize
    available = os.path.getsize(path) - data_offset
    if available < shape[0] * row_bytes:
        raise RaggedRow(available // row_bytes, path=path)
    return np.memmap(path, dtype=dtype, mode="r", offset=data_offset, shape=shape, order="C")


_RAGGED_PATTERN = re.compile(r"Expected (\d+) fields in line (\d+), saw (\d+)")


def _read_csv(path: str, header: bool = False) -> np.ndarray:
    try:
        frame = pd.read_csv(
            path,
            header=0 if header else None,
            dtype=str,
            na_filter=False,
            skip_blank_lines=True,
            skipinitialspace=True,
        )
    except pd.errors.EmptyDataError:
        raise ZeroDimension("file contains no rows", path) from None
    except pd.errors.ParserError as exc:
        match = _RAGGED_PATTERN.search(str(exc))
        if not match:
            raise MalformedHeader(str(exc).strip(), offset=0, path=path) from None
        expected, line, found = (int(g) for g in match.groups())
        row = line - 1 - (1 if header else 0)
        raise RaggedRow(row, expected, found, path) from None

    if frame.shape[0] == 0 or frame.shape[1] == 0:
        raise ZeroDimension("file contains no rows", path)

    cells = frame.to_numpy(dtype=object)
    missing = pd.isna(frame).to_numpy() | (cells == "")
    if missing.any():
        row = int(np.flatnonzero(missing.any(axis=1))[0])
        raise RaggedRow(row, frame.shape[1], int((~missing[row]).sum()), path)

    try:
        return cells.astype(np.float64)
    except ValueError:
        for row, values in enumerate(cells):
            try:
                [float(v) for v in values]
            except ValueError:
                raise MalformedValue(row, path) from None
        raise


def _read_rawf32(path: str) -> np.ndarray:
    sidecar = path + ".json"
    if not os.path.exists(sidecar):
        raise MalformedHeader("missing JSON sidecar with n and d", offset=0, path=sidecar)
    try:
        with open(sidecar, "rb") as fh:
            meta = orjson.loads(fh.read())
        n, d = int(meta["n"]), int(meta["d"])
    except (orjson.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedHeader(f"invalid sidecar: {exc}", offset=0, path=sidecar) from None
    if n <= 0 or d <= 0:
        raise ZeroDimension(f"sidecar declares n={n}, d={d}", path)

    row_bytes = 4 * d
    size = os.path.getsize(path)
    if size < n * row_bytes:
        raise RaggedRow(size // row_bytes, path=path)
    if size > n * row_bytes:
        raise MalformedHeader(f"{size - n * row_bytes} trailing bytes after the declared matrix",
                              offset=n * row_bytes, path=path)
    return np.memmap(path, dtype="<f4", mode="r", shape=(n, d))


def load_labels(path: str, sample_ids: Optional[Sequence[str]] = None,
                num_classes: Optional[int] = None) -> LabelSet:
    """Read a label sidecar: newline-delimited integers, or a two-column ``id,label`` CSV.

    For the single-column form, ids are taken from ``sample_ids`` or default to "0".."N-1".
    """
    if not os.path.exists(path):
        raise IngestError("file not found", path)
    try:
        frame = pd.read_csv(path, header=None, dtype=str, na_filter=False,
                            skip_blank_lines=True, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise ZeroDimension("label file is empty", path) from None
    except pd.errors.ParserError as exc:
        raise MalformedHeader(str(exc).strip(), offset=0, path=path) from None

    if frame.shape[1] not in (1, 2):
        raise MalformedHeader(f"expected 1 or 2 columns, found {frame.shape[1]}", offset=0, path=path)
    if frame.shape[0] and not _is_int(frame.iloc[0, -1]):
        frame = frame.iloc[1:]
    try:
        labels = frame.iloc[:, -1].astype(np.int64).to_numpy()
    except ValueError:
        raise LabelMismatch("labels must be integers", path) from None

    if frame.shape[1] == 2:
        ids = frame.iloc[:, 0].astype(str).tolist()
    elif sample_ids is not None:
        if len(sample_ids) != len(labels):
            raise LabelMismatch(f"{len(labels)} labels for {len(sample_ids)} samples", path)
        ids = list(sample_ids)
    else:
        ids = [str(i) for i in range(len(labels))]

    return LabelSet.from_labels(labels, ids, num_classes)


def _is_int(value: str) -> bool:
    try:
        int(value)
        return True
    except ValueError:
        return False


def save_embeddings(embeddings: EmbeddingSet, path: str, format: str = "npy",
                    dtype: str = "float64", ids_path: Optional[str] = None) -> str:
    """Write ``embeddings`` in one of the supported formats (rawf32 ignores ``dtype``)."""
    if format not in FORMATS:
        raise InvalidParameter(f"unknown embedding format '{format}'")
    if format == "npy":
        array = np.ascontiguousarray(embeddings.matrix, dtype=np.dtype(dtype).newbyteorder("<"))
        with open(path, "wb") as fh:
            np.lib.format.write_array(fh, array, version=(1, 0))
    elif format == "csv":
        pd.DataFrame(embeddings.matrix).to_csv(path, header=False, index=False, float_format="%.17g")
    else:
        np.ascontiguousarray(embeddings.matrix, dtype="<f4").tofile(path)
        with open(path + ".json", "wb") as fh:
            fh.write(orjson.dumps({"n": embeddings.n, "d": embeddings.d}))
    if ids_path:
        with open(ids_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(embeddings.sample_ids) + "\n")
    return path


# --------------------------
# Transformations
# --------------------------

def l2_normalize(embeddings: EmbeddingSet) -> EmbeddingSet:
    """Scale every row to unit L2 norm. Already-normalized sets are returned unchanged."""
    if embeddings.normalized:
        return embeddings
    norms = np.linalg.norm(embeddings.matrix, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroNormRow(int(zero[0]))
    return replace(embeddings, matrix=embeddings.matrix / norms[:, None], normalized=True)


def align(sets: Sequence[EmbeddingSet],
          labels: Optional[LabelSet] = None) -> Tuple[List[EmbeddingSet], Optional[LabelSet]]:
    """Restrict every set (and the labels) to the shared sample ids, in lexicographic id order."""
    if not sets:
        raise InvalidParameter("align needs at least one embedding set")
    common = set(sets[0].sample_ids)
    for other in sets[1:]:
        common &= set(other.sample_ids)
    if labels is not None:
        common &= set(labels.sample_ids)
    if not common:
        raise EmptyIntersection()

    order = sorted(common)
    aligned = []
    for embeddings in sets:
        index = {sid: i for i, sid in enumerate(embeddings.sample_ids)}
        aligned.append(embeddings.take([index[sid] for sid in order]))
        dropped = embeddings.n - len(order)
        if dropped:
            logger.info("Aligned '%s': dropped %d rows outside the shared ids", embeddings.model_tag, dropped)
    return aligned, (labels.restrict(order) if labels is not None else None)


def sample_indices(total: int, n: int, seed: int) -> np.ndarray:
    """Sorted row indices of a seeded draw without replacement."""
    if n < 1:
        raise InvalidParameter(f"sample size must be positive, got {n}")
    if n > total:
        raise SampleTooLarge(n, total)
    return np.sort(make_rng(seed).choice(total, size=n, replace=False))


def subsample(embeddings: EmbeddingSet, n: int, seed: int = 0) -> EmbeddingSet:
    return embeddings.take(sample_indices(embeddings.n, n, seed))
