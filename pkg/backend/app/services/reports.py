"""Report containers and their JSON / CSV serialization.

Reports are plot-ready data only. JSON goes through orjson, CSV through pandas; any
non-finite number is rejected instead of being written as text.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Union

import numpy as np
import orjson
import pandas as pd

from ..errors import InvalidParameter, ReportIOError, ReportSerializationError

logger = logging.getLogger(__name__)

REPORT_FORMATS = ("json", "csv")
SYMMETRY_TOLERANCE = 1e-9
CSV_FLOAT_FORMAT = "%.17g"
_JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY | orjson.OPT_NON_STR_KEYS


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class PairwiseReport:
    """Symmetric M x M score matrix over model tags."""

    metric_name: str
    model_tags: List[str]
    matrix: np.ndarray
    params: Dict[str, Any] = field(default_factory=dict)
    created_at: str = field(default_factory=utc_timestamp)

    def __post_init__(self):
        self.model_tags = [str(tag) for tag in self.model_tags]
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        m = len(self.model_tags)
        if self.matrix.shape != (m, m):
            raise InvalidParameter(f"matrix shape {self.matrix.shape} does not match {m} model tags")
        if np.all(np.isfinite(self.matrix)) and not np.allclose(self.matrix, self.matrix.T,
                                                                rtol=0.0, atol=SYMMETRY_TOLERANCE):
            raise InvalidParameter(f"{self.metric_name} matrix is not symmetric")

    def value(self, tag_a: str, tag_b: str) -> float:
        return float(self.matrix[self.model_tags.index(tag_a), self.model_tags.index(tag_b)])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "metric_name": self.metric_name,
            "model_tags": list(self.model_tags),
            "matrix": self.matrix,
            "params": dict(self.params),
            "created_at": self.created_at,
        }

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.matrix, index=self.model_tags, columns=self.model_tags)
        frame.index.name = "model_tag"
        return frame

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "PairwiseReport":
        return cls(
            metric_name=payload["metric_name"],
            model_tags=payload["model_tags"],
            matrix=np.asarray(payload["matrix"], dtype=np.float64),
            params=payload.get("params", {}),
            created_at=payload.get("created_at", ""),
        )


@dataclass
class TableReport:
    """One row per model (or per model/variant) of scalar results, e.g. benchmark accuracies."""

    report_name: str
    frame: pd.DataFrame
    params: Dict[str, Any] = field(default_factory=dict)
    created_at: str = field(default_factory=utc_timestamp)
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        rows = [
            {key: _plain(value) for key, value in row.items()}
            for row in self.frame.reset_index().to_dict(orient="records")
        ]
        payload = {
            "report_name": self.report_name,
            "params": dict(self.params),
            "rows": rows,
        }
        if self.details:
            payload["details"] = self.details
        payload["created_at"] = self.created_at
        return payload

    def to_frame(self) -> pd.DataFrame:
        return self.frame


def _plain(value):
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


Report = Union[PairwiseReport, TableReport, Dict[str, Any]]


def check_finite(payload: Any, where: str = "report") -> None:
    """Raise ReportSerializationError on the first NaN/Inf anywhere inside ``payload``."""
    if isinstance(payload, dict):
        for key, value in payload.items():
            check_finite(value, f"{where}.{key}")
    elif isinstance(payload, (list, tuple)):
        for i, value in enumerate(payload):
            check_finite(value, f"{where}[{i}]")
    elif isinstance(payload, np.ndarray):
        if payload.dtype.kind == "f" and not np.all(np.isfinite(payload)):
            bad = np.argwhere(~np.isfinite(payload))[0]
            raise ReportSerializationError(f"non-finite value at {where}{list(bad)}")
    elif isinstance(payload, (float, np.floating)):
        if not math.isfinite(payload):
            raise ReportSerializationError(f"non-finite value at {where}")


def dumps(payload: Dict[str, Any]) -> bytes:
    check_finite(payload)
    try:
        return orjson.dumps(payload, option=_JSON_OPTIONS)
    except TypeError as exc:
        raise ReportSerializationError(str(exc)) from None


def emit(report: Report, path: str, format: str = "json") -> str:
    """Write ``report`` to ``path`` as JSON or as a CSV table/matrix."""
    if format not in REPORT_FORMATS:
        raise InvalidParameter(f"unknown report format '{format}'")
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        if format == "json":
            payload = report if isinstance(report, dict) else report.to_dict()
            data = dumps(payload)
            with open(path, "wb") as fh:
                fh.write(data)
                fh.write(b"\n")
        else:
            if isinstance(report, dict):
                raise ReportSerializationError("plain dict reports have no CSV form")
            write_frame(report.to_frame(), path, allow_missing=isinstance(report, TableReport))
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc}") from exc
    logger.info("Wrote %s", path)
    return path


def write_frame(frame: pd.DataFrame, path: str, index: bool = True, allow_missing: bool = False) -> str:
    """CSV with 17 significant digits; missing table cells are written empty when allowed."""
    values = frame.select_dtypes(include=[np.number]).to_numpy(dtype=np.float64)
    if allow_missing:
        values = values[~np.isnan(values)]
    if not np.all(np.isfinite(values)):
        raise ReportSerializationError(f"non-finite value in table for {path}")
    try:
        frame.to_csv(path, index=index, float_format=CSV_FLOAT_FORMAT, na_rep="")
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc}") from exc
    return path


def load_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return orjson.loads(fh.read())
    except OSError as exc:
        raise ReportIOError(f"cannot read {path}: {exc}") from exc


def load_pairwise_report(path: str) -> PairwiseReport:
    return PairwiseReport.from_dict(load_json(path))


def load_matrix_csv(path: str) -> PairwiseReport:
    frame = pd.read_csv(path, index_col=0)
    return PairwiseReport(os.path.splitext(os.path.basename(path))[0], list(frame.columns),
                          frame.to_numpy(dtype=np.float64))


def strip_timestamps(payload: Any, key: str = "created_at") -> Any:
    """Copy of ``payload`` without timestamp fields, for determinism comparisons."""
    if isinstance(payload, dict):
        return {k: strip_timestamps(v, key) for k, v in payload.items() if k != key}
    if isinstance(payload, list):
        return [strip_timestamps(v, key) for v in payload]
    return payload


def report_filename(name: str, format: str = "json", directory: Optional[str] = None) -> str:
    filename = f"{name}.{format}"
    return os.path.join(directory, filename) if directory else filename
