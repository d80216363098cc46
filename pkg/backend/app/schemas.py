"""Request / configuration models (pydantic)."""

import os
from typing import Dict, List, Literal, Optional

import orjson
from pydantic import BaseModel, Field, ValidationError, model_validator

from .errors import ConfigInvalid
from .services.linear_probe import ProbeConfig


class FileSpec(BaseModel):
    path: str
    format: Literal["npy", "csv", "rawf32"] = "npy"
    ids: Optional[str] = None
    header: bool = False


class ModelInput(BaseModel):
    tag: str
    test: FileSpec
    train: Optional[FileSpec] = None
    augmented: Dict[str, FileSpec] = Field(default_factory=dict)


class LabelFiles(BaseModel):
    train: Optional[str] = None
    test: Optional[str] = None


class GeometryOptions(BaseModel):
    t: float = Field(2.0, gt=0)
    pair_budget: Optional[int] = Field(None, ge=1)
    exact: Optional[bool] = None
    unconditional: bool = False


class CkaOptions(BaseModel):
    subsample: int = Field(10_000, ge=3)
    normalize: bool = False


class InvarianceOptions(BaseModel):
    normalize: bool = False


class GraphOptions(BaseModel):
    k: int = Field(..., ge=1)
    metric: Literal["cosine", "euclidean"] = "cosine"
    export_graphs: bool = False


class KnnOptions(BaseModel):
    ks: List[int] = Field(default_factory=lambda: [200])
    voting: Literal["uniform", "temperature_weighted"] = "temperature_weighted"
    temperature: float = Field(0.07, gt=0)


class KmeansOptions(BaseModel):
    k: Optional[int] = Field(None, ge=1)
    n_init: int = Field(10, ge=1)
    mode: Literal["auto", "lloyd", "minibatch"] = "auto"
    batch: int = Field(16_384, ge=1)
    export_assignments: bool = False


class OverlapOptions(BaseModel):
    reference: Optional[str] = None


class Analyses(BaseModel):
    geometry: Optional[GeometryOptions] = None
    cka: Optional[CkaOptions] = None
    invariance: Optional[InvarianceOptions] = None
    graph: Optional[GraphOptions] = None
    knn: Optional[KnnOptions] = None
    kmeans: Optional[KmeansOptions] = None
    probe: Optional[ProbeConfig] = None
    overlap: Optional[OverlapOptions] = None


class RunConfig(BaseModel):
    seed: int = Field(0, ge=0)
    output_dir: str = "reports"
    report_format: Literal["json", "csv"] = "json"
    labels: LabelFiles = Field(default_factory=LabelFiles)
    models: List[ModelInput] = Field(..., min_length=1)
    analyses: Analyses = Field(default_factory=Analyses)

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        tags = [m.tag for m in self.models]
        if len(set(tags)) != len(tags):
            raise ValueError(f"model tags must be unique, got {tags}")
        a = self.analyses
        if a.overlap is not None and a.probe is None:
            raise ValueError("the overlap analysis needs the probe analysis")
        if (a.knn is not None or a.probe is not None) and any(m.train is None for m in self.models):
            raise ValueError("knn and probe analyses need a train split for every model")
        if (a.knn is not None or a.probe is not None) and not (self.labels.train and self.labels.test):
            raise ValueError("knn and probe analyses need train and test labels")
        if (a.kmeans is not None or a.overlap is not None) and not self.labels.test:
            raise ValueError("kmeans and overlap analyses need test labels")
        if a.overlap is not None and a.overlap.reference is not None and a.overlap.reference not in tags:
            raise ValueError(f"overlap reference '{a.overlap.reference}' is not a model tag")
        return self

    # --------------------------
    # Paths
    # --------------------------

    def resolved(self, base_dir: Optional[str]) -> "RunConfig":
        """Copy with every relative path made relative to ``base_dir``."""
        if not base_dir:
            return self
        config = self.model_copy(deep=True)

        def fix(path):
            return path if path is None or os.path.isabs(path) else os.path.join(base_dir, path)

        for model in config.models:
            for spec in [model.test, model.train, *model.augmented.values()]:
                if spec is not None:
                    spec.path, spec.ids = fix(spec.path), fix(spec.ids)
        config.labels.train = fix(config.labels.train)
        config.labels.test = fix(config.labels.test)
        config.output_dir = fix(config.output_dir)
        return config

    def input_paths(self) -> List[str]:
        paths = []
        for model in self.models:
            for spec in [model.test, model.train, *model.augmented.values()]:
                if spec is None:
                    continue
                paths.append(spec.path)
                if spec.format == "rawf32":
                    paths.append(spec.path + ".json")
                if spec.ids:
                    paths.append(spec.ids)
        paths.extend(p for p in (self.labels.train, self.labels.test) if p)
        return paths

    def validate_paths(self) -> None:
        missing = [path for path in self.input_paths() if not os.path.isfile(path)]
        if missing:
            raise ConfigInvalid("missing input files: " + ", ".join(missing))


def parse_run_config(payload: dict, base_dir: Optional[str] = None) -> RunConfig:
    try:
        config = RunConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigInvalid(f"invalid run configuration: {exc}") from None
    return config.resolved(base_dir)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            payload = orjson.loads(fh.read())
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    except orjson.JSONDecodeError as exc:
        raise ConfigInvalid(f"config {path} is not valid JSON: {exc}") from None
    return parse_run_config(payload, os.path.dirname(os.path.abspath(path)))
