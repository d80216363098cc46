"""Config-driven batch pipeline: ingest -> align -> analyses -> report files.

Independent analyses run on a bounded worker pool. A failing analysis is recorded in the
run summary and does not stop the others.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ..config import get_settings
from ..errors import IngestError, InvalidParameter
from ..schemas import FileSpec, RunConfig
from .cka import cka_pairwise, invariance_table
from .clustering import greedy_accuracy, hungarian_accuracy, kmeans
from .embedding_store import EmbeddingSet, LabelSet, align, l2_normalize, load_embeddings, load_labels
from .geometry import geometry_score
from .linear_probe import PredictionSet, agreement_pairwise, overlap_partition, train_probes
from .neighbors import build_graph, knn_sweep, overlap_pairwise
from .reports import PairwiseReport, TableReport, emit, report_filename, utc_timestamp, write_frame

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2
EXIT_IO = 3

# analyses already share the run pool; their own fan-out stays serial
_INNER_WORKERS = 1


@dataclass
class RunSummary:
    exit_code: int
    output_dir: str
    reports: List[str] = field(default_factory=list)
    failures: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "exit_code": self.exit_code,
            "reports": sorted(os.path.relpath(p, self.output_dir) for p in self.reports),
            "failures": dict(sorted(self.failures.items())),
            "created_at": utc_timestamp(),
        }


@dataclass
class RunInputs:
    test: List[EmbeddingSet]
    train: Optional[List[EmbeddingSet]]
    augmented: List[Tuple[str, str, EmbeddingSet, EmbeddingSet]]
    test_labels: Optional[LabelSet]
    train_labels: Optional[LabelSet]

    @property
    def tags(self) -> List[str]:
        return [s.model_tag for s in self.test]


# --------------------------
# Ingest
# --------------------------

def _load(spec: FileSpec, tag: str) -> EmbeddingSet:
    return load_embeddings(spec.path, spec.format, tag, ids_path=spec.ids, header=spec.header)


def _split(sets: List[EmbeddingSet], labels_path: Optional[str],
           num_classes: Optional[int]) -> Tuple[List[EmbeddingSet], Optional[LabelSet]]:
    labels = None
    if labels_path:
        labels = load_labels(labels_path, sample_ids=sets[0].sample_ids, num_classes=num_classes)
    aligned, labels = align(sets, labels)
    if labels is not None:
        aligned = [s.with_labels(labels) for s in aligned]
    return aligned, labels


def _label_classes(config: RunConfig) -> Optional[int]:
    """Shared class count over the train and test label files."""
    counts = []
    for path in (config.labels.train, config.labels.test):
        if path:
            counts.append(load_labels(path).num_classes)
    return max(counts) if counts else None


def ingest(config: RunConfig, max_workers: Optional[int] = None) -> RunInputs:
    models = config.models
    with ThreadPoolExecutor(max_workers=max_workers or get_settings().threads) as pool:
        tests = list(pool.map(lambda m: _load(m.test, m.tag), models))
        trains = None
        if all(m.train is not None for m in models):
            trains = list(pool.map(lambda m: _load(m.train, m.tag), models))
        augmented_raw = [
            (m.tag, name, pool.submit(_load, spec, m.tag))
            for m in models for name, spec in sorted(m.augmented.items())
        ]
        augmented_loaded = [(tag, name, future.result()) for tag, name, future in augmented_raw]

    num_classes = _label_classes(config)
    tests, test_labels = _split(tests, config.labels.test, num_classes)
    train_labels = None
    if trains is not None:
        trains, train_labels = _split(trains, config.labels.train, num_classes)

    by_tag = {s.model_tag: s for s in tests}
    augmented = []
    for tag, name, aug in augmented_loaded:
        (clean, aug), _ = align([by_tag[tag], aug])
        augmented.append((tag, name, clean, aug))
    return RunInputs(tests, trains, augmented, test_labels, train_labels)


# --------------------------
# Analyses
# --------------------------

class _Writer:
    def __init__(self, output_dir: str, report_format: str):
        self.output_dir = output_dir
        self.report_format = report_format

    def write(self, name: str, report) -> List[str]:
        paths = [emit(report, report_filename(name, "json", self.output_dir), "json")]
        if self.report_format == "csv" and not isinstance(report, dict):
            paths.append(emit(report, report_filename(name, "csv", self.output_dir), "csv"))
        return paths

    def frame(self, relative: str, frame: pd.DataFrame, index: bool = False) -> str:
        path = os.path.join(self.output_dir, relative)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return write_frame(frame, path, index=index)


def _geometry(inputs: RunInputs, config: RunConfig, out: _Writer) -> List[str]:
    opts = config.analyses.geometry
    rows = []
    for embeddings in inputs.test:
        score = geometry_score(l2_normalize(embeddings), t=opts.t, pair_budget=opts.pair_budget,
                               seed=config.seed, exact=opts.exact, unconditional=opts.unconditional)
        rows.append({"model_tag": embeddings.model_tag, **score.to_dict()})
    frame = pd.DataFrame(rows).set_index("model_tag")
    return out.write("geometry", TableReport("geometry", frame, opts.model_dump()))


def _cka(inputs: RunInputs, config: RunConfig, out: _Writer) -> List[str]:
    opts = config.analyses.cka
    report = cka_pairwise(inputs.test, normalize=opts.normalize, default_subsample=opts.subsample,
                          seed=config.seed, max_workers=_INNER_WORKERS)
    report.params["seed"] = config.seed
    return out.write("cka", report)


def _invariance(inputs: RunInputs, config: RunConfig, out: _Writer) -> List[str]:
    if not inputs.augmented:
        raise InvalidParameter("no augmented embeddings configured")
    rows = invariance_table(inputs.augmented, normalize=config.analyses.invariance.normalize)
    frame = pd.DataFrame(rows).set_index("model_tag")
    return out.write("invariance", TableReport("augmentation_invariance", frame,
                                               config.analyses.invariance.model_dump()))


def _graph(inputs: RunInputs, config: RunConfig, out: _Writer) -> List[str]:
    opts = config.analyses.graph
    graphs = [build_graph(s, opts.k, opts.metric) for s in inputs.test]
    paths = out.write("graph_overlap", overlap_pairwise(graphs, max_workers=_INNER_WORKERS))
    if opts.export_graphs:
        paths += [out.frame(os.path.join("graphs", f"{g.model_tag}.csv"), g.to_frame()) for g in graphs]
    return paths


def _knn(inputs: RunInputs, config: RunConfig, out: _Writer) -> List[str]:
    opts = config.analyses.knn
    rows, details = [], {}
    for train, test in zip(inputs.train, inputs.test):
        sweep = knn_sweep(train, test, opts.ks, opts.voting, opts.temperature)
        rows.append({"model_tag": test.model_tag, "k": sweep.best.k, "accuracy": sweep.best.accuracy})
        details[test.model_tag] = sweep.to_dict()
    frame = pd.DataFrame(rows).set_index("model_tag")
    return out.write("knn", TableReport("knn", frame, opts.model_dump(), details=details))


def _kmeans(inputs: RunInputs, config: RunConfig, out: _Writer) -> List[str]:
    opts = config.analyses.kmeans
    labels = inputs.test_labels
    k = opts.k or labels.num_classes
    rows, paths = [], []
    for embeddings in inputs.test:
        result = kmeans(embeddings, k, n_init=opts.n_init, mode=opts.mode, batch=opts.batch, seed=config.seed,
                        max_workers=_INNER_WORKERS)
        greedy = greedy_accuracy(result, labels)
        hungarian = hungarian_accuracy(result, labels) if k == labels.num_classes else None
        rows.append({
            "model_tag": embeddings.model_tag,
            "k": k,
            "mode": result.mode,
            "inertia": result.inertia,
            "best_run_index": result.best_run_index,
            "hungarian_accuracy": hungarian.accuracy if hungarian else None,
            "greedy_accuracy": greedy.accuracy,
        })
        if opts.export_assignments:
            tag = embeddings.model_tag
            paths.append(out.frame(os.path.join("kmeans", f"{tag}_assignments.csv"), result.to_frame()))
            paths.append(out.frame(os.path.join("kmeans", f"{tag}_contingency.csv"),
                                   greedy.contingency_frame(), index=True))
            centroid_path = os.path.join(out.output_dir, "kmeans", f"{tag}_centroids.npy")
            np.save(centroid_path, result.centroids)
            paths.append(centroid_path)
    frame = pd.DataFrame(rows).set_index("model_tag")
    return out.write("kmeans", TableReport("kmeans", frame, {**opts.model_dump(), "seed": config.seed})) + paths


def _probe(inputs: RunInputs, config: RunConfig, out: _Writer) -> Tuple[List[str], List[PredictionSet]]:
    opts = config.analyses.probe
    num_classes = max(inputs.train_labels.num_classes, inputs.test_labels.num_classes)
    results = train_probes(list(zip(inputs.train, inputs.test)), opts, num_classes,
                           max_workers=_INNER_WORKERS)
    rows, paths, predsets = [], [], []
    for model, evaluation in results:
        rows.append({
            "model_tag": model.model_tag,
            "accuracy": evaluation.accuracy,
            "final_loss": model.loss_history[-1],
            "best_epoch": model.best_epoch,
        })
        predsets.append(evaluation.predictions)
        paths.append(out.frame(os.path.join("predictions", f"{model.model_tag}.csv"),
                               evaluation.predictions.to_frame()))
    frame = pd.DataFrame(rows).set_index("model_tag")
    return out.write("probe", TableReport("linear_probe", frame, opts.model_dump())) + paths, predsets


def _overlap(predsets: List[PredictionSet], inputs: RunInputs, config: RunConfig, out: _Writer) -> List[str]:
    partition = overlap_partition(predsets, inputs.test_labels, config.analyses.overlap.reference)
    paths = out.write("overlap", {**partition.to_dict(), "created_at": utc_timestamp()})
    agreement: PairwiseReport = agreement_pairwise(predsets)
    return paths + out.write("agreement", agreement)


_ANALYSES: Dict[str, Callable] = {
    "geometry": _geometry,
    "cka": _cka,
    "invariance": _invariance,
    "graph": _graph,
    "knn": _knn,
    "kmeans": _kmeans,
}


def run(config: RunConfig, seed: Optional[int] = None, output_dir: Optional[str] = None,
        max_workers: Optional[int] = None) -> RunSummary:
    """Execute every configured analysis and write one report per analysis plus summary.json.

    Raises ConfigInvalid (before any computation) when an input path is missing.
    """
    config.validate_paths()
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if output_dir is not None:
        updates["output_dir"] = output_dir
    if updates:
        config = config.model_copy(update=updates)
    os.makedirs(config.output_dir, exist_ok=True)
    summary = RunSummary(EXIT_OK, config.output_dir)
    workers = max_workers or get_settings().threads
    out = _Writer(config.output_dir, config.report_format)

    try:
        inputs = ingest(config, workers)
    except (IngestError, OSError) as exc:
        logger.error("Ingest failed: %s", exc)
        summary.failures["ingest"] = str(exc)
        summary.exit_code = EXIT_IO
        _write_summary(summary)
        return summary

    selected = [name for name in _ANALYSES if getattr(config.analyses, name) is not None]
    logger.info("Running %s on %d models", ", ".join(selected) or "nothing", len(inputs.test))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {name: pool.submit(_ANALYSES[name], inputs, config, out) for name in selected}
        probe_future = pool.submit(_probe, inputs, config, out) if config.analyses.probe else None

        for name, future in futures.items():
            _collect(summary, name, future.result)

        predsets = None
        if probe_future is not None:
            result = _collect(summary, "probe", probe_future.result)
            if result is not None:
                summary.reports.extend(result[0])
                predsets = result[1]

    if config.analyses.overlap is not None:
        if predsets is None:
            summary.failures["overlap"] = "probe analysis failed"
        else:
            _collect(summary, "overlap", lambda: _overlap(predsets, inputs, config, out))

    if summary.failures:
        summary.exit_code = EXIT_PARTIAL
    _write_summary(summary)
    return summary


def _collect(summary: RunSummary, name: str, outcome: Callable):
    try:
        result = outcome()
    except Exception as exc:
        logger.error("Analysis '%s' failed: %s", name, exc)
        summary.failures[name] = str(exc)
        return None
    if name != "probe":
        summary.reports.extend(result)
    logger.info("Analysis '%s' finished", name)
    return result


def _write_summary(summary: RunSummary) -> None:
    path = os.path.join(summary.output_dir, "summary.json")
    emit(summary.to_dict(), path, "json")
