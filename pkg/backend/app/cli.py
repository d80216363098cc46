"""Command-line surface: one subcommand per analysis plus the config-driven ``run``.

Single-analysis commands build a RunConfig from their flags and go through the same
pipeline as ``run``, so every command writes the same report files.
"""

import functools
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import click
import orjson

from . import __version__
from .config import configure_logging
from .errors import ConfigInvalid, RepmetricError
from .schemas import load_run_config, parse_run_config
from .services.embedding_store import FORMATS, load_embeddings, load_labels
from .services.linear_probe import agreement_pairwise, load_predictions, overlap_partition
from .services.reports import emit, report_filename, utc_timestamp
from .services.runner import EXIT_CONFIG, EXIT_IO, run


def _echo_json(payload: dict) -> None:
    click.echo(orjson.dumps(payload, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY).decode())


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map domain errors to exit codes: config 1, analysis 2, ingest / I/O 3."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigInvalid as exc:
            _fail(exc.message, EXIT_CONFIG)
        except RepmetricError as exc:
            _fail(exc.message, exc.exit_code)
        except OSError as exc:
            _fail(str(exc), EXIT_IO)

    return wrapper


def parse_tagged(values: Sequence[str], what: str = "input") -> List[Tuple[str, str]]:
    """Split TAG=PATH arguments; a bare PATH is tagged with its file stem."""
    pairs = []
    for value in values:
        if "=" in value:
            tag, path = value.split("=", 1)
        else:
            tag, path = os.path.splitext(os.path.basename(value))[0], value
        if not tag or not path:
            raise ConfigInvalid(f"malformed {what} '{value}', expected TAG=PATH")
        pairs.append((tag, path))
    return pairs


def _file_spec(path: str, input_format: str, header: bool) -> dict:
    return {"path": path, "format": input_format, "header": header}


def _execute(payload: dict) -> None:
    config = parse_run_config(payload)
    summary = run(config)
    _echo_json(summary.to_dict())
    if summary.exit_code:
        sys.exit(summary.exit_code)


def _base_payload(tests: Sequence[str], seed: int, out: str, report_format: str, input_format: str,
                  header: bool, trains: Sequence[str] = (), labels: Optional[Dict[str, str]] = None) -> dict:
    train_paths = dict(parse_tagged(trains, "train input"))
    models = []
    for tag, path in parse_tagged(tests):
        model = {"tag": tag, "test": _file_spec(path, input_format, header)}
        if tag in train_paths:
            model["train"] = _file_spec(train_paths[tag], input_format, header)
        models.append(model)
    return {
        "seed": seed,
        "output_dir": out,
        "report_format": report_format,
        "labels": labels or {},
        "models": models,
        "analyses": {},
    }


# --------------------------
# Shared options
# --------------------------

def common_options(fn):
    fn = click.option("--header", is_flag=True, help="CSV inputs start with a header row.")(fn)
    fn = click.option("--input-format", type=click.Choice(FORMATS), default="npy", show_default=True,
                      help="Embedding file format.")(fn)
    fn = click.option("--format", "report_format", type=click.Choice(["json", "csv"]), default="json",
                      show_default=True, help="Also write CSV tables/matrices with csv.")(fn)
    fn = click.option("--out", default="reports", show_default=True, type=click.Path(file_okay=False),
                      help="Output directory for reports.")(fn)
    fn = click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0),
                      help="Global seed.")(fn)
    return fn


def label_options(fn):
    fn = click.option("--test-labels", type=click.Path(dir_okay=False),
                      help="Labels for the evaluation split.")(fn)
    fn = click.option("--train-labels", type=click.Path(dir_okay=False),
                      help="Labels for the training split.")(fn)
    return fn


@click.group(name="repmetric")
@click.version_option(__version__, prog_name="repmetric", message="%(prog)s %(version)s")
@click.option("--log-level", default=None, help="Logging level (default from REPMETRIC_LOG_LEVEL).")
def main(log_level: Optional[str]) -> None:
    """Compare learned image representations from precomputed embedding files."""
    configure_logging(log_level)


# --------------------------
# Commands
# --------------------------

@main.command()
@click.argument("path", type=click.Path(dir_okay=False))
@click.option("--tag", default=None, help="Model tag (default: file name).")
@click.option("--ids", default=None, type=click.Path(dir_okay=False), help="Sample-id sidecar.")
@click.option("--input-format", type=click.Choice(FORMATS), default="npy", show_default=True)
@click.option("--header", is_flag=True, help="CSV input starts with a header row.")
@_guarded
def ingest(path: str, tag: Optional[str], ids: Optional[str], input_format: str, header: bool) -> None:
    """Load one embedding file and print its summary."""
    embeddings = load_embeddings(path, input_format, tag, ids_path=ids, header=header)
    _echo_json(embeddings.summary())


@main.command()
@click.argument("inputs", nargs=-1, required=True)
@common_options
@click.option("--labels", type=click.Path(dir_okay=False), help="Labels for tolerance.")
@click.option("--t", "t", default=2.0, show_default=True, type=click.FloatRange(min=0, min_open=True))
@click.option("--pair-budget", default=None, type=click.IntRange(min=1), help="Monte-Carlo pair budget.")
@click.option("--exact/--sampled", default=None, help="Force exact or sampled uniformity.")
@click.option("--unconditional", is_flag=True, help="Average tolerance over all pairs.")
@_guarded
def geometry(inputs, seed, out, report_format, input_format, header, labels, t, pair_budget, exact,
             unconditional) -> None:
    """Uniformity and tolerance of each TAG=PATH input."""
    payload = _base_payload(inputs, seed, out, report_format, input_format, header, labels={"test": labels})
    payload["analyses"]["geometry"] = {"t": t, "pair_budget": pair_budget, "exact": exact,
                                       "unconditional": unconditional}
    _execute(payload)


@main.command()
@click.argument("inputs", nargs=-1, required=True)
@common_options
@click.option("--subsample", default=10_000, show_default=True, type=click.IntRange(min=3))
@click.option("--normalize", is_flag=True, help="L2-normalize rows before CKA.")
@_guarded
def cka(inputs, seed, out, report_format, input_format, header, subsample, normalize) -> None:
    """Pairwise linear CKA between TAG=PATH inputs."""
    payload = _base_payload(inputs, seed, out, report_format, input_format, header)
    payload["analyses"]["cka"] = {"subsample": subsample, "normalize": normalize}
    _execute(payload)


@main.command()
@click.argument("clean")
@click.argument("augmented", nargs=-1, required=True)
@common_options
@click.option("--normalize", is_flag=True)
@_guarded
def invariance(clean, augmented, seed, out, report_format, input_format, header, normalize) -> None:
    """CKA between a clean TAG=PATH input and augmented NAME=PATH inputs of the same images."""
    payload = _base_payload([clean], seed, out, report_format, input_format, header)
    payload["models"][0]["augmented"] = {
        name: _file_spec(path, input_format, header) for name, path in parse_tagged(augmented, "augmentation")
    }
    payload["analyses"]["invariance"] = {"normalize": normalize}
    _execute(payload)


@main.command()
@click.argument("inputs", nargs=-1, required=True)
@common_options
@click.option("--k", "k", required=True, type=click.IntRange(min=1), help="Neighbors per node.")
@click.option("--metric", type=click.Choice(["cosine", "euclidean"]), default="cosine", show_default=True)
@click.option("--export-graphs", is_flag=True, help="Write each neighbor graph as CSV.")
@_guarded
def graph(inputs, seed, out, report_format, input_format, header, k, metric, export_graphs) -> None:
    """Nearest-neighbor graph overlap between TAG=PATH inputs."""
    payload = _base_payload(inputs, seed, out, report_format, input_format, header)
    payload["analyses"]["graph"] = {"k": k, "metric": metric, "export_graphs": export_graphs}
    _execute(payload)


@main.command()
@click.argument("inputs", nargs=-1, required=True)
@common_options
@label_options
@click.option("--train", "trains", multiple=True, required=True, help="Training split as TAG=PATH.")
@click.option("--k", "ks", multiple=True, type=int, default=(200,), show_default=True,
              help="Neighbor count; repeat to sweep.")
@click.option("--voting", type=click.Choice(["uniform", "temperature_weighted"]),
              default="temperature_weighted", show_default=True)
@click.option("--temperature", default=0.07, show_default=True, type=click.FloatRange(min=0, min_open=True))
@_guarded
def knn(inputs, seed, out, report_format, input_format, header, train_labels, test_labels, trains, ks, voting,
        temperature) -> None:
    """k-NN classification of each test TAG=PATH input against its --train split."""
    payload = _base_payload(inputs, seed, out, report_format, input_format, header, trains,
                            {"train": train_labels, "test": test_labels})
    payload["analyses"]["knn"] = {"ks": list(ks), "voting": voting, "temperature": temperature}
    _execute(payload)


@main.command()
@click.argument("inputs", nargs=-1, required=True)
@common_options
@click.option("--labels", required=True, type=click.Path(dir_okay=False))
@click.option("--k", "k", default=None, type=click.IntRange(min=1), help="Clusters (default: classes).")
@click.option("--n-init", default=10, show_default=True, type=click.IntRange(min=1))
@click.option("--mode", type=click.Choice(["auto", "lloyd", "minibatch"]), default="auto", show_default=True)
@click.option("--batch", default=16_384, show_default=True, type=click.IntRange(min=1))
@click.option("--export-assignments", is_flag=True)
@_guarded
def kmeans(inputs, seed, out, report_format, input_format, header, labels, k, n_init, mode, batch,
           export_assignments) -> None:
    """k-means clustering accuracy of each TAG=PATH input."""
    payload = _base_payload(inputs, seed, out, report_format, input_format, header, labels={"test": labels})
    payload["analyses"]["kmeans"] = {"k": k, "n_init": n_init, "mode": mode, "batch": batch,
                                     "export_assignments": export_assignments}
    _execute(payload)


@main.command()
@click.argument("inputs", nargs=-1, required=True)
@common_options
@label_options
@click.option("--train", "trains", multiple=True, required=True, help="Training split as TAG=PATH.")
@click.option("--epochs", default=40, show_default=True, type=click.IntRange(min=1))
@click.option("--batch", "batch_size", default=256, show_default=True, type=click.IntRange(min=1))
@click.option("--lr", "base_lr", default=0.01, show_default=True, type=click.FloatRange(min=0, min_open=True))
@click.option("--holdout", "holdout_fraction", default=0.0, show_default=True,
              type=click.FloatRange(min=0, max=1, max_open=True))
@click.option("--overlap", "with_overlap", is_flag=True, help="Also report the prediction overlap.")
@click.option("--reference", default=None, help="Reference tag for the overlap block.")
@_guarded
def probe(inputs, seed, out, report_format, input_format, header, train_labels, test_labels, trains, epochs,
          batch_size, base_lr, holdout_fraction, with_overlap, reference) -> None:
    """Linear probe on each test TAG=PATH input, trained on its --train split."""
    payload = _base_payload(inputs, seed, out, report_format, input_format, header, trains,
                            {"train": train_labels, "test": test_labels})
    payload["analyses"]["probe"] = {"epochs": epochs, "batch_size": batch_size, "base_lr": base_lr,
                                    "holdout_fraction": holdout_fraction, "seed": seed}
    if with_overlap or reference:
        payload["analyses"]["overlap"] = {"reference": reference}
    _execute(payload)


@main.command()
@click.argument("predictions", nargs=-1, required=True)
@click.option("--labels", required=True, type=click.Path(dir_okay=False))
@click.option("--reference", default=None, help="Reference tag for the overlap block.")
@click.option("--out", default="reports", show_default=True, type=click.Path(file_okay=False))
@click.option("--format", "report_format", type=click.Choice(["json", "csv"]), default="json", show_default=True)
@_guarded
def overlap(predictions, labels, reference, out, report_format) -> None:
    """Correctness partition and agreement over prediction CSVs given as TAG=PATH."""
    predsets = [load_predictions(path, tag) for tag, path in parse_tagged(predictions, "prediction file")]
    label_set = load_labels(labels, sample_ids=predsets[0].sample_ids)
    partition = overlap_partition(predsets, label_set, reference)
    agreement = agreement_pairwise(predsets)
    emit({**partition.to_dict(), "created_at": utc_timestamp()}, report_filename("overlap", "json", out))
    emit(agreement, report_filename("agreement", "json", out))
    if report_format == "csv":
        emit(agreement, report_filename("agreement", "csv", out), "csv")
    _echo_json(partition.to_dict())


@main.command(name="run")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
              help="Run configuration JSON.")
@click.option("--seed", default=None, type=click.IntRange(min=0), help="Override the config seed.")
@click.option("--out", default=None, type=click.Path(file_okay=False), help="Override the output directory.")
@click.option("--format", "report_format", type=click.Choice(["json", "csv"]), default=None)
@_guarded
def run_command(config_path, seed, out, report_format) -> None:
    """Execute every analysis in a run configuration."""
    config = load_run_config(config_path)
    if report_format:
        config = config.model_copy(update={"report_format": report_format})
    summary = run(config, seed=seed, output_dir=out)
    _echo_json(summary.to_dict())
    if summary.exit_code:
        sys.exit(summary.exit_code)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Start the run registry API."""
    import uvicorn

    uvicorn.run("app.main:app", host=host, port=port)


if __name__ == "__main__":
    main()
