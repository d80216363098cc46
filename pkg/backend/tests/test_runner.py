import os

import numpy as np
import orjson
import pytest

from app.errors import ConfigInvalid
from app.schemas import load_run_config, parse_run_config
from app.services.reports import load_json, strip_timestamps
from app.services import runner
from app.services.runner import EXIT_IO, EXIT_OK, EXIT_PARTIAL, run

EXPECTED_REPORTS = {
    "geometry.json", "geometry.csv",
    "cka.json", "cka.csv",
    "invariance.json", "invariance.csv",
    "graph_overlap.json", "graph_overlap.csv",
    "knn.json", "knn.csv",
    "kmeans.json", "kmeans.csv",
    "probe.json", "probe.csv",
    "overlap.json",
    "agreement.json", "agreement.csv",
    "graphs/alpha.csv", "graphs/beta.csv",
    "kmeans/alpha_assignments.csv", "kmeans/alpha_contingency.csv", "kmeans/alpha_centroids.npy",
    "kmeans/beta_assignments.csv", "kmeans/beta_contingency.csv", "kmeans/beta_centroids.npy",
    "predictions/alpha.csv", "predictions/beta.csv",
}


def edit_config(path, **changes):
    with open(path, "rb") as fh:
        payload = orjson.loads(fh.read())
    for key, value in changes.items():
        payload["analyses"][key] = value
    with open(path, "wb") as fh:
        fh.write(orjson.dumps(payload))


def listing(root):
    found = set()
    for directory, _, files in os.walk(root):
        for name in files:
            found.add(os.path.relpath(os.path.join(directory, name), root).replace(os.sep, "/"))
    return found


@pytest.mark.timeout(120)
def test_full_pipeline_writes_every_report(fixture_project, tmp_path):
    out = str(tmp_path / "out")
    summary = run(load_run_config(fixture_project), output_dir=out)
    assert summary.failures == {}
    assert summary.exit_code == EXIT_OK
    assert listing(out) == EXPECTED_REPORTS | {"summary.json"}

    saved = load_json(os.path.join(out, "summary.json"))
    assert saved["exit_code"] == 0
    assert sorted(saved["reports"]) == sorted(EXPECTED_REPORTS)

    cka = load_json(os.path.join(out, "cka.json"))
    assert cka["model_tags"] == ["alpha", "beta"]
    assert cka["params"]["seed"] == 7
    overlap = load_json(os.path.join(out, "overlap.json"))
    assert overlap["n_samples"] == 12
    assert sum(overlap["counts"]["reference_block"].values()) == 12


def test_relative_output_dir_follows_the_config(fixture_project):
    config = load_run_config(fixture_project)
    assert config.output_dir == os.path.join(os.path.dirname(fixture_project), "reports")


@pytest.mark.timeout(120)
def test_runs_are_deterministic(fixture_project, tmp_path):
    config = load_run_config(fixture_project)
    first, second = str(tmp_path / "one"), str(tmp_path / "two")
    run(config, output_dir=first)
    run(config, output_dir=second)
    files = listing(first)
    assert files == listing(second)
    for name in files:
        a, b = os.path.join(first, name), os.path.join(second, name)
        if name.endswith(".json"):
            assert strip_timestamps(load_json(a)) == strip_timestamps(load_json(b)), name
        else:
            with open(a, "rb") as fa, open(b, "rb") as fb:
                assert fa.read() == fb.read(), name


def test_seed_override_reaches_the_reports(fixture_project, tmp_path):
    edit_config(fixture_project, probe=None, overlap=None, knn=None, kmeans=None, graph=None)
    out = str(tmp_path / "seeded")
    run(load_run_config(fixture_project), seed=11, output_dir=out)
    assert load_json(os.path.join(out, "cka.json"))["params"]["seed"] == 11


def test_missing_input_fails_before_any_output(fixture_project, tmp_path):
    os.remove(os.path.join(os.path.dirname(fixture_project), "beta_train.csv"))
    out = tmp_path / "never"
    with pytest.raises(ConfigInvalid) as exc:
        run(load_run_config(fixture_project), output_dir=str(out))
    assert "beta_train.csv" in str(exc.value)
    assert not out.exists()


def test_identical_inputs_give_unit_cka(fixture_project, tmp_path):
    base = os.path.dirname(fixture_project)
    spec = {"path": "alpha_test.csv", "format": "csv", "ids": "test_ids.txt"}
    config = parse_run_config({
        "models": [{"tag": "first", "test": spec}, {"tag": "second", "test": spec}],
        "analyses": {"cka": {}},
    }, base)
    out = str(tmp_path / "cka")
    summary = run(config, output_dir=out)
    assert summary.exit_code == EXIT_OK
    matrix = np.array(load_json(os.path.join(out, "cka.json"))["matrix"])
    assert np.allclose(matrix, [[1.0, 1.0], [1.0, 1.0]], atol=1e-12, rtol=0)


def test_failing_analysis_does_not_stop_the_rest(fixture_project, tmp_path):
    edit_config(fixture_project, graph={"k": 20})
    out = str(tmp_path / "partial")
    summary = run(load_run_config(fixture_project), output_dir=out)
    assert summary.exit_code == EXIT_PARTIAL
    assert set(summary.failures) == {"graph"}
    files = listing(out)
    assert "graph_overlap.json" not in files
    assert {"cka.json", "geometry.json", "overlap.json"} <= files
    assert load_json(os.path.join(out, "summary.json"))["failures"]["graph"]


def test_overlap_is_skipped_when_the_probe_fails(fixture_project, tmp_path):
    edit_config(fixture_project, probe={"epochs": 5, "strict": True})
    with open(os.path.join(os.path.dirname(fixture_project), "train_labels.txt"), "w") as fh:
        fh.write("\n".join(["0"] * 6 + ["1"] * 6) + "\n")
    summary = run(load_run_config(fixture_project), output_dir=str(tmp_path / "strict"))
    assert summary.exit_code == EXIT_PARTIAL
    assert "probe" in summary.failures
    assert summary.failures["overlap"] == "probe analysis failed"


def test_unreadable_embeddings_exit_with_io_code(fixture_project, tmp_path):
    with open(os.path.join(os.path.dirname(fixture_project), "alpha_test.csv"), "w") as fh:
        fh.write("1.0,2.0,x,4.0\n")
    out = str(tmp_path / "broken")
    summary = run(load_run_config(fixture_project), output_dir=out)
    assert summary.exit_code == EXIT_IO
    assert "ingest" in summary.failures
    assert listing(out) == {"summary.json"}


def test_unexpected_errors_are_recorded_as_failures(fixture_project, tmp_path, monkeypatch):
    def broken(inputs, config, out):
        raise ValueError("math domain error")

    monkeypatch.setitem(runner._ANALYSES, "geometry", broken)
    out = str(tmp_path / "unexpected")
    summary = run(load_run_config(fixture_project), output_dir=out)
    assert summary.exit_code == EXIT_PARTIAL
    assert summary.failures == {"geometry": "math domain error"}
    assert load_json(os.path.join(out, "summary.json"))["failures"] == {"geometry": "math domain error"}
    assert "cka.json" in listing(out)


def test_sharp_geometry_kernel_still_reports(fixture_project, tmp_path):
    edit_config(fixture_project, geometry={"t": 1e7})
    out = str(tmp_path / "sharp")
    summary = run(load_run_config(fixture_project), output_dir=out)
    assert "geometry" not in summary.failures
    rows = load_json(os.path.join(out, "geometry.json"))["rows"]
    assert all(row["uniformity"] <= 0.0 for row in rows)


def test_analyses_do_not_nest_worker_pools(fixture_project, tmp_path, monkeypatch):
    seen = {}

    def spy(name, fn):
        def wrapper(*args, **kwargs):
            seen.setdefault(name, []).append(kwargs.get("max_workers"))
            return fn(*args, **kwargs)
        monkeypatch.setattr(runner, name, wrapper)

    for name in ("cka_pairwise", "overlap_pairwise", "kmeans", "train_probes"):
        spy(name, getattr(runner, name))
    summary = run(load_run_config(fixture_project), output_dir=str(tmp_path / "pools"), max_workers=4)
    assert summary.exit_code == EXIT_OK
    assert set(seen) == {"cka_pairwise", "overlap_pairwise", "kmeans", "train_probes"}
    assert all(workers == [1] * len(workers) for workers in seen.values())
