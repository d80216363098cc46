import numpy as np
import pytest

from app.errors import DegenerateLabels, DimMismatch, InvalidParameter, MisalignedPredictions
from app.services.embedding_store import LabelSet
from app.services.linear_probe import (
    PredictionSet,
    ProbeConfig,
    ProbeModel,
    agreement_pairwise,
    evaluate_probe,
    load_predictions,
    load_probe,
    overlap_partition,
    probe_loss_and_grad,
    save_probe,
    train_probe,
    train_probes,
)


def separable(make_set, blobs, tag="m"):
    train_x, train_y, test_x, test_y = blobs()
    return make_set(train_x, tag=tag, labels=train_y), make_set(test_x, tag=tag, labels=test_y)


# --------------------------
# Training
# --------------------------

def test_gradient_matches_finite_differences(rng):
    x = rng.normal(size=(12, 4))
    y = rng.integers(0, 3, size=12)
    w = rng.normal(scale=0.3, size=(3, 4))
    b = rng.normal(scale=0.3, size=3)
    _, grad_w, grad_b = probe_loss_and_grad(w, b, x, y, weight_decay=1e-2)

    eps = 1e-6
    numeric_w = np.zeros_like(w)
    for idx in np.ndindex(*w.shape):
        plus, minus = w.copy(), w.copy()
        plus[idx] += eps
        minus[idx] -= eps
        numeric_w[idx] = (probe_loss_and_grad(plus, b, x, y, 1e-2)[0]
                          - probe_loss_and_grad(minus, b, x, y, 1e-2)[0]) / (2 * eps)
    numeric_b = np.zeros_like(b)
    for i in range(3):
        plus, minus = b.copy(), b.copy()
        plus[i] += eps
        minus[i] -= eps
        numeric_b[i] = (probe_loss_and_grad(w, plus, x, y, 1e-2)[0]
                        - probe_loss_and_grad(w, minus, x, y, 1e-2)[0]) / (2 * eps)

    assert np.allclose(grad_w, numeric_w, rtol=1e-5, atol=1e-8)
    assert np.allclose(grad_b, numeric_b, rtol=1e-5, atol=1e-8)


def test_weight_decay_skips_the_bias(rng):
    x = rng.normal(size=(5, 2))
    y = np.array([0, 1, 0, 1, 1])
    w, b = np.ones((2, 2)), np.ones(2)
    _, gw0, gb0 = probe_loss_and_grad(w, b, x, y, 0.0)
    _, gw1, gb1 = probe_loss_and_grad(w, b, x, y, 0.5)
    assert np.allclose(gw1 - gw0, 0.5 * w)
    assert np.array_equal(gb0, gb1)


def test_separable_data_is_learned(make_set, blobs):
    train, test = separable(make_set, blobs)
    model = train_probe(train)
    assert len(model.loss_history) == ProbeConfig().epochs
    assert model.loss_history[-1] < model.loss_history[0]
    assert evaluate_probe(model, train).accuracy == 1.0
    evaluation = evaluate_probe(model, test)
    assert evaluation.accuracy == 1.0
    assert evaluation.predictions.correct.all()


def test_training_is_seeded(make_set, blobs):
    train, _ = separable(make_set, blobs)
    config = ProbeConfig(epochs=5, batch_size=16, seed=3)
    first, second = train_probe(train, config), train_probe(train, config)
    assert np.array_equal(first.weights, second.weights)
    assert first.loss_history == second.loss_history


def test_standardization_is_frozen_from_train(make_set, blobs):
    train, _ = separable(make_set, blobs)
    model = train_probe(train, ProbeConfig(epochs=2))
    assert np.allclose(model.feature_mean, train.matrix.mean(axis=0))
    assert np.allclose(model.feature_var, train.matrix.var(axis=0))


def test_constant_dimension_is_tolerated(make_set, rng):
    x = np.column_stack([rng.normal(size=40), np.full(40, 3.0)])
    y = (x[:, 0] > 0).astype(int)
    model = train_probe(make_set(x, labels=y), ProbeConfig(epochs=5))
    assert model.feature_var[1] == 1.0
    assert np.all(np.isfinite(model.weights))


def test_holdout_selects_an_epoch(make_set, blobs):
    train, test = separable(make_set, blobs)
    model = train_probe(train, ProbeConfig(epochs=10, holdout_fraction=0.2))
    assert 0 <= model.best_epoch < 10
    assert len(model.loss_history) == 10
    assert evaluate_probe(model, test).accuracy == 1.0


def test_full_batch_mode(make_set, blobs):
    train, test = separable(make_set, blobs)
    model = train_probe(train, ProbeConfig(full_batch=True, epochs=20))
    assert evaluate_probe(model, test).accuracy == 1.0


def test_full_batch_descent_never_raises_the_loss(make_set, blobs):
    train, _ = separable(make_set, blobs)
    model = train_probe(train, ProbeConfig(full_batch=True, epochs=30, momentum=0.0, base_lr=0.1))
    history = model.loss_history
    assert len(history) == 30
    assert all(later <= earlier + 1e-12 for earlier, later in zip(history, history[1:]))


def test_single_class_predicts_it_everywhere(make_set, rng):
    train = make_set(rng.normal(size=(20, 3)), labels=np.zeros(20, dtype=np.int64))
    model = train_probe(train, ProbeConfig(epochs=3))
    assert model.num_classes == 1
    test = make_set(rng.normal(size=(10, 3)), labels=np.zeros(10, dtype=np.int64))
    evaluation = evaluate_probe(model, test)
    assert evaluation.predictions.predictions.tolist() == [0] * 10
    assert evaluation.accuracy == 1.0


def test_untrained_weights_predict_the_first_class(make_set, rng):
    model = ProbeModel(np.zeros((4, 3)), np.zeros(4), ProbeConfig())
    evaluation = evaluate_probe(model, make_set(rng.normal(size=(15, 3))))
    assert evaluation.predictions.predictions.tolist() == [0] * 15
    assert evaluation.accuracy is None


def test_absent_class_is_strict_error(make_set, rng):
    train = make_set(rng.normal(size=(6, 2)), labels=[0, 0, 1, 1, 0, 1])
    with pytest.raises(DegenerateLabels):
        train_probe(train, ProbeConfig(strict=True), num_classes=3)
    model = train_probe(train, ProbeConfig(epochs=2), num_classes=3)
    assert model.num_classes == 3


def test_dimension_mismatch(make_set, blobs, rng):
    train, _ = separable(make_set, blobs)
    model = train_probe(train, ProbeConfig(epochs=1))
    with pytest.raises(DimMismatch):
        evaluate_probe(model, make_set(rng.normal(size=(3, 2))))


def test_train_probes_pairs(make_set, blobs):
    pairs = [separable(make_set, blobs, tag) for tag in ("a", "b")]
    results = train_probes(pairs, ProbeConfig(epochs=10), num_classes=3)
    assert [model.model_tag for model, _ in results] == ["a", "b"]
    assert all(evaluation.accuracy == 1.0 for _, evaluation in results)


def test_save_and_load_probe(tmp_path, make_set, blobs):
    train, test = separable(make_set, blobs)
    model = train_probe(train, ProbeConfig(epochs=10))
    json_path, blob_path = save_probe(model, str(tmp_path / "probe"))
    assert blob_path.endswith(".f32")
    loaded = load_probe(str(tmp_path / "probe"))
    assert loaded.weights.shape == model.weights.shape
    assert np.allclose(loaded.weights, model.weights, rtol=1e-6)
    assert np.array_equal(evaluate_probe(loaded, test).predictions.predictions,
                          evaluate_probe(model, test).predictions.predictions)


def test_predictions_csv(tmp_path):
    preds = PredictionSet("vit", ("a", "b", "c"), np.array([2, 0, 1]))
    path = tmp_path / "vit.csv"
    preds.to_frame().to_csv(path, index=False)
    loaded = load_predictions(str(path))
    assert loaded.model_tag == "vit"
    assert loaded.sample_ids == ("a", "b", "c")
    assert loaded.predictions.tolist() == [2, 0, 1]


# --------------------------
# Overlap
# --------------------------

def predsets_for(truth, correct_rows, tags):
    """Prediction sets whose correctness pattern is given row by row."""
    ids = tuple(f"i{j:03d}" for j in range(len(truth)))
    sets = []
    for tag, correct in zip(tags, correct_rows):
        predictions = np.where(correct, truth, (truth + 1) % 3)
        sets.append(PredictionSet(tag, ids, predictions))
    return sets, LabelSet.from_labels(truth, ids, 3)


def test_partition_by_hand():
    truth = np.array([0, 1, 2, 0, 1])
    correct = np.array([
        [1, 1, 0, 0, 1],
        [1, 0, 1, 0, 1],
    ], dtype=bool)
    predsets, labels = predsets_for(truth, correct, ["a", "b"])
    partition = overlap_partition(predsets, labels, reference="a")
    assert partition.all_correct == 2
    assert partition.none_correct == 1
    assert partition.unique_correct == {"a": 1, "b": 1}
    assert partition.exactly_correct == [1, 2, 2]
    assert partition.reference_block == {"both_correct": 2, "reference_only": 1, "others_only": 1, "neither": 1}
    assert partition.agreement == 3


def test_partition_closure(rng):
    truth = rng.integers(0, 3, size=1000)
    correct = rng.random(size=(3, 1000)) < [[0.7], [0.6], [0.5]]
    predsets, labels = predsets_for(truth, correct, ["resnet", "simclr", "byol"])
    partition = overlap_partition(predsets, labels, reference="resnet")
    assert sum(partition.exactly_correct) == 1000
    assert sum(partition.reference_block.values()) == 1000
    fractions = partition.to_dict()["fractions"]
    assert abs(sum(fractions["reference_block"].values()) - 1.0) <= 1e-12
    assert abs(sum(fractions["exactly_correct"]) - 1.0) <= 1e-12
    assert partition.exactly_correct[1] == sum(partition.unique_correct.values())


def test_partition_follows_ids_not_positions():
    truth = np.array([0, 1, 2])
    labels = LabelSet.from_labels(truth, ["x", "y", "z"])
    a = PredictionSet("a", ("x", "y", "z"), np.array([0, 1, 2]))
    b = PredictionSet("b", ("z", "y", "x"), np.array([2, 1, 0]))
    assert overlap_partition([a, b], labels).all_correct == 3


def test_partition_errors():
    labels = LabelSet.from_labels([0, 1], ["x", "y"])
    a = PredictionSet("a", ("x", "y"), np.array([0, 1]))
    with pytest.raises(InvalidParameter):
        overlap_partition([a], labels)
    with pytest.raises(MisalignedPredictions):
        overlap_partition([a, PredictionSet("b", ("x", "q"), np.array([0, 1]))], labels)
    with pytest.raises(InvalidParameter):
        overlap_partition([a, PredictionSet("b", ("x", "y"), np.array([0, 1]))], labels, reference="c")


def test_agreement_matrix():
    ids = ("p", "q", "r", "s")
    report = agreement_pairwise([
        PredictionSet("a", ids, np.array([0, 1, 2, 0])),
        PredictionSet("b", ids, np.array([0, 1, 0, 0])),
        PredictionSet("c", ids, np.array([1, 1, 2, 2])),
    ])
    assert report.metric_name == "linear_prediction_agreement"
    assert report.matrix.tolist() == [[1.0, 0.75, 0.5], [0.75, 1.0, 0.25], [0.5, 0.25, 1.0]]
