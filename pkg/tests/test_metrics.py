import math

import numpy as np
import pytest

from sonodistill.errors import ConfigError
from sonodistill.metrics import MetricsReport, aggregate_runs, dice, f1_macro, load_report


def brute_force_dice(pred, truth, classes):
    """Oracle: per-class pixel counting with explicit loops."""
    per_class = {}
    means = []
    for k in classes:
        inter = p_count = t_count = 0
        for i in range(pred.shape[0]):
            for j in range(pred.shape[1]):
                p = pred[i, j] == k
                t = truth[i, j] == k
                inter += int(p and t)
                p_count += int(p)
                t_count += int(t)
        if p_count == 0 and t_count == 0:
            per_class[k] = math.nan
        else:
            per_class[k] = 2 * inter / (p_count + t_count)
            means.append(per_class[k])
    return per_class, (sum(means) / len(means) if means else math.nan)


def brute_force_f1(pred, labels, class_count):
    """Oracle: confusion counts with explicit loops."""
    scores = []
    for k in range(class_count):
        tp = fp = fn = 0
        for p, t in zip(pred, labels):
            if p == k and t == k:
                tp += 1
            elif p == k and t != k:
                fp += 1
            elif p != k and t == k:
                fn += 1
        scores.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0)
    return sum(scores) / class_count


def test_dice_perfect_prediction():
    truth = np.array([[0, 1], [2, 1]])
    _, mean = dice(truth, truth, (1, 2))
    assert mean == 1.0


def test_dice_disjoint_regions_is_zero():
    pred = np.array([[1, 1], [0, 0]])
    truth = np.array([[0, 0], [1, 1]])
    _, mean = dice(pred, truth, (1,))
    assert mean == 0.0


def test_dice_two_by_two_derived_case():
    # truth class-1 at (0,0),(0,1); prediction class-1 at (0,0) -> 2/3
    truth = np.array([[1, 1], [0, 0]])
    pred = np.array([[1, 0], [0, 0]])
    per_class, mean = dice(pred, truth, (1,))
    assert per_class[1] == pytest.approx(2 / 3)
    assert mean == pytest.approx(2 / 3)


def test_dice_both_empty_class_excluded():
    pred = np.array([[1, 0], [0, 0]])
    truth = np.array([[1, 0], [0, 0]])
    per_class, mean = dice(pred, truth, (1, 2))
    assert math.isnan(per_class[2])
    assert mean == 1.0


def test_dice_truth_empty_prediction_nonempty_is_zero():
    pred = np.array([[2, 0], [0, 0]])
    truth = np.array([[0, 0], [0, 0]])
    per_class, _ = dice(pred, truth, (2,))
    assert per_class[2] == 0.0


def test_dice_shape_mismatch_rejected():
    with pytest.raises(ConfigError):
        dice(np.zeros((2, 2)), np.zeros((3, 3)), (1,))


def test_dice_matches_brute_force_on_1000_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        classes = tuple(range(1, int(rng.integers(2, 5))))
        pred = rng.integers(0, len(classes) + 1, (h, w))
        truth = rng.integers(0, len(classes) + 1, (h, w))
        got_pc, got_mean = dice(pred, truth, classes)
        want_pc, want_mean = brute_force_dice(pred, truth, classes)
        for k in classes:
            if math.isnan(want_pc[k]):
                assert math.isnan(got_pc[k])
            else:
                assert got_pc[k] == want_pc[k]
        if math.isnan(want_mean):
            assert math.isnan(got_mean)
        else:
            assert got_mean == pytest.approx(want_mean, abs=1e-12)


def test_f1_perfect_predictions():
    assert f1_macro([0, 1, 2], [0, 1, 2], 3) == 1.0


def test_f1_binary_derived_case():
    # TP=1 FP=1 FN=0 TN=1 for class 1 -> class-1 F1 = 2/3, class-0 F1 = 2/3
    pred = [1, 1, 0]
    labels = [1, 0, 0]
    assert f1_macro(pred, labels, 2) == pytest.approx(2 / 3)


def test_f1_all_one_class_on_balanced_data():
    pred = [1, 1, 1, 1]
    labels = [0, 0, 1, 1]
    assert f1_macro(pred, labels, 2) == pytest.approx(1 / 3)


def test_f1_empty_input_rejected():
    with pytest.raises(ConfigError):
        f1_macro([], [], 2)


def test_f1_matches_brute_force_on_1000_random_vectors():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        c = int(rng.integers(2, 6))
        pred = rng.integers(0, c, n)
        labels = rng.integers(0, c, n)
        assert f1_macro(pred, labels, c) == pytest.approx(
            brute_force_f1(pred.tolist(), labels.tolist(), c), abs=1e-12
        )


def test_aggregate_single_value():
    assert aggregate_runs([0.7]) == (0.7, 0.0)


def test_aggregate_direct_formula():
    mean, std = aggregate_runs([1.0, 2.0, 3.0], mode="folds")
    assert mean == 2.0
    assert std == pytest.approx(math.sqrt(2 / 3))


def test_aggregate_permutation_invariant():
    rng = np.random.default_rng(2)
    values = rng.random(7).tolist()
    base = aggregate_runs(values)
    for _ in range(5):
        rng.shuffle(values)
        assert aggregate_runs(values) == base


def test_aggregate_validation():
    with pytest.raises(ConfigError):
        aggregate_runs([])
    with pytest.raises(ConfigError):
        aggregate_runs([1.0], mode="bogus")


def test_metrics_report_round_trip(tmp_path):
    report = MetricsReport.from_values(
        "fass_full_dice", "dice", [0.8, 0.82, 0.78], "seeds",
        method="ssl-vit", pretrain_data="phantom", fingerprint="abc123",
    )
    path = tmp_path / "report.json"
    report.save(path)
    assert load_report(path) == report


def test_metrics_report_rejects_inconsistent_mean():
    with pytest.raises(ConfigError, match="recomputable"):
        MetricsReport(
            task_id="x", metric="f1", values=[0.5, 0.7], mean=0.9, std=0.0,
            aggregation="seeds", method="m", pretrain_data="d",
        )
