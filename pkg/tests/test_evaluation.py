import json
from fractions import Fraction

import numpy as np
import pytest

from contextstrip.data import Volume, generate_phantom
from contextstrip.evaluation import (
    ConfusionCounts,
    MetricsReport,
    confusion,
    dice_score,
    evaluate_crossval,
    evaluate_transfer,
    format_table,
    largest_component,
    predict_volume,
    score,
    sensitivity,
    specificity,
)
from contextstrip.network import init_params, small_arch
from contextstrip.training import TrainConfig


def test_two_by_two_fixture():
    pred = np.array([1, 1, 0, 0]).reshape(2, 2, 1)
    truth = np.array([1, 0, 1, 0]).reshape(2, 2, 1)
    c = confusion(pred, truth)
    assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)
    assert dice_score(c) == 0.5 and sensitivity(c) == 0.5 and specificity(c) == 0.5


def test_hand_fixture_dice():
    assert dice_score(ConfusionCounts(tp=2, fp=1, tn=5, fn=0)) == 0.8


def test_undefined_metrics_are_none():
    empty = ConfusionCounts(0, 0, 10, 0)
    assert dice_score(empty) is None and sensitivity(empty) is None
    assert specificity(empty) == 1.0
    assert specificity(ConfusionCounts(3, 0, 0, 0)) is None


def test_confusion_errors():
    with pytest.raises(ValueError, match="extents"):
        confusion(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(ValueError, match="binary"):
        confusion(np.full((2, 2, 2), 2), np.zeros((2, 2, 2)))


def test_metrics_equal_exact_rational_recount():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        shape = tuple(int(s) for s in rng.integers(1, 9, size=3))
        pred = (rng.random(shape) < rng.random()).astype(np.uint8)
        truth = (rng.random(shape) < rng.random()).astype(np.uint8)
        tp = fp = tn = fn = 0
        for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
            tp += p & t
            fp += p & (1 - t)
            fn += (1 - p) & t
            tn += (1 - p) & (1 - t)
        m = score(pred, truth)
        for key, num, den in (("dice", 2 * tp, 2 * tp + fp + fn), ("sensitivity", tp, tp + fn),
                              ("specificity", tn, tn + fp)):
            expected = float(Fraction(num, den)) if den else None
            assert m[key] == expected


def test_largest_component():
    mask = np.zeros((6, 6, 6), np.uint8)
    mask[0:2, 0:2, 0:2] = 1
    mask[3:6, 3:6, 3:6] = 1
    kept = largest_component(mask)
    assert kept.sum() == 27 and kept[0, 0, 0] == 0
    np.testing.assert_array_equal(largest_component(np.zeros((2, 2, 2))), 0)


def test_report_means_folds_and_exclusions():
    report = MetricsReport("crossval 2", "model", {
        "a": {"dice": 0.9, "sensitivity": 0.8, "specificity": 1.0},
        "b": {"dice": 0.7, "sensitivity": None, "specificity": 0.9},
        "c": {"dice": 0.5, "sensitivity": 0.6, "specificity": 0.8},
    }, {"a": 0, "b": 0, "c": 1})
    assert report.mean["dice"] == pytest.approx(0.7)
    assert report.mean["sensitivity"] == pytest.approx(0.7)
    assert report.mean["sensitivity_excluded"] == 1
    assert report.fold_means[0]["dice"] == pytest.approx(0.8)
    assert report.fold_means[1]["dice"] == pytest.approx(0.5)
    raw = json.loads(report.to_json())
    assert raw["protocol"] == "crossval 2"
    assert MetricsReport.from_dict(raw).per_subject == report.per_subject


def test_table_format():
    rows = [("model", {"dice": 0.97123, "sensitivity": 0.9, "specificity": None, "specificity_excluded": 2})]
    text = format_table(rows)
    lines = text.splitlines()
    assert [c.strip() for c in lines[0].split("|")] == ["Method", "Dice", "Sensitivity", "Specificity"]
    assert [c.strip() for c in lines[2].split("|")] == ["model", "97.12", "90.00", "n/a"]
    assert "specificity 2" in lines[3]


def test_predict_volume_restores_extents():
    arch = small_arch(stages=2, base_channels=4, codewords=4, depth=3, input_hw=32)
    params = init_params(arch)
    vol = generate_phantom(0, extent=40)
    pred = predict_volume(params, arch, vol)
    assert pred.mask.shape == vol.extents
    assert set(np.unique(pred.mask)) <= {0, 1}
    again = predict_volume(params, arch, vol)
    assert again.mask.tobytes() == pred.mask.tobytes()
    with pytest.raises(ValueError, match="architecture"):
        predict_volume(params, small_arch(stages=2, base_channels=8, depth=3, input_hw=32), vol)


@pytest.fixture(scope="module")
def crossval_run():
    cfg = TrainConfig(epochs=2, batch_size=4, slices_per_subject=4,
                      arch=small_arch(stages=2, base_channels=4, codewords=4, depth=3, input_hw=32))
    vols = [generate_phantom(s, extent=32) for s in range(8)]
    return evaluate_crossval(vols, 2, cfg, seed=0), cfg


def test_crossval_protocol(crossval_run):
    result, _ = crossval_run
    report = result.report
    assert report.protocol == "crossval 2"
    assert sorted(report.per_subject) == [f"phA_{s:04d}" for s in range(8)]
    assert sorted(report.folds.values()) == [0] * 4 + [1] * 4
    for fold in range(2):
        assert set(result.plan.test_ids(fold)) == {s for s, f in report.folds.items() if f == fold}
    assert len(result.states) == 2
    lines = report.table(per_fold=True).splitlines()
    assert lines[0].split("|")[0].strip() == "Method" and len(lines) == 5


def test_crossval_rejects_empty_fold():
    with pytest.raises(ValueError):
        evaluate_crossval([generate_phantom(0, extent=32)], 2, TrainConfig())


def test_transfer_report(crossval_run):
    result, cfg = crossval_run
    target = [generate_phantom(100 + s, extent=32, family="B") for s in range(2)]
    report = evaluate_transfer(result.states[0].params, cfg.arch, target, "A", "B")
    assert report.protocol == "transfer A->B"
    assert sorted(report.per_subject) == ["phB_0100", "phB_0101"]
    assert report.folds == {} and report.fold_means == []
    unlabeled = Volume(target[0].intensities, subject_id="x")
    with pytest.raises(ValueError, match="reference mask"):
        evaluate_transfer(result.states[0].params, cfg.arch, [unlabeled], "A", "B")


def test_prediction_is_slice_wise_with_single_slice_context():
    arch = small_arch(stages=2, base_channels=4, codewords=4, depth=1, input_hw=32)
    params = init_params(arch, 5)
    vol = generate_phantom(2, extent=32)
    perm = np.random.default_rng(0).permutation(vol.coronal_count)
    shuffled = Volume(vol.intensities[:, perm, :], vol.spacing, vol.mask[:, perm, :], vol.subject_id)
    base = predict_volume(params, arch, vol).mask
    np.testing.assert_array_equal(predict_volume(params, arch, shuffled).mask, base[:, perm, :])
