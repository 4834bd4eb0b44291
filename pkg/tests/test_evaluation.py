import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdpformer.evaluation import (CaseEval, accuracies, build_report, case_dice,
                                  confusion, confusion_figure, dice_score,
                                  relabel_nonpdac, write_classification_csv,
                                  write_dice_csv, write_metrics_json)
from mdpformer.taxonomy import CLASS10_LABELS, LesionClass10
from mdpformer.volumes import UNASSIGNED_CODE, LabelVolume

# published reference column and test-set counts used as a metric oracle
REFERENCE_PER_CLASS_PCT = (99.5, 96.5, 47.1, 72.0, 65.8, 33.3, 44.8, 55.3, 35.7, 11.7)
TEST_SET_COUNTS = (202, 283, 34, 25, 73, 9, 29, 38, 14, 17)


def reference_confusion():
    """Confusion matrix whose per-class accuracies reproduce the published column."""
    cm = np.zeros((10, 10), dtype=np.int64)
    for i, (acc, n) in enumerate(zip(REFERENCE_PER_CLASS_PCT, TEST_SET_COUNTS)):
        correct = round(acc / 100.0 * n)
        cm[i, i] = correct
        cm[i, (i + 1) % 10] += n - correct
    return cm


class TestConfusion:
    def test_perfect_predictions_diagonal(self):
        labels = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9] * 3
        cm = confusion(labels, labels)
        assert np.trace(cm) == 30 and cm.sum() == 30

    def test_single_case_entry(self):
        cm = confusion([LesionClass10.PDAC], [LesionClass10.PNET])
        assert cm[1, 2] == 1 and cm.sum() == 1

    def test_row_sums_count_truth_classes(self, rng):
        labels = rng.integers(0, 10, size=200)
        preds = rng.integers(0, 10, size=200)
        cm = confusion(labels, preds)
        for c in range(10):
            assert cm[c].sum() == (labels == c).sum()
        assert cm.sum() == 200

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            confusion([0, 1], [0])
        with pytest.raises(ValueError):
            confusion([], [])


class TestAccuracies:
    def test_published_reference_numbers(self):
        acc = accuracies(reference_confusion())
        assert 100 * acc.balanced == pytest.approx(56.17, abs=0.01)
        assert 100 * acc.regular == pytest.approx(82.9, abs=0.1)

    def test_identity_matrix_all_ones(self):
        acc = accuracies(np.eye(10, dtype=np.int64) * 4)
        assert np.allclose(acc.per_class, 1.0)
        assert acc.regular == 1.0 and acc.balanced == 1.0

    def test_empty_row_excluded_and_flagged(self):
        cm = np.zeros((10, 10), dtype=np.int64)
        cm[0, 0] = 5
        cm[1, 1] = 3
        cm[1, 0] = 1
        acc = accuracies(cm)
        assert acc.undefined == list(range(2, 10))
        assert acc.balanced == pytest.approx((1.0 + 0.75) / 2)

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            accuracies(np.zeros((10, 10), dtype=np.int64))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_regular_equals_weighted_per_class(self, seed):
        rng = np.random.default_rng(seed)
        cm = rng.integers(0, 20, size=(10, 10))
        if cm.sum() == 0:
            cm[0, 0] = 1
        acc = accuracies(cm)
        weights = cm.sum(axis=1) / cm.sum()
        weighted = np.nansum(np.where(np.isnan(acc.per_class), 0.0, acc.per_class)
                             * weights)
        assert acc.regular == pytest.approx(weighted, rel=1e-12)

    def test_balanced_invariant_to_class_duplication(self, rng):
        labels = rng.integers(0, 4, size=60).tolist()
        preds = rng.integers(0, 4, size=60).tolist()
        base = accuracies(confusion(labels, preds))
        dup_labels = labels + [i for i in labels if i == 2]
        dup_preds = preds + [p for i, p in zip(labels, preds) if i == 2]
        doubled = accuracies(confusion(dup_labels, dup_preds))
        assert doubled.balanced == pytest.approx(base.balanced, rel=1e-12)


class TestDiceScore:
    def test_identical_masks(self, rng):
        m = rng.integers(0, 2, size=(6, 6, 3))
        assert dice_score(m, m.copy(), 1) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4, 2), dtype=int)
        b = np.zeros((4, 4, 2), dtype=int)
        a[0, 0, 0] = b[1, 1, 1] = 1
        assert dice_score(a, b, 1) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4, 1), dtype=int)
        b = np.zeros((4, 4, 1), dtype=int)
        a[0, 0, 0] = a[0, 1, 0] = 1
        b[0, 1, 0] = b[0, 2, 0] = 1
        assert dice_score(a, b, 1) == 0.5

    def test_both_empty_is_one_single_empty_is_zero(self):
        empty = np.zeros((3, 3, 1), dtype=int)
        one = empty.copy()
        one[0, 0, 0] = 1
        assert dice_score(empty, empty.copy(), 1) == 1.0
        assert dice_score(one, empty, 1) == 0.0
        assert dice_score(empty, one, 1) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 3, size=(5, 5, 2))
        b = rng.integers(0, 3, size=(5, 5, 2))
        for code in (0, 1, 2):
            d1 = dice_score(a, b, code)
            assert d1 == dice_score(b, a, code)
            assert 0.0 <= d1 <= 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dice_score(np.zeros((2, 2, 2), int), np.zeros((2, 2, 3), int), 1)


class TestRelabelNonPDAC:
    def _seg3(self, data):
        return LabelVolume(np.asarray(data, dtype=np.uint8), (1, 1, 1))

    def test_all_normal_unchanged(self):
        seg = self._seg3(np.zeros((4, 4, 2)))
        for cls in LesionClass10:
            out, flag = relabel_nonpdac(seg, cls)
            assert not flag and not out.data.any()

    def test_nonpdac_takes_predicted_code(self):
        data = np.zeros((4, 4, 2), dtype=np.uint8)
        data[1, 1, 0] = 2
        data[2, 2, 1] = 1
        out, flag = relabel_nonpdac(self._seg3(data), LesionClass10.SCN)
        assert not flag
        assert out.data[1, 1, 0] == LesionClass10.SCN.value == 7
        assert out.data[2, 2, 1] == 1  # PDAC voxels untouched

    def test_predicted_pdac_flags_unassigned(self):
        data = np.zeros((4, 4, 2), dtype=np.uint8)
        data[1, 1, 0] = 2
        out, flag = relabel_nonpdac(self._seg3(data), LesionClass10.PDAC)
        assert flag
        assert out.data[1, 1, 0] == UNASSIGNED_CODE

    def test_predicted_normal_flags_unassigned(self):
        data = np.zeros((4, 4, 2), dtype=np.uint8)
        data[0, 0, 0] = 2
        out, flag = relabel_nonpdac(self._seg3(data), LesionClass10.NORMAL)
        assert flag and out.data[0, 0, 0] == UNASSIGNED_CODE


class TestCaseDiceAndReport:
    def test_case_dice_normal_uses_pancreas(self):
        panc = np.zeros((4, 4, 2), dtype=int)
        panc[1:3, 1:3, :] = 1
        d, kind = case_dice(LesionClass10.NORMAL, np.zeros((4, 4, 2), int),
                            np.zeros((4, 4, 2), int), panc, panc.copy())
        assert kind == "pancreas" and d == 1.0

    def test_case_dice_lesion_class(self):
        pred = np.zeros((4, 4, 2), dtype=int)
        gt = np.zeros((4, 4, 2), dtype=int)
        pred[0, 0, 0] = pred[0, 1, 0] = 5
        gt[0, 1, 0] = gt[0, 2, 0] = 5
        d, kind = case_dice(LesionClass10.MCN, pred, gt, None, None)
        assert kind == "lesion" and d == 0.5

    def test_build_report_aggregates(self):
        rows = [CaseEval("a", "pdac", "pdac", 0.8, "lesion"),
                CaseEval("b", "pdac", "pnet", 0.6, "lesion"),
                CaseEval("c", "normal", "normal", 1.0, "pancreas"),
                CaseEval("d", "mcn", "mcn", 0.4, "lesion")]
        rep = build_report(rows)
        assert rep.per_class_accuracy[1] == 0.5
        assert rep.dice_mean[1] == pytest.approx(0.7)
        assert rep.dice_std[1] == pytest.approx(0.1)
        assert rep.dice_case_counts == [1, 2, 0, 0, 0, 1, 0, 0, 0, 0]
        # balanced accuracy is the mean of defined per-class accuracies
        defined = [v for v in rep.per_class_accuracy if v is not None]
        assert rep.balanced_acc == pytest.approx(np.mean(defined))

    def test_report_emission(self, tmp_path):
        rows = [CaseEval("a", "pdac", "pdac", 0.8, "lesion"),
                CaseEval("c", "normal", "normal", 1.0, "pancreas")]
        rep = build_report(rows)
        write_metrics_json(rep, tmp_path / "metrics.json")
        write_classification_csv(rep, tmp_path / "cls.csv")
        write_dice_csv(rep, tmp_path / "dice.csv")
        confusion_figure(rep.confusion, tmp_path / "cm.png")
        assert (tmp_path / "metrics.json").exists()
        table = (tmp_path / "cls.csv").read_text().splitlines()
        assert len(table) == 1 + 10 + 2  # header, 10 classes, 2 summary rows
        assert table[1].startswith("normal,") and table[-1].startswith("balanced_acc,")
        assert (tmp_path / "cm.png").stat().st_size > 0

    def test_percentages_formatted_to_one_decimal(self, tmp_path):
        rows = [CaseEval("a", "pdac", "pdac", 0.8, "lesion")] * 2 \
            + [CaseEval("b", "pdac", "pnet", 0.1, "lesion")]
        rep = build_report(rows)
        write_classification_csv(rep, tmp_path / "cls.csv")
        line = [l for l in (tmp_path / "cls.csv").read_text().splitlines()
                if l.startswith("pdac,")][0]
        assert line == "pdac,66.7"
