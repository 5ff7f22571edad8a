import csv
from pathlib import Path
import sys
import tempfile
import unittest

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from services.errors import ShapeError, ValidationError  # noqa: E402
from services.evaluation import (  # noqa: E402
    MetricsReport,
    confusion_and_accuracy,
    export_curves_csv,
    metrics_report,
    precision_recall_ap,
    roc_auc_ovr,
    split_dataset,
)


def one_hot_scores(labels) -> np.ndarray:
    s = np.full((len(labels), 3), 0.1)
    s[np.arange(len(labels)), labels] = 0.8
    return s


class SplitTests(unittest.TestCase):
    def test_sizes_for_one_hundred(self) -> None:
        m = split_dataset(range(100), seed=0)
        self.assertEqual((len(m.train), len(m.val), len(m.test)), (64, 16, 20))

    def test_partition_and_determinism(self) -> None:
        ids = list(range(10, 47))
        a = split_dataset(ids, seed=3)
        b = split_dataset(ids, seed=3)
        self.assertEqual(a.to_dict(), b.to_dict())
        self.assertEqual(sorted(a.train + a.val + a.test), ids)
        self.assertFalse(set(a.train) & set(a.test))
        self.assertFalse(set(a.val) & set(a.test))
        self.assertNotEqual(split_dataset(ids, seed=4).test, a.test)

    def test_too_few_ids(self) -> None:
        with self.assertRaises(ValidationError):
            split_dataset(range(4), seed=0)

    def test_subject_level_keeps_subjects_whole(self) -> None:
        ids = list(range(60))
        groups = [f"S{i // 6:03d}" for i in ids]
        m = split_dataset(ids, seed=1, groups=groups)
        self.assertTrue(m.subject_level)
        owner = {}
        for part in ("train", "val", "test"):
            for i in getattr(m, part):
                owner.setdefault(groups[i], set()).add(part)
        self.assertTrue(all(len(parts) == 1 for parts in owner.values()))
        self.assertTrue(m.train and m.val and m.test)


class ConfusionTests(unittest.TestCase):
    def test_perfect(self) -> None:
        out = confusion_and_accuracy([0, 1, 2, 2], [0, 1, 2, 2])
        self.assertEqual(out["accuracy"], 1.0)
        self.assertEqual(out["confusion"], [[1, 0, 0], [0, 1, 0], [0, 0, 2]])

    def test_prevalence(self) -> None:
        self.assertAlmostEqual(confusion_and_accuracy([0] * 6, [0, 1, 2] * 2)["accuracy"], 1 / 3)

    def test_hand_count(self) -> None:
        out = confusion_and_accuracy([0, 1, 1, 2], [0, 1, 2, 2])
        self.assertEqual(out["accuracy"], 0.75)
        self.assertEqual(out["confusion"][2][1], 1)
        self.assertEqual([sum(r) for r in out["confusion"]], [1, 1, 2])

    def test_length_mismatch(self) -> None:
        with self.assertRaises(ShapeError):
            confusion_and_accuracy([0, 1], [0])


class RocTests(unittest.TestCase):
    def test_perfect_separation(self) -> None:
        labels = [0, 1, 2, 0, 1, 2]
        out = roc_auc_ovr(one_hot_scores(labels), labels)
        self.assertEqual(out["auc"], [1.0, 1.0, 1.0])
        self.assertEqual(out["auc_macro"], 1.0)

    def test_uninformative_scorer(self) -> None:
        labels = [0, 1, 2, 0, 1, 2]
        out = roc_auc_ovr(np.tile([0.2, 0.5, 0.3], (6, 1)), labels)
        self.assertEqual(out["auc"], [0.5, 0.5, 0.5])

    def test_hand_threshold_sweep(self) -> None:
        scores = np.array([[0.9, 0.1, 0.0], [0.4, 0.6, 0.0], [0.6, 0.4, 0.0], [0.1, 0.9, 0.0]])
        out = roc_auc_ovr(scores, [0, 0, 1, 1])
        self.assertAlmostEqual(out["auc"][0], 0.75)
        self.assertIsNone(out["auc"][2])
        self.assertIsNone(out["curves"][2])
        self.assertAlmostEqual(out["auc_macro"], (0.75 + out["auc"][1]) / 2)
        # the first point sits above every score and has no finite threshold
        self.assertEqual(out["curves"][0][0], [None, 0.0, 0.0])

    def test_invariant_to_increasing_transform(self) -> None:
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 3, size=40)
        scores = rng.uniform(size=(40, 3))
        a = roc_auc_ovr(scores, labels)["auc"]
        b = roc_auc_ovr(np.exp(3 * scores) + 2, labels)["auc"]
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_label_permutations_average_to_chance(self) -> None:
        rng = np.random.default_rng(1)
        labels = np.repeat([0, 1, 2], 20)
        scores = one_hot_scores(labels) + 0.05 * rng.uniform(size=(60, 3))
        macros = [roc_auc_ovr(scores, rng.permutation(labels))["auc_macro"] for _ in range(200)]
        self.assertAlmostEqual(float(np.mean(macros)), 0.5, delta=0.05)

    def test_non_finite_scores(self) -> None:
        scores = one_hot_scores([0, 1, 2])
        scores[0, 0] = np.nan
        with self.assertRaises(ValidationError):
            roc_auc_ovr(scores, [0, 1, 2])


class PrecisionRecallTests(unittest.TestCase):
    def test_perfect_separation(self) -> None:
        labels = [0, 1, 2, 2]
        self.assertEqual(precision_recall_ap(one_hot_scores(labels), labels)["ap"], [1.0, 1.0, 1.0])

    def test_single_positive_ranked_last(self) -> None:
        scores = np.array([[0.1, 0.9, 0.0], [0.4, 0.6, 0.0], [0.6, 0.4, 0.0], [0.9, 0.1, 0.0]])
        out = precision_recall_ap(scores, [0, 1, 1, 1])
        self.assertAlmostEqual(out["ap"][0], 0.25)

    def test_all_positive_class(self) -> None:
        out = precision_recall_ap(np.random.default_rng(2).uniform(size=(5, 3)), [0] * 5)
        self.assertEqual(out["ap"][0], 1.0)
        self.assertIsNone(out["ap"][1])
        self.assertEqual(out["ap_macro"], 1.0)


class ReportTests(unittest.TestCase):
    def test_report_round_trip_and_csv(self) -> None:
        labels = [0, 1, 2, 0, 1, 2, 0]
        scores = one_hot_scores(labels)
        scores[6] = [0.2, 0.7, 0.1]
        preds = np.argmax(scores, axis=1)
        report = metrics_report(preds, scores, labels)
        self.assertAlmostEqual(report.accuracy, 6 / 7)
        self.assertEqual(sum(sum(r) for r in report.confusion), 7)
        doc = report.to_dict()
        self.assertTrue({"accuracy", "auc_macro", "ap_macro"} <= set(doc))
        self.assertEqual(MetricsReport.from_dict(doc).to_dict(), doc)
        with tempfile.TemporaryDirectory() as tmp:
            written = export_curves_csv(report, tmp)
            self.assertEqual(len(written), 6)
            with open(Path(tmp) / "roc_AD.csv", newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
        self.assertEqual(rows[0], ["threshold", "x", "y"])
        self.assertEqual(rows[1][0], "")
        self.assertEqual(float(rows[-1][1]), 1.0)


if __name__ == "__main__":
    unittest.main()
