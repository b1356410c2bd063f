import tempfile
import unittest
from os.path import join

import numpy as np
import pandas as pd

from plseg.metrics import ConfusionCounts, EvalRow, MetricUndefinedError, \
    aggregate, dsc, evaluate, evaluate_recist, hausdorff_mm, per_offset_dsc, \
    vs


def _brute_hausdorff(a, b, spacing):
    pa = np.argwhere(a) * np.asarray(spacing)
    pb = np.argwhere(b) * np.asarray(spacing)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1))
    return max(d.min(axis=1).max(), d.min(axis=0).max())


class TestOverlap(unittest.TestCase):
    def test_counts(self):
        pred = np.array([1, 1, 0, 1, 0], dtype=bool)
        gt = np.array([1, 0, 1, 1, 0], dtype=bool)
        self.assertEqual(ConfusionCounts.from_masks(pred, gt),
                         ConfusionCounts(tp=2, fp=1, fn=1))
        with self.assertRaises(ValueError):
            ConfusionCounts.from_masks(pred, gt[:4])

    def test_dsc_examples(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[0, :4] = True
        b[0, 1:4] = True
        b[1, 0] = True
        self.assertAlmostEqual(dsc(a, b), 0.75)
        self.assertAlmostEqual(vs(a, b), 1.0)
        c = np.zeros(9, dtype=bool)
        d = np.zeros(9, dtype=bool)
        c[:5] = True
        d[:4] = True
        self.assertAlmostEqual(dsc(c, d), 8 / 9)
        self.assertAlmostEqual(vs(c, d), 8 / 9)

    def test_empty_masks(self):
        empty = np.zeros((3, 3, 3), dtype=bool)
        full = np.ones((3, 3, 3), dtype=bool)
        self.assertEqual(dsc(empty, empty), 1.0)
        self.assertEqual(vs(empty, empty), 1.0)
        self.assertEqual(dsc(empty, full), 0.0)
        self.assertEqual(vs(empty, full), 0.0)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = rng.random((6, 6, 6)) < 0.3
            b = rng.random((6, 6, 6)) < 0.3
            self.assertAlmostEqual(dsc(a, b), dsc(b, a))
            self.assertAlmostEqual(vs(a, b), vs(b, a))
            self.assertTrue(0.0 <= dsc(a, b) <= vs(a, b) + 1e-12 <= 1.0 + 1e-12)


class TestHausdorff(unittest.TestCase):
    def test_example(self):
        a = np.zeros((2, 2, 3), dtype=bool)
        b = np.zeros((2, 2, 3), dtype=bool)
        a[0, 0, 0] = True
        b[0, 0, 1] = True
        self.assertAlmostEqual(hausdorff_mm(a, b, (2.0, 1.0, 3.0)), 3.0)
        self.assertEqual(hausdorff_mm(a, a, (2.0, 1.0, 3.0)), 0.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            a = rng.random((16, 16, 16)) < 0.01
            b = rng.random((16, 16, 16)) < 0.01
            a[rng.integers(16), rng.integers(16), rng.integers(16)] = True
            b[rng.integers(16), rng.integers(16), rng.integers(16)] = True
            spacing = tuple(rng.uniform(0.5, 3.0, 3))
            expected = _brute_hausdorff(a, b, spacing)
            self.assertAlmostEqual(hausdorff_mm(a, b, spacing), expected,
                                   places=9)
            self.assertAlmostEqual(hausdorff_mm(b, a, spacing), expected,
                                   places=9)

    def test_undefined(self):
        a = np.zeros((3, 3), dtype=bool)
        b = a.copy()
        b[1, 1] = True
        with self.assertRaises(MetricUndefinedError):
            hausdorff_mm(a, b, (1.0, 1.0))
        with self.assertRaises(ValueError):
            hausdorff_mm(b, np.ones((3, 4), dtype=bool), (1.0, 1.0))


class TestReports(unittest.TestCase):
    def test_evaluate(self):
        gt = np.zeros((4, 8, 8), dtype=bool)
        gt[1:3, 2:6, 2:6] = True
        row = evaluate(gt, gt, (2.0, 1.0, 1.0), "a")
        self.assertEqual(row, EvalRow("a", 1.0, 1.0, 0.0))
        row = evaluate(np.zeros_like(gt), gt, (2.0, 1.0, 1.0), "b")
        self.assertEqual(row.dsc, 0.0)
        self.assertIsNone(row.hd_mm)

    def test_aggregate(self):
        rows = [EvalRow("a", 1.0, 1.0, 2.0), EvalRow("b", 0.5, 0.75, None)]
        report = aggregate(rows, {"seed": 1})
        self.assertAlmostEqual(report.summary["dsc"]["mean"], 0.75)
        self.assertAlmostEqual(report.summary["dsc"]["std"], 0.25)
        self.assertEqual(report.summary["dsc"]["n"], 2)
        self.assertEqual(report.summary["hd_mm"],
                         {"mean": 2.0, "std": 0.0, "n": 1})
        self.assertEqual(report.config, {"seed": 1})
        empty = aggregate([])
        self.assertEqual(empty.summary["vs"]["n"], 0)
        self.assertTrue(np.isnan(empty.summary["vs"]["mean"]))

    def test_write(self):
        report = aggregate([EvalRow("a", 1.0, 1.0, 2.0),
                            EvalRow("b", 0.5, 0.75, None)])
        with tempfile.TemporaryDirectory() as tmp:
            per_lesion, summary = report.write(tmp)
            self.assertEqual(per_lesion, join(tmp, "per_lesion.csv"))
            frame = pd.read_csv(per_lesion)
            self.assertEqual(list(frame.columns),
                             ["lesion_id", "dsc", "vs", "hd_mm"])
            self.assertEqual(list(frame["lesion_id"]), ["a", "b"])
            self.assertTrue(np.isnan(frame["hd_mm"][1]))
            frame = pd.read_csv(summary)
            self.assertEqual(list(frame["metric"]), ["dsc", "vs", "hd_mm"])
            self.assertEqual(list(frame["n"]), [2, 2, 1])

    def test_per_offset_dsc(self):
        gt = np.zeros((5, 4, 4), dtype=bool)
        gt[1:4, 1:3, 1:3] = True
        pred = gt.copy()
        pred[3] = False
        scores = per_offset_dsc(pred, gt, 2, [-1, 0, 1])
        self.assertEqual(scores, {-1: 1.0, 0: 1.0, 1: 0.0})
        with self.assertRaises(ValueError):
            per_offset_dsc(pred, gt, 2, [3])

    def test_evaluate_recist(self):
        gt = np.zeros((4, 4), dtype=bool)
        gt[:2, :2] = True
        network = np.zeros_like(gt)
        network[0, :2] = True
        row = evaluate_recist("a", network, gt, gt)
        self.assertEqual(row["lesion_id"], "a")
        self.assertAlmostEqual(row["dsc_network"], 2 * 2 / 6)
        self.assertEqual(row["dsc_crf"], 1.0)


if __name__ == '__main__':
    unittest.main()
