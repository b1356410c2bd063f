import json
import tempfile
import unittest
from os.path import join

import numpy as np

from plseg.config import ConfigError
from plseg.crf import CrfConfig
from plseg.metrics import dsc
from plseg.postprocess import PostprocessConfig, Verdict, area_ratio, \
    assemble_slices, assemble_volume, repair_slice, validate_slice, \
    write_decisions
from plseg.phantom import generate, phantom_specs
from plseg.trainer import prepare_lesion

NO_PAIRWISE = CrfConfig(w_appearance=0.0, w_smooth=0.0)


def _rect(r0, r1, c0, c1, size=32):
    mask = np.zeros((size, size), dtype=bool)
    mask[r0:r1, c0:c1] = True
    return mask


class TestValidate(unittest.TestCase):
    def setUp(self):
        self.prev = _rect(10, 20, 10, 20)

    def test_identical(self):
        self.assertTrue(validate_slice(self.prev, self.prev))

    def test_area_bounds(self):
        self.assertTrue(validate_slice(self.prev, _rect(10, 18, 10, 19)))
        self.assertFalse(validate_slice(self.prev, _rect(10, 16, 10, 20)))
        self.assertFalse(validate_slice(self.prev, _rect(9, 21, 9, 21)))
        self.assertTrue(validate_slice(
            self.prev, _rect(9, 21, 9, 21),
            PostprocessConfig(max_area_ratio=1.5)))

    def test_location(self):
        self.assertFalse(validate_slice(self.prev, _rect(0, 10, 0, 10)))
        # ring around the previous mask: no overlap, centroid inside
        ring = _rect(7, 23, 7, 23) & ~_rect(9, 21, 9, 21)
        self.assertAlmostEqual(area_ratio(self.prev, ring), 1.12)
        self.assertTrue(validate_slice(self.prev, ring))

    def test_empty(self):
        self.assertFalse(validate_slice(self.prev, np.zeros_like(self.prev)))
        with self.assertRaises(ValueError):
            validate_slice(np.zeros_like(self.prev), self.prev)

    def test_config(self):
        with self.assertRaises(ConfigError):
            PostprocessConfig(min_area_ratio=1.2)
        with self.assertRaises(ConfigError):
            PostprocessConfig(soft_low=0.9, soft_high=0.1)
        cfg = PostprocessConfig.from_config({"max_area_ratio": 2.0})
        self.assertEqual(cfg.max_area_ratio, 2.0)


class TestRepair(unittest.TestCase):
    def test_without_pairwise_keeps_previous(self):
        prev = _rect(10, 20, 10, 20)
        repaired = repair_slice(prev, np.zeros(prev.shape), NO_PAIRWISE)
        np.testing.assert_array_equal(repaired, prev)

    def test_empty_refinement_falls_back(self):
        prev = _rect(10, 20, 10, 20)
        cfg = CrfConfig(w_appearance=0.0, w_smooth=0.0, threshold=0.95)
        repaired = repair_slice(prev, np.zeros(prev.shape), cfg)
        np.testing.assert_array_equal(repaired, prev)
        self.assertIsNot(repaired, prev)

    def test_empty_previous(self):
        with self.assertRaises(ValueError):
            repair_slice(np.zeros((8, 8), dtype=bool), np.zeros((8, 8)))

    def test_repair_follows_image(self):
        rng = np.random.default_rng(0)
        gt = _rect(10, 22, 10, 22)
        image = np.where(gt, 0.6, 0.07) + rng.normal(0, 0.01, gt.shape)
        prev = _rect(11, 21, 11, 21)
        repaired = repair_slice(prev, image)
        self.assertGreater(dsc(repaired, gt), dsc(prev, gt))
        self.assertGreater(dsc(repaired, gt), 0.95)

    def test_repair_recovers_shifted_boundary(self):
        ranges = {"shape": [16, 80, 80], "spacing": [2.0, 0.8, 0.8],
                  "semi_axes_min_mm": [6.0, 6.0, 6.0],
                  "semi_axes_max_mm": [10.0, 12.0, 12.0]}
        rng = np.random.default_rng(3)
        improved = 0
        specs = phantom_specs(50, ranges, seed=11)
        for spec in specs:
            volume, _, record = generate(spec)
            lesion = prepare_lesion(record, volume)
            gt = lesion.gt_at(0)
            # previous slice's mask: the lesion moved 2 px along one axis
            shift = int(rng.choice([-2, 2]))
            prev = np.roll(gt, shift, axis=int(rng.integers(2)))
            repaired = repair_slice(prev, lesion.image_at(0))
            if dsc(repaired, gt) > dsc(prev, gt):
                improved += 1
        self.assertGreaterEqual(improved / len(specs), 0.8)


class TestAssemble(unittest.TestCase):
    def setUp(self):
        self.square = _rect(10, 20, 10, 20)
        self.images = {o: np.zeros((32, 32)) for o in range(-2, 3)}

    def test_walk_outward(self):
        masks = {0: self.square, 1: _rect(10, 19, 10, 20),
                 2: np.zeros_like(self.square), -1: _rect(0, 8, 0, 8)}
        final, decisions = assemble_slices(masks, self.images,
                                           range(-2, 3), NO_PAIRWISE)
        self.assertEqual([(d.offset, d.verdict) for d in decisions],
                         [(0, Verdict.ACCEPTED), (1, Verdict.ACCEPTED),
                          (2, Verdict.REPAIRED), (-1, Verdict.REPAIRED),
                          (-2, Verdict.REPAIRED)])
        self.assertEqual(decisions[0].reason, "recist slice")
        self.assertEqual(decisions[2].reason, "empty mask")
        self.assertEqual(decisions[3].reason, "disjoint from previous slice")
        np.testing.assert_array_equal(final[1], masks[1])
        # with no pairwise term a repair reproduces the inner neighbour
        np.testing.assert_array_equal(final[2], masks[1])
        np.testing.assert_array_equal(final[-1], self.square)
        np.testing.assert_array_equal(final[-2], self.square)

    def test_accepted_slices_stay_valid(self):
        rng = np.random.default_rng(1)
        cfg = PostprocessConfig()
        for _ in range(20):
            masks = {}
            for offset in range(-2, 3):
                r0, c0 = rng.integers(4, 14, 2)
                h, w = rng.integers(4, 14, 2)
                masks[offset] = _rect(r0, r0 + h, c0, c0 + w)
            final, decisions = assemble_slices(masks, self.images,
                                               range(-2, 3), NO_PAIRWISE, cfg)
            for decision in decisions[1:]:
                offset = decision.offset
                inner = final[offset - int(np.sign(offset))]
                self.assertTrue(final[offset].any())
                if decision.verdict == Verdict.ACCEPTED:
                    self.assertTrue(validate_slice(inner, final[offset], cfg))
                    self.assertLessEqual(decision.area_ratio,
                                         cfg.max_area_ratio)
                    self.assertGreaterEqual(decision.area_ratio,
                                            cfg.min_area_ratio)
                else:
                    np.testing.assert_array_equal(final[offset], inner)

    def test_requires_recist_slice(self):
        with self.assertRaises(ValueError):
            assemble_slices({1: self.square}, self.images, [1, 2])
        with self.assertRaises(ValueError):
            assemble_slices({0: np.zeros_like(self.square)}, self.images, [0])

    def test_assemble_volume(self):
        masks = {0: self.square, 1: self.square}
        volume, decisions = assemble_volume(masks, self.images, [0, 1], 2,
                                            (4, -3), (5, 40, 40), NO_PAIRWISE)
        self.assertEqual(volume.shape, (5, 40, 40))
        self.assertEqual(volume.dtype, bool)
        expected = np.zeros((40, 40), dtype=bool)
        expected[14:24, 7:17] = True
        np.testing.assert_array_equal(volume[2], expected)
        np.testing.assert_array_equal(volume[3], expected)
        self.assertFalse(volume[[0, 1, 4]].any())
        with self.assertRaises(ValueError):
            assemble_volume(masks, self.images, [0, 1], 4, (0, 0),
                            (5, 40, 40), NO_PAIRWISE)

    def test_write_decisions(self):
        _, decisions = assemble_slices(
            {0: self.square, 1: np.zeros_like(self.square)}, self.images,
            [0, 1], NO_PAIRWISE)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_decisions(decisions, join(tmp, "a", "slices.jsonl"))
            with open(path) as f:
                rows = [json.loads(line) for line in f]
        self.assertEqual([r["verdict"] for r in rows],
                         ["accepted", "repaired"])
        self.assertEqual(set(rows[0]),
                         {"offset", "verdict", "area_ratio", "reason"})


if __name__ == '__main__':
    unittest.main()
