import json
import tempfile
import unittest
from glob import glob
from os.path import isfile, join
from unittest.mock import Mock, patch

import pandas as pd

from plseg.__main__ import build_parser, main, resolve_config
from plseg.network import NetConfig, build_model
from plseg.pipeline import SegResult, write_predictions
from plseg.volume import load_gt_mask, read_manifest

PHANTOM_FLAGS = ["--set", "phantom.n_train=2", "--set", "phantom.n_test=1",
                 "--set", "phantom.shape=[12,48,48]",
                 "--set", "phantom.spacing=[2.0,1.0,1.0]",
                 "--set", "phantom.semi_axes_min_mm=[3.0,4.0,4.0]",
                 "--set", "phantom.semi_axes_max_mm=[5.0,6.0,6.0]"]
SMALL_NET = ["--set", "network.stem_width=4",
             "--set", "network.block_widths=[4,6,8]",
             "--set", "network.head_width=4"]


class TestCli(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name
        self.data = join(self.tmp, "data")
        self.assertEqual(main(["phantom-gen", "--output-dir", self.data,
                               "--seed", "5"] + PHANTOM_FLAGS), 0)

    def tearDown(self):
        self._tmp.cleanup()

    def test_resolve_precedence(self):
        args = build_parser().parse_args(
            ["train", "--seed", "4", "--set", "seed=2",
             "--set", "crf.n_iters=1", "--train-manifest", "t.jsonl"])
        with patch.dict("os.environ", {"PLSEG_SEED": "9"}):
            config = resolve_config(args)
        self.assertEqual(config["seed"], 4)
        self.assertEqual(config["crf"]["n_iters"], 1)
        self.assertEqual(config["data"]["train_manifest"], "t.jsonl")

    def test_phantom_gen(self):
        for name in ("train.jsonl", "test.jsonl", "run_config.json"):
            self.assertTrue(isfile(join(self.data, name)), name)
        with open(join(self.data, "run_config.json")) as f:
            self.assertEqual(json.load(f)["seed"], 5)
        self.assertEqual(len(read_manifest(join(self.data, "train.jsonl"))),
                         2)

    def test_config_error(self):
        out = join(self.tmp, "bad")
        code = main(["phantom-gen", "--output-dir", out,
                     "--set", "bogus.key=1"])
        self.assertEqual(code, 2)
        with open(join(out, "error.json")) as f:
            record = json.load(f)
        self.assertEqual(record["command"], "phantom-gen")
        self.assertEqual(record["error"], "ConfigError")

    def test_runtime_error(self):
        out = join(self.tmp, "missing")
        code = main(["predict", "--output-dir", out,
                     "--checkpoint", join(self.tmp, "nothing.npz"),
                     "--manifest", join(self.data, "test.jsonl")])
        self.assertEqual(code, 1)
        self.assertTrue(isfile(join(out, "error.json")))

    def test_evaluate_ground_truth(self):
        records = read_manifest(join(self.data, "test.jsonl"))
        pred_dir = join(self.tmp, "pred")
        write_predictions([SegResult(r.lesion_id, load_gt_mask(r),
                                     (2.0, 1.0, 1.0)) for r in records],
                          pred_dir)
        out = join(self.tmp, "eval")
        self.assertEqual(main(["evaluate", "--pred-dir", pred_dir,
                               "--gt-manifest", join(self.data, "test.jsonl"),
                               "--output-dir", out]), 0)
        summary = pd.read_csv(join(out, "summary.csv")).set_index("metric")
        self.assertEqual(summary.loc["dsc", "mean"], 1.0)
        self.assertEqual(summary.loc["hd_mm", "mean"], 0.0)
        self.assertEqual(summary.loc["dsc", "n"], 1)

    def test_train_then_predict(self):
        out = join(self.tmp, "train")
        result = Mock()
        result.model = build_model(NetConfig(stem_width=4,
                                             block_widths=(4, 6, 8),
                                             head_width=4))
        result.report = [Mock(iteration=2)]
        with patch("plseg.__main__.ProgressiveTrainer") as trainer:
            trainer.return_value.run.return_value = result
            self.assertEqual(main(["train", "--output-dir", out,
                                   "--train-manifest",
                                   join(self.data, "train.jsonl")] +
                                  SMALL_NET), 0)
        lesions = trainer.return_value.run.call_args[0][0]
        self.assertEqual(len(lesions), 2)
        self.assertTrue(isfile(join(out, "model.npz")))
        with open(join(out, "model.json")) as f:
            self.assertEqual(json.load(f)["iteration"], 2)

        pred = join(self.tmp, "predict")
        self.assertEqual(main(["predict", "--output-dir", pred,
                               "--checkpoint", join(out, "model.npz"),
                               "--manifest", join(self.data, "test.jsonl"),
                               "--set", "crf.n_iters=1"]), 0)
        with open(join(pred, "predictions.jsonl")) as f:
            entries = [json.loads(line) for line in f]
        self.assertEqual(len(entries), 1)
        self.assertTrue(isfile(join(pred, entries[0]["mask"])))

    def test_overlay(self):
        record = read_manifest(join(self.data, "test.jsonl"))[0]
        out = join(self.tmp, "overlay")
        self.assertEqual(main(["overlay", "--output-dir", out,
                               "--volume", record.volume_path,
                               "--mask", record.gt_mask_path,
                               "--gt", record.gt_mask_path]), 0)
        pngs = glob(join(out, "slice_*.png"))
        self.assertEqual(len(pngs), int(load_gt_mask(record).any(
            axis=(1, 2)).sum()))


if __name__ == '__main__':
    unittest.main()
