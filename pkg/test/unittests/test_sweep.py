import tempfile
import unittest
from os.path import isfile, join
from unittest.mock import Mock, patch

import pandas as pd

from plseg.config import ConfigError, default_config
from plseg.metrics import EvalRow, aggregate
from plseg.sweep import SWEEP_COLUMNS, config_for, parse_axis_value, \
    run_sweep


class TestConfigFor(unittest.TestCase):
    def test_only_axis_changes(self):
        config = default_config()
        swept = config_for(config, "n_branches", "2")
        self.assertEqual(swept["network"]["n_branches"], 2)
        self.assertEqual(config["network"]["n_branches"], 3)
        swept["network"]["n_branches"] = config["network"]["n_branches"]
        self.assertEqual(swept, config)

    def test_max_offset(self):
        swept = config_for(default_config(), "max_offset", 5)
        self.assertEqual(swept["training"]["k_max"], 5)

    def test_switches(self):
        config = default_config()
        self.assertFalse(config_for(config, "boundary_aware",
                                    "off")["network"]["boundary_aware"])
        self.assertEqual(config_for(config, "scale_invariant",
                                    "off")["network"]["n_branches"], 1)
        self.assertEqual(config_for(config, "scale_invariant",
                                    "on")["network"]["n_branches"], 3)

    def test_parse_errors(self):
        with self.assertRaises(ConfigError):
            parse_axis_value("learning_rate", 1)
        with self.assertRaises(ConfigError):
            parse_axis_value("boundary_aware", "maybe")
        with self.assertRaises(ConfigError):
            parse_axis_value("n_branches", "two")
        self.assertIs(parse_axis_value("boundary_aware", "1"), True)


class TestRunSweep(unittest.TestCase):
    def test_one_row_per_value(self):
        report = aggregate([EvalRow("a", 0.8, 0.9, 2.0),
                            EvalRow("b", 0.6, 0.7, 4.0)])
        recist = [{"lesion_id": "a", "dsc_network": 0.5, "dsc_crf": 0.7},
                  {"lesion_id": "b", "dsc_network": 0.6, "dsc_crf": 0.9}]
        trainer = Mock()
        with tempfile.TemporaryDirectory() as tmp, \
                patch("plseg.sweep.ProgressiveTrainer",
                      return_value=trainer) as trainer_cls, \
                patch("plseg.sweep.predict_many", return_value=[]), \
                patch("plseg.sweep.evaluate_results", return_value=report), \
                patch("plseg.sweep.recist_rows", return_value=recist):
            frame = run_sweep(default_config(), "max_offset",
                              ["0", "1", "2", "3"], [], [], tmp)
            self.assertTrue(isfile(join(tmp, "sweep.csv")))
            for value in range(4):
                run_dir = join(tmp, f"max_offset_{value}")
                self.assertTrue(isfile(join(run_dir, "run_config.json")))
                self.assertTrue(isfile(join(run_dir, "summary.csv")))
                self.assertTrue(isfile(join(run_dir, "predictions",
                                            "predictions.jsonl")))
            written = pd.read_csv(join(tmp, "sweep.csv"))

        self.assertEqual(list(frame.columns), SWEEP_COLUMNS)
        self.assertEqual(len(frame), 4)
        self.assertEqual(list(written["axis_value"]), [0, 1, 2, 3])
        self.assertAlmostEqual(frame["mean_dsc"][0], 0.7)
        self.assertAlmostEqual(frame["std_dsc"][0], 0.1)
        self.assertAlmostEqual(frame["mean_hd"][0], 3.0)
        self.assertAlmostEqual(frame["mean_recist_dsc"][0], 0.8)
        k_max = [c.args[0]["training"]["k_max"]
                 for c in trainer_cls.call_args_list]
        self.assertEqual(k_max, [0, 1, 2, 3])
        self.assertEqual(trainer.run.call_count, 4)

    def test_switch_names(self):
        report = aggregate([EvalRow("a", 1.0, 1.0, 0.0)])
        with patch("plseg.sweep.ProgressiveTrainer"), \
                patch("plseg.sweep.predict_many", return_value=[]), \
                patch("plseg.sweep.evaluate_results", return_value=report), \
                patch("plseg.sweep.recist_rows", return_value=[]):
            frame = run_sweep(default_config(), "boundary_aware",
                              ["on", "off"], [], [])
        self.assertEqual(list(frame["axis_value"]), ["on", "off"])
        self.assertTrue(frame["mean_recist_dsc"].isna().all())


if __name__ == '__main__':
    unittest.main()
