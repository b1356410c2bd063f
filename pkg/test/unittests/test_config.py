import json
import unittest
from os.path import isfile, join
from tempfile import TemporaryDirectory

from plseg.config import ConfigError, DEFAULT_CONFIG, RESOLVED_CONFIG_NAME, \
    default_config, load_config, parse_override, write_resolved_config


class TestParseOverride(unittest.TestCase):
    def test_json_values(self):
        self.assertEqual(parse_override("training.k_max=5"),
                         {"training": {"k_max": 5}})
        self.assertEqual(parse_override("network.boundary_aware=false"),
                         {"network": {"boundary_aware": False}})
        self.assertEqual(parse_override("network.block_widths=[8,8,8]"),
                         {"network": {"block_widths": [8, 8, 8]}})

    def test_string_fallback(self):
        self.assertEqual(parse_override("crf.backend=pydensecrf"),
                         {"crf": {"backend": "pydensecrf"}})
        self.assertEqual(parse_override("output_dir=runs/a=b"),
                         {"output_dir": "runs/a=b"})

    def test_malformed(self):
        with self.assertRaises(ConfigError):
            parse_override("training.k_max")
        with self.assertRaises(ConfigError):
            parse_override("=3")


class TestLoadConfig(unittest.TestCase):
    def test_defaults(self):
        config = load_config(env={})
        self.assertEqual(config, DEFAULT_CONFIG)
        self.assertIsNot(config, DEFAULT_CONFIG)
        config["crf"]["n_iters"] = 99
        self.assertEqual(default_config()["crf"]["n_iters"], 5)

    def test_precedence(self):
        with TemporaryDirectory() as tmp:
            path = join(tmp, "run.json")
            with open(path, "w") as f:
                json.dump({"seed": 3, "training": {"k_max": 1},
                           "crf": {"n_iters": 2}}, f)

            config = load_config(path, env={})
            self.assertEqual(config["seed"], 3)
            self.assertEqual(config["training"]["k_max"], 1)
            # untouched keys keep their defaults
            self.assertEqual(config["training"]["max_epochs"], 200)

            config = load_config(path, env={"PLSEG_SEED": "11"})
            self.assertEqual(config["seed"], 11)

            config = load_config(path, [{"seed": 42},
                                        parse_override("crf.n_iters=7")],
                                 env={"PLSEG_SEED": "11"})
            self.assertEqual(config["seed"], 42)
            self.assertEqual(config["crf"]["n_iters"], 7)
            self.assertEqual(config["training"]["k_max"], 1)

    def test_invalid(self):
        with self.assertRaises(ConfigError):
            load_config("/does/not/exist.json", env={})
        with self.assertRaises(ConfigError):
            load_config(overrides=[{"training": {"epochs": 3}}], env={})
        with self.assertRaises(ConfigError):
            load_config(overrides=[{"crf": 3}], env={})
        with self.assertRaises(ConfigError):
            load_config(env={"PLSEG_SEED": "abc"})
        with self.assertRaises(ConfigError):
            load_config(overrides=[{"seed": "abc"}], env={})

    def test_write_resolved_config(self):
        config = load_config(overrides=[{"seed": 5}], env={})
        with TemporaryDirectory() as tmp:
            path = write_resolved_config(config, join(tmp, "out"))
            self.assertEqual(path, join(tmp, "out", RESOLVED_CONFIG_NAME))
            self.assertTrue(isfile(path))
            with open(path) as f:
                self.assertEqual(json.load(f), config)
            # a stored snapshot reloads to the same config
            self.assertEqual(load_config(path, env={}), config)


if __name__ == '__main__':
    unittest.main()
