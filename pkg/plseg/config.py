# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#
import json
import os
from copy import deepcopy
from os.path import isfile, join
from typing import Any, Dict, Iterable, Mapping, Optional

from ovos_config.models import LocalConf
from ovos_utils.json_helper import merge_dict
from ovos_utils.log import LOG

SEED_ENV_VAR = "PLSEG_SEED"
RESOLVED_CONFIG_NAME = "run_config.json"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration"""


# bundled defaults, every key a run config may override
DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "plseg_run",
    "data": {
        "train_manifest": "",
        "test_manifest": "",
        # smallest ROI edge for tiny lesions
        "min_crop_px": 32,
        # crops are resampled to this edge before entering the network
        "input_px": 64
    },
    "network": {
        "n_branches": 3,
        "scale_coefficient": 2,
        "boundary_aware": True,
        # drop the combined-level boundary head (8 heads instead of 9)
        "combined_boundary_head": True,
        "boundary_thickness_px": 1,
        "stem_width": 16,
        "block_widths": [16, 32, 64],
        "head_width": 16
    },
    "loss": {
        "w_m": 1.0,
        "w_b": 1.0,
        "w_f": 1.0,
        "eps": 1.0
    },
    "crf": {
        "n_iters": 5,
        "w_appearance": 5.0,
        "w_smooth": 3.0,
        "theta_alpha": 20.0,
        "theta_beta": 0.1,
        "theta_gamma": 3.0,
        "threshold": 0.5,
        # "exact" or "pydensecrf"
        "backend": "exact",
        # "tile" or "reject" for inputs larger than max_side
        "oversize": "tile",
        "max_side": 128,
        "workers": 1
    },
    "training": {
        "k_max": 3,
        "max_epochs": 200,
        "plateau_window": 20,
        "plateau_tolerance": 1e-3,
        "learning_rate": 2e-4,
        # full-scale setting is 1000
        "lr_halving_epochs": 100,
        "batch_size": 48,
        "optimizer": "sgd",
        "momentum": 0.9
    },
    "postprocess": {
        "min_area_ratio": 0.7,
        "max_area_ratio": 1.3,
        "soft_low": 0.1,
        "soft_high": 0.9
    },
    "phantom": {
        "n_train": 40,
        "n_test": 10,
        "shape": [32, 96, 96],
        "spacing": [2.0, 0.8, 0.8],
        "semi_axes_min_mm": [6.0, 6.0, 6.0],
        "semi_axes_max_mm": [12.0, 14.0, 14.0],
        "background_hu": -800.0,
        "lesion_offset_hu": 700.0,
        "noise_sigma_hu": 40.0,
        "texture_amplitude_hu": 100.0,
        "texture_sigma_px": 8.0
    },
    "report": {
        "record_wall_time": True
    }
}


def default_config() -> Dict[str, Any]:
    """
    Return a fresh copy of the bundled defaults
    """
    return deepcopy(DEFAULT_CONFIG)


def parse_override(override: str) -> Dict[str, Any]:
    """
    Turn a `section.key=value` flag into a nested dict
    @param override: dotted key and value, value parsed as JSON when possible
    @return: nested dict suitable for `merge_dict`
    """
    if "=" not in override:
        raise ConfigError(f"Override must look like section.key=value, "
                          f"got: {override}")
    key, raw = override.split("=", 1)
    keys = [k for k in key.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"Empty override key: {override}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested: Dict[str, Any] = {keys[-1]: value}
    for k in reversed(keys[:-1]):
        nested = {k: nested}
    return nested


def _check_known_keys(config: Mapping[str, Any],
                      reference: Mapping[str, Any], prefix: str = ""):
    for key, value in config.items():
        if key not in reference:
            raise ConfigError(f"Unknown config key: {prefix}{key}")
        if isinstance(reference[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"Config section {prefix}{key} must be an "
                                  f"object")
            _check_known_keys(value, reference[key], f"{prefix}{key}.")


def load_config(path: Optional[str] = None,
                overrides: Optional[Iterable[Mapping[str, Any]]] = None,
                env: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """
    Resolve the run configuration.

    Precedence is defaults < config file < PLSEG_SEED < overrides.
    @param path: optional JSON config file
    @param overrides: nested dicts (e.g. from `parse_override`), applied last
    @param env: environment mapping, defaults to `os.environ`
    @return: fully resolved config dict
    """
    env = os.environ if env is None else env
    config = default_config()
    if path:
        if not isfile(path):
            raise ConfigError(f"Config file not found: {path}")
        file_config = dict(LocalConf(path))
        _check_known_keys(file_config, DEFAULT_CONFIG)
        merge_dict(config, file_config)
        LOG.debug(f"Configuration {path} loaded")

    if env.get(SEED_ENV_VAR):
        try:
            config["seed"] = int(env[SEED_ENV_VAR])
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got: "
                              f"{env[SEED_ENV_VAR]}")
        LOG.debug(f"seed overridden by {SEED_ENV_VAR}: {config['seed']}")

    for override in overrides or []:
        _check_known_keys(override, DEFAULT_CONFIG)
        merge_dict(config, deepcopy(dict(override)))

    if not isinstance(config["seed"], int):
        raise ConfigError(f"seed must be an integer, got: {config['seed']}")
    return config


def write_resolved_config(config: Mapping[str, Any], output_dir: str) -> str:
    """
    Store the resolved config next to the run outputs
    @param config: resolved config
    @param output_dir: directory receiving `run_config.json`
    @return: path of the written file
    """
    os.makedirs(output_dir, exist_ok=True)
    path = join(output_dir, RESOLVED_CONFIG_NAME)
    snapshot = LocalConf(None)
    snapshot.update(deepcopy(dict(config)))
    snapshot.store(path)
    LOG.info(f"Wrote resolved config: {path}")
    return path
