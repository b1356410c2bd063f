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
"""
One full train/predict/evaluate run per value of a single config axis
"""
import os
from copy import deepcopy
from os.path import join
from typing import Any, Dict, Iterable, List, Mapping, Optional

import numpy as np
import pandas as pd
from ovos_utils.log import LOG

from plseg.config import ConfigError, write_resolved_config
from plseg.pipeline import evaluate_results, predict_many, recist_rows, \
    write_predictions
from plseg.trainer import LesionData, ProgressiveTrainer

SWEEP_COLUMNS = ["axis", "axis_value", "mean_dsc", "std_dsc", "mean_vs",
                 "mean_hd", "mean_recist_dsc"]

# axis -> (section, key)
SWEEP_AXES = {
    "max_offset": ("training", "k_max"),
    "n_branches": ("network", "n_branches"),
    "scale_coefficient": ("network", "scale_coefficient"),
    "boundary_aware": ("network", "boundary_aware"),
    "scale_invariant": ("network", "n_branches"),
}

_TRUE = ("1", "true", "on", "yes")
_FALSE = ("0", "false", "off", "no")


def parse_axis_value(axis: str, raw: Any) -> Any:
    """
    Parse a command-line sweep value for `axis`
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"Unknown sweep axis: {axis}")
    if axis in ("boundary_aware", "scale_invariant"):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ConfigError(f"{axis} takes on/off values, got {raw}")
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{axis} takes integer values, got {raw}")


def config_for(config: Mapping[str, Any], axis: str,
               value: Any) -> Dict[str, Any]:
    """
    Copy of `config` with one axis set; only that axis differs
    """
    value = parse_axis_value(axis, value)
    section, key = SWEEP_AXES[axis]
    swept = deepcopy(dict(config))
    if axis == "scale_invariant":
        # a single branch is the plain network without scale branches
        if not value:
            swept[section][key] = 1
    else:
        swept[section][key] = value
    return swept


def _value_name(value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    return str(value)


def run_sweep(config: Mapping[str, Any], axis: str, values: Iterable[Any],
              train_lesions: List[LesionData], test_lesions: List[LesionData],
              output_dir: Optional[str] = None) -> pd.DataFrame:
    """
    Train and evaluate once per axis value with identical seeds
    @return: one row per value, also written to `<output_dir>/sweep.csv`
    """
    rows = []
    for raw in values:
        value = parse_axis_value(axis, raw)
        swept = config_for(config, axis, value)
        run_dir = join(output_dir, f"{axis}_{_value_name(value)}") \
            if output_dir else None
        if run_dir:
            write_resolved_config(swept, run_dir)
        LOG.info(f"Sweep {axis}={_value_name(value)}")
        result = ProgressiveTrainer(swept, run_dir).run(train_lesions)
        predictions = predict_many(result.model, test_lesions, swept)
        report = evaluate_results(predictions, test_lesions, swept)
        recist = recist_rows(predictions, test_lesions)
        if run_dir:
            report.write(run_dir)
            write_predictions(predictions, join(run_dir, "predictions"),
                              recist)
        rows.append({
            "axis": axis,
            "axis_value": _value_name(value),
            "mean_dsc": report.summary["dsc"]["mean"],
            "std_dsc": report.summary["dsc"]["std"],
            "mean_vs": report.summary["vs"]["mean"],
            "mean_hd": report.summary["hd_mm"]["mean"],
            "mean_recist_dsc": float(np.mean([r["dsc_crf"] for r in recist]))
            if recist else float("nan")})
    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        path = join(output_dir, "sweep.csv")
        frame.to_csv(path, index=False)
        LOG.info(f"Wrote {path}")
    return frame
