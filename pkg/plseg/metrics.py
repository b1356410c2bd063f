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
import os
from dataclasses import asdict, dataclass, field
from os.path import join
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from ovos_utils.log import LOG
from scipy.spatial.distance import directed_hausdorff

PER_LESION_COLUMNS = ["lesion_id", "dsc", "vs", "hd_mm"]
SUMMARY_COLUMNS = ["metric", "mean", "std", "n"]


class MetricUndefinedError(ValueError):
    """Metric has no value for the given masks"""


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_masks(cls, pred: np.ndarray, gt: np.ndarray) -> "ConfusionCounts":
        pred = np.asarray(pred).astype(bool)
        gt = np.asarray(gt).astype(bool)
        if pred.shape != gt.shape:
            raise ValueError(f"Shape mismatch: {pred.shape} vs {gt.shape}")
        return cls(tp=int(np.count_nonzero(pred & gt)),
                   fp=int(np.count_nonzero(pred & ~gt)),
                   fn=int(np.count_nonzero(~pred & gt)))


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """
    Dice similarity coefficient, 1.0 when both masks are empty
    """
    c = ConfusionCounts.from_masks(a, b)
    denominator = 2 * c.tp + c.fn + c.fp
    if denominator == 0:
        return 1.0
    return 2 * c.tp / denominator


def vs(a: np.ndarray, b: np.ndarray) -> float:
    """
    Volumetric similarity, 1.0 when both masks are empty
    """
    c = ConfusionCounts.from_masks(a, b)
    denominator = 2 * c.tp + c.fn + c.fp
    if denominator == 0:
        return 1.0
    return 1.0 - abs(c.fn - c.fp) / denominator


def hausdorff_mm(a: np.ndarray, b: np.ndarray,
                 spacing: Sequence[float]) -> float:
    """
    Symmetric Hausdorff distance between foreground voxel centres in mm
    @param a: nonempty mask
    @param b: nonempty mask, same shape
    @param spacing: per-axis voxel size
    """
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"Shape mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise MetricUndefinedError("Hausdorff distance needs two nonempty "
                                   "masks")
    scale = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(a) * scale
    pb = np.argwhere(b) * scale
    return float(max(directed_hausdorff(pa, pb)[0],
                     directed_hausdorff(pb, pa)[0]))


@dataclass
class EvalRow:
    lesion_id: str
    dsc: float
    vs: float
    hd_mm: Optional[float]


@dataclass
class EvalReport:
    rows: List[EvalRow]
    summary: Dict[str, Dict[str, float]]
    config: Dict[str, Any] = field(default_factory=dict)

    def per_lesion_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows],
                            columns=PER_LESION_COLUMNS)

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"metric": name, **stats}
                             for name, stats in self.summary.items()],
                            columns=SUMMARY_COLUMNS)

    def write(self, output_dir: str) -> List[str]:
        os.makedirs(output_dir, exist_ok=True)
        paths = [join(output_dir, "per_lesion.csv"),
                 join(output_dir, "summary.csv")]
        self.per_lesion_frame().to_csv(paths[0], index=False)
        self.summary_frame().to_csv(paths[1], index=False)
        LOG.info(f"Wrote {paths}")
        return paths


def evaluate(pred_3d: np.ndarray, gt_3d: np.ndarray,
             spacing: Sequence[float], lesion_id: str = "") -> EvalRow:
    """
    DSC, VS and Hausdorff distance for one lesion; HD is None when undefined
    """
    try:
        hd = hausdorff_mm(pred_3d, gt_3d, spacing)
    except MetricUndefinedError:
        LOG.warning(f"Hausdorff distance undefined for {lesion_id or 'mask'}")
        hd = None
    return EvalRow(lesion_id, dsc(pred_3d, gt_3d), vs(pred_3d, gt_3d), hd)


def aggregate(rows: Iterable[EvalRow],
              config: Optional[Mapping[str, Any]] = None) -> EvalReport:
    """
    Mean and population std of each metric over the rows that define it
    """
    rows = list(rows)
    summary = {}
    for metric in ("dsc", "vs", "hd_mm"):
        values = np.array([getattr(r, metric) for r in rows
                           if getattr(r, metric) is not None], dtype=float)
        if values.size:
            summary[metric] = {"mean": float(values.mean()),
                               "std": float(values.std(ddof=0)),
                               "n": int(values.size)}
        else:
            summary[metric] = {"mean": float("nan"), "std": float("nan"),
                               "n": 0}
    return EvalReport(rows, summary, dict(config or {}))


def evaluate_recist(lesion_id: str, network_2d: np.ndarray,
                    refined_2d: np.ndarray, gt_2d: np.ndarray) -> dict:
    """
    RECIST-slice DSC of the raw network mask and of the CRF-refined mask
    """
    return {"lesion_id": lesion_id,
            "dsc_network": dsc(network_2d, gt_2d),
            "dsc_crf": dsc(refined_2d, gt_2d)}


def per_offset_dsc(pred_3d: np.ndarray, gt_3d: np.ndarray, recist_slice: int,
                   offsets: Iterable[int]) -> Dict[int, float]:
    """
    2D DSC per slice offset from the RECIST slice
    """
    pred_3d = np.asarray(pred_3d)
    gt_3d = np.asarray(gt_3d)
    scores = {}
    for offset in offsets:
        index = recist_slice + offset
        if not 0 <= index < gt_3d.shape[0]:
            raise ValueError(f"Offset {offset} outside the volume")
        scores[int(offset)] = dsc(pred_3d[index], gt_3d[index])
    return scores
