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
from dataclasses import dataclass, field
from os.path import join
from typing import Any, Iterable, List, Mapping, Optional

import numpy as np
from ovos_utils.log import LOG

from plseg.crf import CrfConfig, binarize, refine_many
from plseg.metrics import EvalReport, aggregate, evaluate, evaluate_recist
from plseg.network import TiedScaleNet, predict_probability
from plseg.postprocess import PostprocessConfig, SliceDecision, \
    assemble_volume, write_decisions
from plseg.trainer import LesionData
from plseg.volume import load_gt_mask, save_mask

PREDICTIONS_NAME = "predictions.jsonl"


@dataclass
class SegResult:
    lesion_id: str
    mask: np.ndarray
    spacing: tuple
    decisions: List[SliceDecision] = field(default_factory=list)
    # RECIST-slice masks (crop frame) before and after CRF refinement
    recist_network: Optional[np.ndarray] = None
    recist_refined: Optional[np.ndarray] = None


def predict_lesion(model: TiedScaleNet, lesion: LesionData,
                   crf_cfg: Optional[CrfConfig] = None,
                   pp_cfg: Optional[PostprocessConfig] = None,
                   input_px: Optional[int] = None) -> SegResult:
    """
    Segment every slice of the lesion's axial range, refine with the CRF and
    assemble the validated slices into a volume mask
    """
    crf_cfg = crf_cfg or CrfConfig()
    offsets = lesion.axial_range.offsets
    images = {offset: lesion.image_at(offset) for offset in offsets}
    stack = np.stack([images[offset] for offset in offsets])
    probs = predict_probability(model, stack, input_px)
    refined = refine_many(list(probs), [images[o] for o in offsets], crf_cfg)
    masks = {offset: binarize(p, crf_cfg.threshold)
             for offset, p in zip(offsets, refined)}
    index0 = offsets.index(0)
    recist_network = binarize(probs[index0], crf_cfg.threshold)
    recist_refined = masks[0]
    # the delineated slice is taken as given
    masks[0] = lesion.recist_label
    volume, decisions = assemble_volume(
        masks, images, offsets, lesion.record.recist_slice,
        lesion.crop.origin[1:], lesion.crop.parent_shape, crf_cfg, pp_cfg)
    repaired = sum(1 for d in decisions if d.verdict == "repaired")
    LOG.info(f"{lesion.lesion_id}: {len(offsets)} slices, {repaired} "
             f"repaired, {int(volume.sum())} voxels")
    return SegResult(lesion.lesion_id, volume, lesion.spacing, decisions,
                     recist_network, recist_refined)


def predict_many(model: TiedScaleNet, lesions: Iterable[LesionData],
                 config: Mapping[str, Any]) -> List[SegResult]:
    """
    Predict every lesion; failures are logged and the lesion is skipped
    """
    crf_cfg = CrfConfig.from_config(config.get("crf", {}))
    pp_cfg = PostprocessConfig.from_config(config.get("postprocess", {}))
    input_px = config.get("data", {}).get("input_px")
    results = []
    for lesion in lesions:
        try:
            results.append(predict_lesion(model, lesion, crf_cfg, pp_cfg,
                                          input_px))
        except Exception:
            LOG.exception(f"Prediction failed for {lesion.lesion_id}")
    return results


def recist_rows(results: Iterable[SegResult],
                lesions: Iterable[LesionData]) -> List[dict]:
    """
    RECIST-slice DSC with and without CRF for lesions with ground truth
    """
    by_id = {lesion.lesion_id: lesion for lesion in lesions}
    rows = []
    for result in results:
        gt = by_id[result.lesion_id].gt_at(0)
        if gt is not None and result.recist_network is not None:
            rows.append(evaluate_recist(result.lesion_id,
                                        result.recist_network,
                                        result.recist_refined, gt))
    return rows


def evaluate_results(results: Iterable[SegResult],
                     lesions: Iterable[LesionData],
                     config: Optional[Mapping[str, Any]] = None
                     ) -> EvalReport:
    by_id = {lesion.lesion_id: lesion for lesion in lesions}
    rows = []
    for result in results:
        gt = load_gt_mask(by_id[result.lesion_id].record)
        if gt is None:
            LOG.warning(f"No ground truth for {result.lesion_id}")
            continue
        rows.append(evaluate(result.mask, gt, result.spacing,
                             result.lesion_id))
    return aggregate(rows, config)


def write_predictions(results: Iterable[SegResult], output_dir: str,
                      recist: Optional[Iterable[dict]] = None) -> str:
    """
    Write `<lesion_id>_pred.nii.gz`, `<lesion_id>_decisions.jsonl` and the
    `predictions.jsonl` index
    """
    os.makedirs(output_dir, exist_ok=True)
    extra = {row["lesion_id"]: row for row in recist or []}
    index_path = join(output_dir, PREDICTIONS_NAME)
    with open(index_path, "w") as f:
        for result in results:
            mask_name = f"{result.lesion_id}_pred.nii.gz"
            decisions_name = f"{result.lesion_id}_decisions.jsonl"
            save_mask(result.mask, result.spacing, join(output_dir, mask_name))
            write_decisions(result.decisions, join(output_dir,
                                                   decisions_name))
            entry = {"lesion_id": result.lesion_id,
                     "mask": mask_name,
                     "decisions": decisions_name}
            if result.lesion_id in extra:
                entry["dsc_network"] = extra[result.lesion_id]["dsc_network"]
                entry["dsc_crf"] = extra[result.lesion_id]["dsc_crf"]
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    LOG.info(f"Wrote predictions to {output_dir}")
    return index_path


def read_predictions(pred_dir: str) -> List[dict]:
    """
    Entries of a `predictions.jsonl` index with mask paths made absolute
    """
    entries = []
    with open(join(pred_dir, PREDICTIONS_NAME)) as f:
        for line in f:
            if line.strip():
                entry = json.loads(line)
                entry["mask"] = join(pred_dir, entry["mask"])
                entries.append(entry)
    return entries
