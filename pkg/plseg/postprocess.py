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
Slice-by-slice validation and repair while stacking 2D masks into a volume
"""
import json
import math
import os
from dataclasses import asdict, dataclass
from enum import Enum
from os.path import abspath, dirname
from typing import Any, Iterable, List, Mapping, Optional, Tuple

import numpy as np
from ovos_utils.log import LOG

from plseg.config import ConfigError
from plseg.crf import CrfConfig, binarize, refine
from plseg.volume import paste_crop


class Verdict(str, Enum):
    ACCEPTED = "accepted"
    REPAIRED = "repaired"


@dataclass
class SliceDecision:
    offset: int
    verdict: Verdict
    area_ratio: float
    reason: str

    def to_json(self) -> str:
        data = asdict(self)
        data["verdict"] = self.verdict.value
        return json.dumps(data, sort_keys=True)


@dataclass
class PostprocessConfig:
    min_area_ratio: float = 0.7
    max_area_ratio: float = 1.3
    soft_low: float = 0.1
    soft_high: float = 0.9

    def __post_init__(self):
        if not 0 < self.min_area_ratio <= 1 <= self.max_area_ratio:
            raise ConfigError(f"Area ratio bounds must bracket 1, got "
                              f"[{self.min_area_ratio}, "
                              f"{self.max_area_ratio}]")
        if not 0 <= self.soft_low < self.soft_high <= 1:
            raise ConfigError(f"Need 0 <= soft_low < soft_high <= 1, got "
                              f"{self.soft_low}, {self.soft_high}")

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> "PostprocessConfig":
        known = {k: v for k, v in section.items() if k in cls.__annotations__}
        return cls(**known)


def area_ratio(prev_mask: np.ndarray, new_mask: np.ndarray) -> float:
    prev_area = int(np.count_nonzero(prev_mask))
    if prev_area == 0:
        raise ValueError("Previous mask is empty")
    return int(np.count_nonzero(new_mask)) / prev_area


def _rounded_centroid(mask: np.ndarray) -> Tuple[int, int]:
    rows, cols = np.nonzero(mask)
    return (int(math.floor(rows.mean() + 0.5)),
            int(math.floor(cols.mean() + 0.5)))


def _check(prev_mask: np.ndarray, new_mask: np.ndarray,
           cfg: PostprocessConfig) -> Tuple[bool, float, str]:
    prev_mask = np.asarray(prev_mask).astype(bool)
    new_mask = np.asarray(new_mask).astype(bool)
    if not new_mask.any():
        return False, 0.0, "empty mask"
    ratio = area_ratio(prev_mask, new_mask)
    located = bool((prev_mask & new_mask).any())
    if not located:
        cy, cx = _rounded_centroid(new_mask)
        located = bool(prev_mask[cy, cx])
    if not located:
        return False, ratio, "disjoint from previous slice"
    if not cfg.min_area_ratio <= ratio <= cfg.max_area_ratio:
        return False, ratio, f"area ratio {ratio:.3f} out of range"
    return True, ratio, "valid"


def validate_slice(prev_mask: np.ndarray, new_mask: np.ndarray,
                   cfg: Optional[PostprocessConfig] = None) -> bool:
    """
    A new slice is valid if it overlaps the previous one (or its centroid
    lies inside it) and its area stays within the configured ratio bounds
    """
    return _check(prev_mask, new_mask, cfg or PostprocessConfig())[0]


def repair_slice(prev_mask: np.ndarray, image_slice: np.ndarray,
                 crf_cfg: Optional[CrfConfig] = None,
                 cfg: Optional[PostprocessConfig] = None) -> np.ndarray:
    """
    Re-segment a slice by refining the previous mask on the new image
    @return: repaired mask, or `prev_mask` when the refinement comes out empty
    """
    cfg = cfg or PostprocessConfig()
    crf_cfg = crf_cfg or CrfConfig()
    prev_mask = np.asarray(prev_mask).astype(bool)
    if not prev_mask.any():
        raise ValueError("Cannot repair from an empty mask")
    soft = np.where(prev_mask, cfg.soft_high, cfg.soft_low)
    repaired = binarize(refine(soft, image_slice, crf_cfg), crf_cfg.threshold)
    if not repaired.any():
        LOG.debug("Repair produced an empty mask, keeping the previous one")
        return prev_mask.copy()
    return repaired


def assemble_slices(masks: Mapping[int, np.ndarray],
                    images: Mapping[int, np.ndarray],
                    offsets: Iterable[int],
                    crf_cfg: Optional[CrfConfig] = None,
                    cfg: Optional[PostprocessConfig] = None
                    ) -> Tuple[dict, List[SliceDecision]]:
    """
    Walk outward from offset 0, validating each slice against its accepted
    inner neighbour and repairing it when invalid
    @return: offset -> final mask, and decisions in processing order
    """
    cfg = cfg or PostprocessConfig()
    offsets = sorted(set(offsets))
    if 0 not in offsets:
        raise ValueError("Offsets must include the RECIST slice")
    final = {0: np.asarray(masks[0]).astype(bool)}
    if not final[0].any():
        raise ValueError("RECIST slice mask is empty")
    decisions = [SliceDecision(0, Verdict.ACCEPTED, 1.0, "recist slice")]
    for direction in (1, -1):
        offset = direction
        while offset in offsets:
            prev = final[offset - direction]
            new = masks.get(offset)
            if new is None:
                new = np.zeros_like(prev)
            ok, ratio, reason = _check(prev, new, cfg)
            if ok:
                final[offset] = np.asarray(new).astype(bool)
                decisions.append(SliceDecision(offset, Verdict.ACCEPTED,
                                               ratio, reason))
            else:
                final[offset] = repair_slice(prev, images[offset], crf_cfg,
                                             cfg)
                decisions.append(SliceDecision(offset, Verdict.REPAIRED,
                                               ratio, reason))
                LOG.debug(f"offset {offset} repaired: {reason}")
            offset += direction
    return final, decisions


def assemble_volume(masks: Mapping[int, np.ndarray],
                    images: Mapping[int, np.ndarray],
                    offsets: Iterable[int], recist_slice: int,
                    origin_rc: Tuple[int, int],
                    volume_shape: Tuple[int, int, int],
                    crf_cfg: Optional[CrfConfig] = None,
                    cfg: Optional[PostprocessConfig] = None
                    ) -> Tuple[np.ndarray, List[SliceDecision]]:
    """
    Validated crop-frame slice masks placed into a zero volume
    @param masks: offset -> crop-frame mask
    @param images: offset -> crop-frame image, used for repairs
    @param offsets: the lesion's axial range
    @param recist_slice: slice index of offset 0
    @param origin_rc: crop origin (row, col) in the parent slice
    @param volume_shape: parent shape (slices, rows, cols)
    """
    final, decisions = assemble_slices(masks, images, offsets, crf_cfg, cfg)
    volume = np.zeros(tuple(volume_shape), dtype=bool)
    for offset, mask in final.items():
        index = recist_slice + offset
        if not 0 <= index < volume.shape[0]:
            raise ValueError(f"Offset {offset} outside the volume")
        volume[index] = paste_crop(mask, origin_rc, volume.shape[1:])
    return volume, decisions


def write_decisions(decisions: Iterable[SliceDecision], path: str) -> str:
    """
    JSON-lines decision log, one slice per line
    """
    os.makedirs(dirname(abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        for decision in decisions:
            f.write(decision.to_json() + "\n")
    return path
