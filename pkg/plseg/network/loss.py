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
from dataclasses import dataclass
from typing import Any, Mapping, Optional

import numpy as np
import torch

from plseg.config import ConfigError
from plseg.network.kernels import derive_boundary
from plseg.network.tied_net import HEAD_LEVELS, NetConfig, NetworkOutputs

DICE_EPS = 1.0


@dataclass
class LossWeights:
    w_m: float = 1.0
    w_b: float = 1.0
    w_f: float = 1.0

    def __post_init__(self):
        for name in ("w_m", "w_b", "w_f"):
            if getattr(self, name) < 0:
                raise ConfigError(f"Loss weight {name} must be non-negative, "
                                  f"got {getattr(self, name)}")

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> "LossWeights":
        return cls(w_m=float(section.get("w_m", 1.0)),
                   w_b=float(section.get("w_b", 1.0)),
                   w_f=float(section.get("w_f", 1.0)))


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor,
                   eps: float = DICE_EPS) -> torch.Tensor:
    """
    1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps).

    2D inputs are scored as one image. Inputs with more axes are treated as
    a batch along the first axis and the per-image losses are averaged.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"Shape mismatch: pred {tuple(pred.shape)} vs "
                         f"target {tuple(target.shape)}")
    if pred.ndim <= 2:
        dims = tuple(range(pred.ndim))
    else:
        dims = tuple(range(1, pred.ndim))
    overlap = (pred * target).sum(dim=dims)
    total = pred.sum(dim=dims) + target.sum(dim=dims)
    return (1.0 - (2.0 * overlap + eps) / (total + eps)).mean()


def boundary_targets(masks: np.ndarray, thickness_px: int = 1) -> np.ndarray:
    """
    Per-image boundary maps for a mask (H, W) or stack (N, H, W)
    """
    masks = np.asarray(masks).astype(bool)
    if masks.ndim == 2:
        return derive_boundary(masks, thickness_px)
    return np.stack([derive_boundary(m, thickness_px) for m in masks])


def _as_target(mask, like: torch.Tensor) -> torch.Tensor:
    target = torch.as_tensor(np.asarray(mask, dtype=np.float64),
                             dtype=like.dtype, device=like.device)
    if target.ndim == 2:
        target = target[None, None]
    elif target.ndim == 3:
        target = target[:, None]
    return target


def joint_loss(outputs: NetworkOutputs, gt_mask,
               weights: Optional[LossWeights] = None,
               cfg: Optional[NetConfig] = None,
               eps: float = DICE_EPS,
               gt_boundary=None) -> torch.Tensor:
    """
    Deeply supervised loss over region heads, boundary heads and the final map
    @param outputs: network outputs
    @param gt_mask: binary mask (H, W) or stack (N, H, W)
    @param weights: term weights, unit by default
    @param cfg: network config deciding which boundary heads are supervised
    @param eps: dice smoothing
    @param gt_boundary: precomputed boundary targets, derived from `gt_mask`
        when omitted
    """
    weights = weights or LossWeights()
    cfg = cfg or NetConfig()
    mask = _as_target(gt_mask, outputs.final_map)

    region_terms = []
    for level in HEAD_LEVELS:
        if level not in outputs.region_maps:
            raise ValueError(f"Missing region output: {level}")
        region_terms.append(soft_dice_loss(outputs.region_maps[level], mask,
                                           eps))
    loss = weights.w_m * torch.stack(region_terms).sum()

    if cfg.boundary_levels:
        if gt_boundary is None:
            gt_boundary = boundary_targets(np.asarray(gt_mask),
                                           cfg.boundary_thickness_px)
        boundary = _as_target(gt_boundary, outputs.final_map)
        boundary_terms = []
        for level in cfg.boundary_levels:
            if level not in outputs.boundary_maps:
                raise ValueError(f"Missing boundary output: {level}")
            boundary_terms.append(soft_dice_loss(
                outputs.boundary_maps[level], boundary, eps))
        loss = loss + weights.w_b * torch.stack(boundary_terms).sum()

    return loss + weights.w_f * soft_dice_loss(outputs.final_map, mask, eps)
