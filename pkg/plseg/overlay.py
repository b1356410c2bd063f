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
from os.path import join
from typing import Iterable, List, Optional

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from ovos_utils.log import LOG

from plseg.volume import CtVolume, IntensityDomain

# lung window in HU
WINDOW = (-1000.0, 400.0)


def _display(volume: CtVolume, index: int) -> np.ndarray:
    plane = np.asarray(volume.data[index], dtype=np.float64)
    if volume.intensity_domain == IntensityDomain.RAW_HU:
        lo, hi = WINDOW
        plane = np.clip((plane - lo) / (hi - lo), 0.0, 1.0)
    return plane


def render_overlays(volume: CtVolume, pred_mask: np.ndarray, out_dir: str,
                    gt_mask: Optional[np.ndarray] = None,
                    slices: Optional[Iterable[int]] = None) -> List[str]:
    """
    One PNG per slice: prediction contours in green, ground truth in red
    @param volume: image volume
    @param pred_mask: predicted 3D mask
    @param out_dir: output directory
    @param gt_mask: optional 3D ground truth
    @param slices: slice indices, default every slice with foreground
    @return: written file paths
    """
    pred_mask = np.asarray(pred_mask).astype(bool)
    if pred_mask.shape != volume.shape:
        raise ValueError(f"Mask shape {pred_mask.shape} does not match "
                         f"volume shape {volume.shape}")
    if gt_mask is not None:
        gt_mask = np.asarray(gt_mask).astype(bool)
    if slices is None:
        has_fg = pred_mask.any(axis=(1, 2))
        if gt_mask is not None:
            has_fg |= gt_mask.any(axis=(1, 2))
        slices = np.flatnonzero(has_fg)
    os.makedirs(out_dir, exist_ok=True)
    dz, dy, dx = volume.spacing
    paths = []
    for index in slices:
        index = int(index)
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.imshow(_display(volume, index), cmap="gray", vmin=0, vmax=1,
                  aspect=dy / dx)
        if pred_mask[index].any():
            ax.contour(pred_mask[index], levels=[0.5], colors="lime",
                       linewidths=1)
        if gt_mask is not None and gt_mask[index].any():
            ax.contour(gt_mask[index], levels=[0.5], colors="red",
                       linewidths=1)
        ax.set_title(f"slice {index}")
        ax.axis("off")
        path = join(out_dir, f"slice_{index:03d}.png")
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    LOG.info(f"Wrote {len(paths)} overlays to {out_dir}")
    return paths
