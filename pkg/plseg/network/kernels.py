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
from typing import List, Sequence

import numpy as np
import torch
from scipy import ndimage

CORE_KERNEL_SIZE = 3


def interpolation_matrix(core_size: int, target_size: int,
                         dtype=torch.float64) -> torch.Tensor:
    """
    Linear interpolation weights (target_size, core_size) sampling a uniform
    grid over the core kernel's support, end points aligned
    """
    if core_size == 1 or target_size == 1:
        return torch.ones((target_size, core_size), dtype=dtype) / core_size
    matrix = torch.zeros((target_size, core_size), dtype=dtype)
    positions = np.linspace(0.0, core_size - 1.0, target_size)
    for row, pos in enumerate(positions):
        lo = min(int(np.floor(pos)), core_size - 2)
        frac = pos - lo
        matrix[row, lo] = 1.0 - frac
        matrix[row, lo + 1] = frac
    return matrix


def _check_sizes(core_size: int, target_size: int):
    if core_size % 2 == 0 or target_size % 2 == 0:
        raise ValueError(f"Kernel sizes must be odd, got {core_size} -> "
                         f"{target_size}")
    if target_size < core_size:
        raise ValueError(f"Target size {target_size} smaller than core size "
                         f"{core_size}")


def resample_kernel(kernel: torch.Tensor, target_size: int) -> torch.Tensor:
    """
    Bilinear resampling of the last two (square) axes onto a larger grid,
    without normalization. Exactly linear in `kernel`.
    """
    kernel = torch.as_tensor(kernel)
    if kernel.shape[-1] != kernel.shape[-2]:
        raise ValueError(f"Kernels must be square, got {tuple(kernel.shape)}")
    core_size = kernel.shape[-1]
    _check_sizes(core_size, target_size)
    if target_size == core_size:
        return kernel
    matrix = interpolation_matrix(core_size, target_size,
                                  dtype=kernel.dtype).to(kernel.device)
    return matrix @ kernel @ matrix.transpose(0, 1)


def transform_kernel(kernel: torch.Tensor, target_size: int) -> torch.Tensor:
    """
    Scale a core kernel up to `target_size`: bilinear resampling followed by
    rescaling each 2D kernel so its L1 mass equals the core kernel's.
    @param kernel: tensor (..., k, k), k odd
    @param target_size: odd size >= k
    @return: tensor (..., target_size, target_size)
    """
    kernel = torch.as_tensor(kernel)
    resampled = resample_kernel(kernel, target_size)
    if target_size == kernel.shape[-1]:
        return resampled
    core_mass = kernel.abs().sum(dim=(-2, -1), keepdim=True)
    new_mass = resampled.abs().sum(dim=(-2, -1), keepdim=True)
    # all-zero kernels stay zero
    scale = torch.where(new_mass > 0, core_mass / new_mass.clamp_min(1e-300),
                        torch.ones_like(new_mass))
    return resampled * scale


def branch_kernel_sizes(n_branches: int, scale_coefficient: int,
                        core_size: int = CORE_KERNEL_SIZE) -> List[int]:
    """
    Kernel edge per branch: core + (b - 1) * coefficient, bumped to the next
    odd size (3, 5, 7 for three branches and coefficient 2)
    """
    if n_branches < 1 or scale_coefficient < 1:
        raise ValueError(f"Need n_branches >= 1 and scale_coefficient >= 1, "
                         f"got {n_branches}, {scale_coefficient}")
    sizes = []
    for branch in range(n_branches):
        size = core_size + branch * scale_coefficient
        sizes.append(size if size % 2 else size + 1)
    return sizes


def scale_invariant_fuse(responses: Sequence[torch.Tensor]) -> torch.Tensor:
    """
    Element-wise maximum over branch responses of identical shape
    """
    if not responses:
        raise ValueError("Nothing to fuse")
    shape = tuple(responses[0].shape)
    for response in responses[1:]:
        if tuple(response.shape) != shape:
            raise ValueError(f"Cannot fuse responses of shapes {shape} and "
                             f"{tuple(response.shape)}")
    fused = responses[0]
    for response in responses[1:]:
        fused = torch.maximum(fused, response)
    return fused


def derive_boundary(mask: np.ndarray, thickness_px: int = 1) -> np.ndarray:
    """
    Inner boundary of a binary mask: mask AND NOT erode(mask), square
    structuring element of radius `thickness_px`, outside the image counts as
    background
    """
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        return np.zeros_like(mask)
    size = 2 * int(thickness_px) + 1
    structure = np.ones((size,) * mask.ndim, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=structure,
                                    border_value=0)
    return mask & ~eroded
