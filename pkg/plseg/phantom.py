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
Synthetic CT-like volumes with one axis-aligned ellipsoidal lesion each
"""
from dataclasses import dataclass
from os.path import join
from typing import Any, List, Mapping, Optional, Tuple

import numpy as np
from ovos_utils.log import LOG
from scipy import ndimage

from plseg.config import ConfigError, DEFAULT_CONFIG
from plseg.volume import CtVolume, IntensityDomain, LesionRecord, \
    save_mask, save_volume, write_manifest


@dataclass
class PhantomSpec:
    seed: int = 0
    shape: Tuple[int, int, int] = (32, 96, 96)
    spacing: Tuple[float, float, float] = (2.0, 0.8, 0.8)
    semi_axes_mm: Tuple[float, float, float] = (10.0, 10.0, 10.0)
    # voxel coordinates (slice, row, col); volume centre when omitted
    center: Optional[Tuple[float, float, float]] = None
    background_hu: float = -800.0
    lesion_offset_hu: float = 700.0
    noise_sigma_hu: float = 40.0
    texture_amplitude_hu: float = 100.0
    texture_sigma_px: float = 8.0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.semi_axes_mm = tuple(float(a) for a in self.semi_axes_mm)
        if self.center is None:
            self.center = tuple((s - 1) / 2.0 for s in self.shape)
        self.center = tuple(float(c) for c in self.center)
        if min(self.semi_axes_mm) <= 0:
            raise ConfigError(f"Semi-axes must be positive, got "
                              f"{self.semi_axes_mm}")
        if min(self.spacing) <= 0:
            raise ConfigError(f"Spacing must be positive, got {self.spacing}")
        for axis in range(3):
            reach = self.semi_axes_mm[axis] / self.spacing[axis]
            if self.center[axis] - reach < 0 or \
                    self.center[axis] + reach > self.shape[axis] - 1:
                raise ConfigError(f"Lesion does not fit inside the volume "
                                  f"along axis {axis}")

    @property
    def analytic_volume_mm3(self) -> float:
        a, b, c = self.semi_axes_mm
        return 4.0 / 3.0 * np.pi * a * b * c


def ellipsoid_mask(spec: PhantomSpec) -> np.ndarray:
    """
    Voxels whose centres fall inside the lesion ellipsoid
    """
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in spec.shape],
                        indexing="ij")
    total = np.zeros(spec.shape)
    for grid, c, d, a in zip(grids, spec.center, spec.spacing,
                             spec.semi_axes_mm):
        total += ((grid - c) * d / a) ** 2
    return total <= 1.0


def largest_section(mask: np.ndarray) -> int:
    """
    Slice with the largest cross-section, lowest index on ties
    """
    areas = mask.reshape(mask.shape[0], -1).sum(axis=1)
    return int(np.argmax(areas))


def generate(spec: PhantomSpec) -> Tuple[CtVolume, np.ndarray, LesionRecord]:
    """
    Build one phantom; the seed fully determines texture and noise
    @return: raw-HU volume, 3D ground truth, lesion record
    """
    rng = np.random.default_rng(spec.seed)
    gt = ellipsoid_mask(spec)
    texture = ndimage.gaussian_filter(rng.standard_normal(spec.shape),
                                      spec.texture_sigma_px)
    peak = np.abs(texture).max()
    if peak > 0:
        texture *= spec.texture_amplitude_hu / peak
    noise = rng.normal(0.0, spec.noise_sigma_hu, spec.shape)
    hu = spec.background_hu + texture + spec.lesion_offset_hu * gt + noise
    volume = CtVolume(hu.astype(np.float32), spec.spacing,
                      IntensityDomain.RAW_HU)
    recist_slice = largest_section(gt)
    record = LesionRecord(lesion_id=f"phantom_{spec.seed}", volume_path="",
                          recist_slice=recist_slice,
                          recist_mask=gt[recist_slice], gt_volume_mask=gt)
    return volume, gt, record


def sample_spec(rng: np.random.Generator, ranges: Mapping[str, Any],
                seed: int) -> PhantomSpec:
    """
    Draw lesion size and position from the configured ranges
    """
    shape = tuple(int(s) for s in ranges["shape"])
    spacing = tuple(float(s) for s in ranges["spacing"])
    lo = np.asarray(ranges["semi_axes_min_mm"], dtype=float)
    hi = np.asarray(ranges["semi_axes_max_mm"], dtype=float)
    semi_axes = rng.uniform(lo, hi)
    center = []
    for axis in range(3):
        # one voxel margin to the volume edge
        reach = semi_axes[axis] / spacing[axis] + 1.0
        low, high = reach, shape[axis] - 1 - reach
        if high < low:
            raise ConfigError(f"Lesions up to {hi[axis]} mm do not fit "
                              f"along axis {axis}")
        center.append(float(rng.uniform(low, high)))
    return PhantomSpec(seed=seed, shape=shape, spacing=spacing,
                       semi_axes_mm=tuple(semi_axes), center=tuple(center),
                       background_hu=ranges["background_hu"],
                       lesion_offset_hu=ranges["lesion_offset_hu"],
                       noise_sigma_hu=ranges["noise_sigma_hu"],
                       texture_amplitude_hu=ranges["texture_amplitude_hu"],
                       texture_sigma_px=ranges["texture_sigma_px"])


def _write_phantom(spec: PhantomSpec, directory: str) -> dict:
    volume, gt, record = generate(spec)
    stem = join(directory, record.lesion_id)
    save_volume(volume, f"{stem}.nii.gz")
    save_mask(gt, spec.spacing, f"{stem}_gt.nii.gz")
    save_mask(record.recist_mask, spec.spacing[1:], f"{stem}_recist.nii.gz")
    return {"lesion_id": record.lesion_id,
            "volume": f"{stem}.nii.gz",
            "recist_slice": record.recist_slice,
            "recist_mask": f"{stem}_recist.nii.gz",
            "gt_mask": f"{stem}_gt.nii.gz"}


def make_dataset(n_train: int, n_test: int, ranges: Optional[Mapping] = None,
                 seed: int = 0, output_dir: str = ".") -> Tuple[str, str]:
    """
    Generate disjoint train and test phantoms with their manifests
    @param n_train: number of training lesions
    @param n_test: number of test lesions
    @param ranges: `phantom` config section
    @param seed: dataset seed, each phantom gets a distinct derived seed
    @param output_dir: receives train/, test/, train.jsonl and test.jsonl
    @return: train and test manifest paths
    """
    if n_train < 0 or n_test < 0:
        raise ConfigError("Phantom counts must be non-negative")
    specs = phantom_specs(n_train + n_test, ranges, seed)
    paths = []
    for split, split_specs in (("train", specs[:n_train]),
                               ("test", specs[n_train:])):
        directory = join(output_dir, split)
        entries = [_write_phantom(spec, directory) for spec in split_specs]
        paths.append(write_manifest(entries, join(output_dir,
                                                  f"{split}.jsonl")))
        LOG.info(f"Generated {len(entries)} {split} phantoms in {directory}")
    return paths[0], paths[1]


def phantom_specs(n: int, ranges: Optional[Mapping] = None,
                  seed: int = 0) -> List[PhantomSpec]:
    """
    The specs `make_dataset` would draw, without writing anything
    """
    ranges = {**DEFAULT_CONFIG["phantom"], **dict(ranges or {})}
    rng = np.random.default_rng(seed)
    seeds = rng.choice(2 ** 31, size=n, replace=False)
    return [sample_spec(rng, ranges, int(s)) for s in seeds]
