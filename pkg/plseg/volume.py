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
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from os.path import abspath, dirname, isabs, join, relpath
from typing import Iterable, List, Optional, Sequence, Tuple

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError
from ovos_utils.log import LOG
from scipy.spatial.distance import pdist

from plseg.network.kernels import derive_boundary

# HU shift and scale used to map CT intensities into [0, 1]
HU_SHIFT = 1000.0
HU_SCALE = 3000.0

DEFAULT_MIN_CROP_PX = 32

_NORMALIZED_TAG = b"plseg:normalized"


class VolumeFormatError(ValueError):
    """Malformed or inconsistent volume/mask file"""


class DataQualityError(ValueError):
    """Image content that cannot be processed (e.g. non-finite values)"""


class CropError(ValueError):
    """ROI cannot be derived from the given delineation"""


class IntensityDomain(str, Enum):
    RAW_HU = "raw-hu"
    NORMALIZED = "normalized"


Spacing = Tuple[float, float, float]


@dataclass
class CtVolume:
    """
    3D scalar field indexed (slice, row, col) with spacing (dz, dy, dx) in mm
    """
    data: np.ndarray
    spacing: Spacing
    intensity_domain: IntensityDomain = IntensityDomain.RAW_HU

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise VolumeFormatError(f"Expected a 3D volume, got shape "
                                    f"{self.data.shape}")
        if len(self.spacing) != 3:
            raise VolumeFormatError(f"Expected 3 spacing values, got "
                                    f"{self.spacing}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise VolumeFormatError(f"Spacing must be strictly positive, got "
                                    f"{self.spacing}")
        self.intensity_domain = IntensityDomain(self.intensity_domain)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def n_slices(self) -> int:
        return self.data.shape[0]


@dataclass
class LesionRecord:
    """
    A lesion's only supervision: one delineated axial slice
    """
    lesion_id: str
    volume_path: str
    recist_slice: int
    recist_mask: np.ndarray
    gt_mask_path: Optional[str] = None
    gt_volume_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.recist_mask = np.asarray(self.recist_mask).astype(bool)
        if self.recist_mask.ndim != 2:
            raise VolumeFormatError(f"RECIST mask must be 2D, got shape "
                                    f"{self.recist_mask.shape}")
        if not self.recist_mask.any():
            raise CropError(f"Empty RECIST mask for lesion {self.lesion_id}")
        if self.gt_volume_mask is not None:
            self.gt_volume_mask = np.asarray(self.gt_volume_mask).astype(bool)

    def check_volume(self, volume: CtVolume):
        """
        Validate this record against the volume it refers to
        @param volume: parent volume
        """
        if not 0 <= self.recist_slice < volume.n_slices:
            raise VolumeFormatError(
                f"RECIST slice {self.recist_slice} outside volume with "
                f"{volume.n_slices} slices ({self.lesion_id})")
        if self.recist_mask.shape != volume.shape[1:]:
            raise VolumeFormatError(
                f"RECIST mask shape {self.recist_mask.shape} does not match "
                f"slice shape {volume.shape[1:]} ({self.lesion_id})")
        if self.gt_volume_mask is not None and \
                self.gt_volume_mask.shape != volume.shape:
            raise VolumeFormatError(
                f"GT mask shape {self.gt_volume_mask.shape} does not match "
                f"volume shape {volume.shape} ({self.lesion_id})")


@dataclass
class RoiCrop:
    """
    Square in-plane crops of consecutive slices and their placement in the
    parent volume. Pixels outside the parent are zero.
    """
    slices: np.ndarray
    origin: Tuple[int, int, int]
    side_px: int
    parent_shape: Tuple[int, int, int] = field(default=(0, 0, 0))

    def slice_at(self, index: int) -> np.ndarray:
        """
        Crop of parent slice `index`
        """
        return self.slices[index - self.origin[0]]

    def to_parent(self, crop2d: np.ndarray,
                  parent_hw: Optional[Tuple[int, int]] = None) -> np.ndarray:
        """
        Map a 2D crop-frame array back onto a full parent slice
        @param crop2d: array of shape (side_px, side_px)
        @param parent_hw: parent (rows, cols), defaults to `parent_shape`
        @return: parent-frame array, zero outside the crop
        """
        parent_hw = parent_hw or self.parent_shape[1:]
        return paste_crop(crop2d, self.origin[1:], parent_hw)


def normalize_intensity(volume: CtVolume) -> CtVolume:
    """
    Map raw HU into [0, 1]: shift by +1000, clip at 0, divide by 3000,
    clip at 1.
    @param volume: raw-HU volume
    @return: normalized volume with the same shape and spacing
    """
    if volume.intensity_domain != IntensityDomain.RAW_HU:
        raise DataQualityError("Volume is already normalized")
    data = np.asarray(volume.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise DataQualityError(f"Volume has "
                               f"{int(np.sum(~np.isfinite(data)))} "
                               f"non-finite values")
    normalized = np.minimum(np.maximum(data + HU_SHIFT, 0.0) / HU_SCALE, 1.0)
    return CtVolume(normalized.astype(np.float32), volume.spacing,
                    IntensityDomain.NORMALIZED)


def mask_centroid(mask: np.ndarray) -> Tuple[int, int]:
    """
    Centroid of foreground pixels, rounded toward the lower index
    """
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise CropError("Centroid of an empty mask is undefined")
    return int(math.floor(rows.mean())), int(math.floor(cols.mean()))


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """
    Coordinates (N, 2) of mask pixels with at least one 8-neighbour outside
    the mask (image border counts as outside)
    """
    return np.argwhere(derive_boundary(mask, 1))


def longest_diameter(mask: np.ndarray,
                     spacing: Sequence[float] = (1.0, 1.0)) -> float:
    """
    Maximum distance between centres of boundary pixels of a 2D mask
    @param mask: nonempty 2D binary mask
    @param spacing: (dy, dx); unit spacing measures pixels
    @return: diameter in the units of `spacing`
    """
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise CropError("Diameter of an empty mask is undefined")
    points = boundary_pixels(mask).astype(np.float64)
    if len(points) < 2:
        return 0.0
    points *= np.asarray(spacing, dtype=np.float64)
    return float(pdist(points).max())


def crop_edge_px(mask: np.ndarray,
                 min_edge: int = DEFAULT_MIN_CROP_PX) -> int:
    """
    Square ROI edge: twice the longest in-plane diameter in pixels, floored
    at `min_edge`
    """
    return max(int(min_edge), int(math.ceil(2.0 * longest_diameter(mask))))


def _padded_window(data: np.ndarray, start: int, stop: int,
                   axis: int) -> np.ndarray:
    """zero-padded slice [start, stop) of `data` along `axis`"""
    size = data.shape[axis]
    lo, hi = max(start, 0), min(stop, size)
    index = [slice(None)] * data.ndim
    index[axis] = slice(lo, hi)
    window = data[tuple(index)]
    pad = [(0, 0)] * data.ndim
    pad[axis] = (lo - start, stop - hi)
    return np.pad(window, pad, mode="constant", constant_values=0)


def crop_roi(volume: CtVolume, record: LesionRecord,
             offsets: Optional[Iterable[int]] = None,
             min_edge: int = DEFAULT_MIN_CROP_PX) -> RoiCrop:
    """
    Square ROI around the RECIST delineation, fixed from the RECIST slice for
    every slice of the lesion's axial range.
    @param volume: normalized volume
    @param record: lesion record
    @param offsets: slice offsets to include, default only the RECIST slice
    @param min_edge: smallest crop edge in pixels
    @return: RoiCrop over the requested slices
    """
    record.check_volume(volume)
    if volume.intensity_domain != IntensityDomain.NORMALIZED:
        raise VolumeFormatError(f"ROI crops need a normalized volume, got "
                                f"{volume.intensity_domain.value} "
                                f"({record.lesion_id})")
    offsets = sorted(set(offsets)) if offsets is not None else [0]
    if 0 not in offsets:
        raise CropError("Crop offsets must include the RECIST slice")
    side = crop_edge_px(record.recist_mask, min_edge)
    cy, cx = mask_centroid(record.recist_mask)
    # centroid lands on the lower of the two central pixels for even sides
    row0 = cy - (side - 1) // 2
    col0 = cx - (side - 1) // 2
    slice0 = record.recist_slice + offsets[0]
    slice1 = record.recist_slice + offsets[-1] + 1
    if slice0 < 0 or slice1 > volume.n_slices:
        raise CropError(f"Offsets {offsets[0]}..{offsets[-1]} leave the "
                        f"volume ({record.lesion_id})")
    stack = volume.data[slice0:slice1]
    stack = _padded_window(stack, row0, row0 + side, axis=1)
    stack = _padded_window(stack, col0, col0 + side, axis=2)
    LOG.debug(f"ROI {record.lesion_id}: side={side} origin="
              f"{(slice0, row0, col0)} slices={slice1 - slice0}")
    return RoiCrop(slices=stack, origin=(slice0, row0, col0), side_px=side,
                   parent_shape=volume.shape)


def crop_plane(plane: np.ndarray, origin_rc: Tuple[int, int],
               side: int) -> np.ndarray:
    """
    Zero-padded square crop of a single 2D plane
    """
    window = _padded_window(np.asarray(plane), origin_rc[0],
                            origin_rc[0] + side, axis=0)
    return _padded_window(window, origin_rc[1], origin_rc[1] + side, axis=1)


def paste_crop(crop2d: np.ndarray, origin_rc: Tuple[int, int],
               parent_hw: Tuple[int, int]) -> np.ndarray:
    """
    Place a crop-frame array into a zero parent plane, dropping pixels that
    fall outside the parent
    """
    crop2d = np.asarray(crop2d)
    out = np.zeros(tuple(parent_hw), dtype=crop2d.dtype)
    row0, col0 = origin_rc
    side_r, side_c = crop2d.shape
    r_lo, c_lo = max(row0, 0), max(col0, 0)
    r_hi = min(row0 + side_r, parent_hw[0])
    c_hi = min(col0 + side_c, parent_hw[1])
    if r_hi <= r_lo or c_hi <= c_lo:
        return out
    out[r_lo:r_hi, c_lo:c_hi] = crop2d[r_lo - row0:r_hi - row0,
                                       c_lo - col0:c_hi - col0]
    return out


# NIfTI plumbing. Arrays are (slice, row, col); files store (x, y, z).

def _to_nifti(data: np.ndarray, spacing: Sequence[float],
              normalized: bool = False) -> nib.Nifti1Image:
    data = np.asarray(data)
    if data.dtype == bool:
        data = data.astype(np.uint8)
    if len(spacing) != data.ndim:
        raise VolumeFormatError(f"{len(spacing)} spacing values for a "
                                f"{data.ndim}D array")
    if not all(s > 0 for s in spacing):
        raise VolumeFormatError(f"Spacing must be strictly positive, got "
                                f"{tuple(spacing)}")
    zooms = tuple(float(s) for s in reversed(spacing))
    affine = np.eye(4)
    for axis, zoom in enumerate(zooms):
        affine[axis, axis] = zoom
    image = nib.Nifti1Image(np.ascontiguousarray(data.T), affine)
    image.header.set_data_dtype(data.dtype)
    image.header.set_zooms(zooms)
    if normalized:
        image.header["descrip"] = _NORMALIZED_TAG
    return image


def load_array(path: str) -> Tuple[np.ndarray, Tuple[float, ...], bool]:
    """
    Read a NIfTI file as a (slice, row, col) array
    @param path: NIfTI path
    @return: array in stored dtype, spacing in array-axis order, and whether
        the file is tagged as normalized
    """
    try:
        image = nib.load(path)
        data = np.asanyarray(image.dataobj)
        zooms = image.header.get_zooms()[:data.ndim]
        descrip = bytes(image.header["descrip"].item())
    except (OSError, ImageFileError, ValueError) as e:
        raise VolumeFormatError(f"Cannot read {path}: {e}") from e
    if len(zooms) != data.ndim:
        raise VolumeFormatError(f"{path}: {len(zooms)} spacing values for "
                                f"a {data.ndim}D array")
    spacing = tuple(float(z) for z in reversed(zooms))
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise VolumeFormatError(f"{path}: spacing must be strictly positive, "
                                f"got {spacing}")
    return np.asarray(data).T, spacing, descrip.startswith(_NORMALIZED_TAG)


def load_volume(path: str) -> CtVolume:
    """
    Load a 3D CT volume
    @param path: NIfTI file
    @return: CtVolume
    """
    data, spacing, normalized = load_array(path)
    if data.ndim != 3:
        raise VolumeFormatError(f"{path}: expected a 3D volume, got shape "
                                f"{data.shape}")
    domain = IntensityDomain.NORMALIZED if normalized \
        else IntensityDomain.RAW_HU
    return CtVolume(data, spacing, domain)


def save_volume(volume: CtVolume, path: str) -> str:
    """
    Write a CtVolume, keeping its dtype and intensity domain tag
    """
    os.makedirs(dirname(abspath(path)), exist_ok=True)
    image = _to_nifti(volume.data, volume.spacing,
                      volume.intensity_domain == IntensityDomain.NORMALIZED)
    nib.save(image, path)
    LOG.debug(f"Wrote {path}")
    return path


def save_mask(mask: np.ndarray, spacing: Sequence[float], path: str) -> str:
    """
    Write a binary 2D or 3D mask as uint8
    @param mask: binary array
    @param spacing: one value per array axis
    @param path: output NIfTI path
    """
    mask = np.asarray(mask)
    if mask.ndim not in (2, 3):
        raise VolumeFormatError(f"Masks must be 2D or 3D, got shape "
                                f"{mask.shape}")
    os.makedirs(dirname(abspath(path)), exist_ok=True)
    nib.save(_to_nifti(mask.astype(bool).astype(np.uint8), spacing), path)
    LOG.debug(f"Wrote {path}")
    return path


def load_mask(path: str) -> Tuple[np.ndarray, Tuple[float, ...]]:
    """
    Read a binary mask written by `save_mask`
    """
    data, spacing, _ = load_array(path)
    return data.astype(bool), spacing


# lesion manifests: one JSON object per line, paths relative to the manifest

def _resolve(base: str, path: Optional[str]) -> Optional[str]:
    if not path:
        return None
    return path if isabs(path) else join(base, path)


def read_manifest(path: str) -> List[LesionRecord]:
    """
    Read a JSON-lines lesion manifest
    @param path: manifest file
    @return: lesion records, masks loaded
    """
    base = dirname(abspath(path))
    records = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                volume_path = _resolve(base, entry["volume"])
                recist_mask, _ = load_mask(_resolve(base,
                                                    entry["recist_mask"]))
                gt_path = _resolve(base, entry.get("gt_mask"))
                lesion_id = str(entry.get("lesion_id") or
                                f"{os.path.basename(volume_path)}:{line_no}")
                records.append(LesionRecord(
                    lesion_id=lesion_id,
                    volume_path=volume_path,
                    recist_slice=int(entry["recist_slice"]),
                    recist_mask=recist_mask,
                    gt_mask_path=gt_path))
            except (KeyError, TypeError, json.JSONDecodeError) as e:
                raise VolumeFormatError(f"{path}:{line_no}: malformed "
                                        f"manifest entry ({e})") from e
    LOG.info(f"Read {len(records)} lesion records from {path}")
    return records


def write_manifest(entries: Iterable[dict], path: str) -> str:
    """
    Write manifest entries, rewriting paths relative to the manifest
    @param entries: dicts with volume, recist_slice, recist_mask, gt_mask?
    @param path: output manifest
    """
    base = dirname(abspath(path))
    os.makedirs(base, exist_ok=True)
    with open(path, "w") as f:
        for entry in entries:
            row = dict(entry)
            for key in ("volume", "recist_mask", "gt_mask"):
                if row.get(key):
                    row[key] = relpath(abspath(row[key]), base)
            f.write(json.dumps(row, sort_keys=True) + "\n")
    LOG.debug(f"Wrote {path}")
    return path


def load_gt_mask(record: LesionRecord) -> Optional[np.ndarray]:
    """
    Load (and cache) a record's 3D ground truth, if it has one
    """
    if record.gt_volume_mask is None and record.gt_mask_path:
        record.gt_volume_mask, _ = load_mask(record.gt_mask_path)
    return record.gt_volume_mask
