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
Two-label fully connected CRF refinement of per-slice probability maps
"""
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from ovos_utils.log import LOG

from plseg.config import ConfigError

try:
    import pydensecrf.densecrf as dcrf
    from pydensecrf.utils import create_pairwise_bilateral, \
        create_pairwise_gaussian
except ImportError:
    LOG.debug("`pydensecrf` is not installed, only the exact backend is "
              "available")
    dcrf = None

PROB_FLOOR = 1e-6
# kernel matrices up to this many pixels are cached across iterations
_CACHE_PIXELS = 4096
_CHUNK_ROWS = 512
# brute-force MAP search limit
MAX_EXHAUSTIVE_PIXELS = 16


class CrfInputError(ValueError):
    """Probability map or image unfit for refinement"""


@dataclass
class CrfConfig:
    n_iters: int = 5
    w_appearance: float = 5.0
    w_smooth: float = 3.0
    theta_alpha: float = 20.0
    theta_beta: float = 0.1
    theta_gamma: float = 3.0
    threshold: float = 0.5
    backend: str = "exact"
    oversize: str = "tile"
    max_side: int = 128
    workers: int = 1

    def __post_init__(self):
        if self.n_iters < 0:
            raise ConfigError(f"n_iters must be >= 0, got {self.n_iters}")
        if self.w_appearance < 0 or self.w_smooth < 0:
            raise ConfigError("CRF weights must be non-negative")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ConfigError("CRF bandwidths must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got "
                              f"{self.threshold}")
        if self.backend not in ("exact", "pydensecrf"):
            raise ConfigError(f"Unknown CRF backend: {self.backend}")
        if self.oversize not in ("tile", "reject"):
            raise ConfigError(f"Unknown oversize policy: {self.oversize}")
        if self.max_side < 1 or self.workers < 1:
            raise ConfigError("max_side and workers must be >= 1")

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> "CrfConfig":
        known = {k: v for k, v in section.items() if k in cls.__annotations__}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


def unary_energy(prob_map: np.ndarray) -> np.ndarray:
    """
    -log([1 - p, p]) with probability floor, shape (..., 2)
    """
    p = np.clip(np.asarray(prob_map, dtype=np.float64),
                PROB_FLOOR, 1.0 - PROB_FLOOR)
    return -np.log(np.stack([1.0 - p, p], axis=-1))


def _normalize(energy: np.ndarray) -> np.ndarray:
    shifted = -(energy - energy.min(axis=-1, keepdims=True))
    q = np.exp(shifted)
    return q / q.sum(axis=-1, keepdims=True)


class _PairwiseKernel:
    """
    Dense appearance + smoothness kernel over all pixel pairs, diagonal
    excluded. Rows are evaluated in chunks to bound memory.
    """

    def __init__(self, image: np.ndarray, cfg: CrfConfig):
        h, w = image.shape
        yy, xx = np.mgrid[0:h, 0:w]
        self.pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(float)
        self.intensity = np.asarray(image, dtype=np.float64).ravel()
        self.cfg = cfg
        self.n = h * w
        self._matrix = self.rows(0, self.n) if self.n <= _CACHE_PIXELS \
            else None

    def rows(self, start: int, stop: int) -> np.ndarray:
        cfg = self.cfg
        d_pos = ((self.pos[start:stop, None, :] -
                  self.pos[None, :, :]) ** 2).sum(axis=-1)
        d_int = (self.intensity[start:stop, None] -
                 self.intensity[None, :]) ** 2
        block = np.zeros_like(d_pos)
        if cfg.w_appearance > 0:
            block += cfg.w_appearance * np.exp(
                -d_pos / (2 * cfg.theta_alpha ** 2) -
                d_int / (2 * cfg.theta_beta ** 2))
        if cfg.w_smooth > 0:
            block += cfg.w_smooth * np.exp(-d_pos / (2 * cfg.theta_gamma ** 2))
        idx = np.arange(start, stop)
        block[idx - start, idx] = 0.0
        return block

    def apply(self, q: np.ndarray) -> np.ndarray:
        """
        sum_j k(i, j) q_j for every i
        """
        if self._matrix is not None:
            return self._matrix @ q
        out = np.empty_like(q)
        for start in range(0, self.n, _CHUNK_ROWS):
            stop = min(self.n, start + _CHUNK_ROWS)
            out[start:stop] = self.rows(start, stop) @ q
        return out


def mean_field(unary: np.ndarray, image: np.ndarray,
               cfg: CrfConfig) -> np.ndarray:
    """
    Parallel mean-field inference under Potts compatibility
    @param unary: energies (H, W, 2)
    @param image: normalized intensities (H, W)
    @return: label distributions (H, W, 2)
    """
    h, w = image.shape
    unary = np.asarray(unary, dtype=np.float64).reshape(h * w, 2)
    q = _normalize(unary)
    if cfg.n_iters and (cfg.w_appearance > 0 or cfg.w_smooth > 0):
        kernel = _PairwiseKernel(image, cfg)
        for _ in range(cfg.n_iters):
            message = kernel.apply(q)
            # Potts: a label pays for the mass neighbours put on the other one
            q = _normalize(unary + message[:, ::-1])
    return q.reshape(h, w, 2)


def _refine_exact(prob_map: np.ndarray, image: np.ndarray,
                  cfg: CrfConfig) -> np.ndarray:
    return mean_field(unary_energy(prob_map), image, cfg)[..., 1]


def _refine_pydensecrf(prob_map: np.ndarray, image: np.ndarray,
                       cfg: CrfConfig) -> np.ndarray:
    h, w = image.shape
    crf = dcrf.DenseCRF(h * w, 2)
    unary = unary_energy(prob_map).reshape(-1, 2).T
    crf.setUnaryEnergy(np.ascontiguousarray(unary, dtype=np.float32))
    if cfg.w_smooth > 0:
        feats = create_pairwise_gaussian(
            sdims=(cfg.theta_gamma, cfg.theta_gamma), shape=(h, w))
        crf.addPairwiseEnergy(feats, compat=cfg.w_smooth,
                              kernel=dcrf.DIAG_KERNEL,
                              normalization=dcrf.NO_NORMALIZATION)
    if cfg.w_appearance > 0:
        feats = create_pairwise_bilateral(
            sdims=(cfg.theta_alpha, cfg.theta_alpha),
            schan=(cfg.theta_beta,),
            img=np.asarray(image, dtype=np.float32)[..., None], chdim=2)
        crf.addPairwiseEnergy(feats, compat=cfg.w_appearance,
                              kernel=dcrf.DIAG_KERNEL,
                              normalization=dcrf.NO_NORMALIZATION)
    q = np.array(crf.inference(cfg.n_iters)).reshape(2, h, w)
    return q[1].astype(np.float64)


def _tiles(shape: Tuple[int, int], max_side: int):
    h, w = shape
    for y in range(0, h, max_side):
        for x in range(0, w, max_side):
            yield slice(y, min(h, y + max_side)), slice(x, min(w, x + max_side))


def refine(prob_map: np.ndarray, image: np.ndarray,
           cfg: Optional[CrfConfig] = None) -> np.ndarray:
    """
    Refine a foreground probability map with a fully connected CRF whose
    pairwise term is computed from the image
    @param prob_map: foreground probabilities in [0, 1], (H, W)
    @param image: normalized crop, (H, W)
    @param cfg: CRF parameters
    @return: refined foreground probabilities, (H, W)
    """
    cfg = cfg or CrfConfig()
    prob_map = np.asarray(prob_map, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if prob_map.ndim != 2 or prob_map.shape != image.shape:
        raise CrfInputError(f"Shape mismatch: prob {prob_map.shape} vs "
                            f"image {image.shape}")
    if not np.all(np.isfinite(prob_map)) or prob_map.min() < 0 or \
            prob_map.max() > 1:
        raise CrfInputError("Probabilities must lie in [0, 1]")

    backend = _refine_exact
    if cfg.backend == "pydensecrf":
        if dcrf is None:
            LOG.warning("pydensecrf backend requested but not installed, "
                        "using the exact backend")
        else:
            backend = _refine_pydensecrf

    if max(prob_map.shape) <= cfg.max_side:
        return backend(prob_map, image, cfg)
    if cfg.oversize == "reject":
        raise CrfInputError(f"Input {prob_map.shape} exceeds max_side "
                            f"{cfg.max_side}")
    LOG.debug(f"Tiling {prob_map.shape} input into {cfg.max_side} px tiles")
    refined = np.empty_like(prob_map)
    for window in _tiles(prob_map.shape, cfg.max_side):
        refined[window] = backend(prob_map[window], image[window], cfg)
    return refined


def binarize(prob_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(prob_map) >= threshold


def refine_many(prob_maps: Sequence[np.ndarray], images: Sequence[np.ndarray],
                cfg: Optional[CrfConfig] = None) -> List[np.ndarray]:
    """
    Refine independent slices, in a thread pool when `cfg.workers` > 1.
    Output order follows input order.
    """
    cfg = cfg or CrfConfig()
    if len(prob_maps) != len(images):
        raise CrfInputError(f"Got {len(prob_maps)} maps for {len(images)} "
                            f"images")
    if cfg.workers == 1 or len(prob_maps) < 2:
        return [refine(p, i, cfg) for p, i in zip(prob_maps, images)]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(lambda args: refine(*args, cfg),
                             zip(prob_maps, images)))


# exhaustive reference on tiny grids

def labeling_energy(labels: np.ndarray, unary: np.ndarray, image: np.ndarray,
                    cfg: CrfConfig) -> float:
    """
    Gibbs energy of a labeling: unary terms plus Potts-weighted kernel over
    every unordered pixel pair
    """
    labels = np.asarray(labels, dtype=int).ravel()
    unary = np.asarray(unary, dtype=np.float64).reshape(-1, 2)
    energy = unary[np.arange(labels.size), labels].sum()
    kernel = _PairwiseKernel(np.asarray(image, dtype=np.float64), cfg)
    matrix = kernel.rows(0, kernel.n)
    differ = labels[:, None] != labels[None, :]
    return float(energy + 0.5 * (matrix * differ).sum())


def exhaustive_map(unary: np.ndarray, image: np.ndarray,
                   cfg: CrfConfig) -> np.ndarray:
    """
    Minimum-energy labeling by enumerating every labeling
    """
    image = np.asarray(image, dtype=np.float64)
    if image.size > MAX_EXHAUSTIVE_PIXELS:
        raise CrfInputError(f"Exhaustive search limited to "
                            f"{MAX_EXHAUSTIVE_PIXELS} pixels, got "
                            f"{image.size}")
    best, best_energy = None, np.inf
    for labels in itertools.product((0, 1), repeat=image.size):
        energy = labeling_energy(np.array(labels), unary, image, cfg)
        if energy < best_energy:
            best, best_energy = np.array(labels), energy
    return best.reshape(image.shape)


def map_agreement_rate(instances: Sequence[Tuple[np.ndarray, np.ndarray]],
                       cfg: CrfConfig) -> float:
    """
    Fraction of pixels where the mean-field argmax matches the exhaustive MAP
    @param instances: (unary (H, W, 2), image (H, W)) pairs
    """
    if not instances:
        raise ValueError("No instances to compare")
    agree, total = 0, 0
    for unary, image in instances:
        q = mean_field(unary, image, cfg)
        labels = np.argmax(q, axis=-1)
        reference = exhaustive_map(unary, image, cfg)
        agree += int((labels == reference).sum())
        total += reference.size
    rate = agree / total
    LOG.info(f"Mean-field vs exhaustive MAP agreement: {rate:.4f} over "
             f"{len(instances)} instances")
    return rate
