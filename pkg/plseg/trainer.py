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
Progressive training: start from the delineated RECIST slices, then grow the
training set one slice further up and down per iteration with the network's
own CRF-refined predictions.
"""
import copy
import math
import os
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from os.path import join
from typing import Any, Dict, Iterable, List, Mapping, Optional, Set, Tuple

import numpy as np
import pandas as pd
import torch
from ovos_utils.log import LOG
from ovos_utils.process_utils import ProcessState, ProcessStatus, \
    StatusCallbackMap

from plseg.config import ConfigError
from plseg.crf import CrfConfig, binarize, refine_many
from plseg.metrics import dsc
from plseg.network import LossWeights, NetConfig, TiedScaleNet, build_model, \
    joint_loss, predict_probability, resize_stack, save_checkpoint
from plseg.network.loss import DICE_EPS, boundary_targets
from plseg.volume import CtVolume, IntensityDomain, LesionRecord, RoiCrop, \
    crop_plane, crop_roi, load_gt_mask, load_volume, longest_diameter, \
    normalize_intensity, DEFAULT_MIN_CROP_PX

AXIAL_RANGE_FACTOR = 0.8

RUN_REPORT_COLUMNS = ["iteration", "samples_added", "total_samples",
                      "mean_loss", "wall_time_s"]
PER_OFFSET_COLUMNS = ["iteration", "lesion_id", "offset", "dsc"]


class TrainingDivergedError(RuntimeError):
    """Non-finite training loss"""


class Provenance(str, Enum):
    RECIST = "recist"
    PROPAGATED = "propagated"


@dataclass
class AxialRange:
    """
    Slice offsets [lo, hi] around the RECIST slice; `radius` is the
    symmetric extent before clipping to the volume
    """
    lesion_id: str
    radius: int
    lo: int
    hi: int

    def __post_init__(self):
        if not self.lo <= 0 <= self.hi:
            raise ValueError(f"Axial range must contain offset 0, got "
                             f"[{self.lo}, {self.hi}]")

    @property
    def offsets(self) -> List[int]:
        return list(range(self.lo, self.hi + 1))

    def __contains__(self, offset: int) -> bool:
        return self.lo <= offset <= self.hi


@dataclass
class TrainingSample:
    lesion_id: str
    offset: int
    image: np.ndarray
    label: np.ndarray
    provenance: Provenance = Provenance.RECIST
    iteration: int = 0

    @property
    def key(self) -> Tuple[str, int]:
        return self.lesion_id, self.offset


class TrainingSet:
    """
    Samples keyed by (lesion_id, offset). Existing keys are never replaced.
    """

    def __init__(self, samples: Iterable[TrainingSample] = ()):
        self._samples: Dict[Tuple[str, int], TrainingSample] = {}
        # (lesion_id, direction) pairs whose propagation has ended
        self.terminated: Set[Tuple[str, int]] = set()
        for sample in samples:
            self.add(sample)

    def add(self, sample: TrainingSample) -> bool:
        """
        @return: True if the sample was new
        """
        if sample.key in self._samples:
            return False
        self._samples[sample.key] = sample
        return True

    def __contains__(self, key: Tuple[str, int]) -> bool:
        return key in self._samples

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, key: Tuple[str, int]) -> TrainingSample:
        return self._samples[key]

    @property
    def samples(self) -> List[TrainingSample]:
        return [self._samples[k] for k in sorted(self._samples)]

    def keys(self) -> List[Tuple[str, int]]:
        return sorted(self._samples)


@dataclass
class TrainSchedule:
    k_max: int = 3
    max_epochs: int = 200
    plateau_window: int = 20
    plateau_tolerance: float = 1e-3
    learning_rate: float = 2e-4
    lr_halving_epochs: int = 100
    batch_size: int = 48
    optimizer: str = "sgd"
    momentum: float = 0.9

    def __post_init__(self):
        if self.k_max < 0:
            raise ConfigError(f"k_max must be >= 0, got {self.k_max}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got "
                              f"{self.max_epochs}")
        if self.plateau_window < 1 or self.batch_size < 1 or \
                self.lr_halving_epochs < 1:
            raise ConfigError("plateau_window, batch_size and "
                              "lr_halving_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got "
                              f"{self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"Unknown optimizer: {self.optimizer}")

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> "TrainSchedule":
        known = {k: v for k, v in section.items() if k in cls.__annotations__}
        return cls(**known)


@dataclass
class FitResult:
    model: TiedScaleNet
    losses: List[float]
    best_loss: float
    epochs: int


@dataclass
class LesionData:
    """
    A lesion ready for training or inference: normalized ROI stack over its
    axial range plus the crop-frame RECIST label
    """
    record: LesionRecord
    spacing: Tuple[float, float, float]
    axial_range: AxialRange
    crop: RoiCrop
    recist_label: np.ndarray
    gt_volume: Optional[np.ndarray] = None

    @property
    def lesion_id(self) -> str:
        return self.record.lesion_id

    def image_at(self, offset: int) -> np.ndarray:
        return self.crop.slice_at(self.record.recist_slice + offset)

    def gt_at(self, offset: int) -> Optional[np.ndarray]:
        if self.gt_volume is None:
            return None
        return crop_plane(self.gt_volume[self.record.recist_slice + offset],
                          self.crop.origin[1:], self.crop.side_px)


def max_diameter_mm(mask: np.ndarray,
                    spacing: Tuple[float, float]) -> float:
    """
    Longest distance between boundary pixel centres, in mm
    @param mask: nonempty 2D mask
    @param spacing: in-plane (dy, dx)
    """
    return longest_diameter(mask, spacing)


def axial_radius(diameter_mm: float, slice_thickness_mm: float) -> int:
    """
    Number of slices either side of the RECIST slice a lesion of this
    diameter is expected to reach
    """
    if slice_thickness_mm <= 0:
        raise ValueError(f"Slice thickness must be positive, got "
                         f"{slice_thickness_mm}")
    # tolerance keeps exact multiples (8 mm / 2 mm) from flooring down
    return int(math.floor(AXIAL_RANGE_FACTOR * diameter_mm /
                          slice_thickness_mm + 1e-9))


def estimate_axial_range(record: LesionRecord,
                         volume: CtVolume) -> AxialRange:
    """
    Offsets within 0.8 x the RECIST diameter of the RECIST slice, in slices,
    clipped to the volume
    """
    record.check_volume(volume)
    dz, dy, dx = volume.spacing
    diameter = max_diameter_mm(record.recist_mask, (dy, dx))
    radius = axial_radius(diameter, dz)
    lo = max(-radius, -record.recist_slice)
    hi = min(radius, volume.n_slices - 1 - record.recist_slice)
    LOG.debug(f"{record.lesion_id}: diameter {diameter:.2f} mm, axial "
              f"range [{lo}, {hi}]")
    return AxialRange(record.lesion_id, radius, lo, hi)


def prepare_lesion(record: LesionRecord, volume: CtVolume,
                   min_edge: int = DEFAULT_MIN_CROP_PX) -> LesionData:
    """
    Normalize (if needed), estimate the axial range and crop the ROI stack
    """
    if volume.intensity_domain == IntensityDomain.RAW_HU:
        volume = normalize_intensity(volume)
    axial_range = estimate_axial_range(record, volume)
    crop = crop_roi(volume, record, axial_range.offsets, min_edge)
    label = crop_plane(record.recist_mask, crop.origin[1:], crop.side_px)
    return LesionData(record=record, spacing=volume.spacing,
                      axial_range=axial_range, crop=crop,
                      recist_label=label.astype(bool),
                      gt_volume=load_gt_mask(record))


def load_lesions(records: Iterable[LesionRecord],
                 min_edge: int = DEFAULT_MIN_CROP_PX) -> List[LesionData]:
    """
    Load and prepare every record; lesions that fail are logged and skipped
    """
    volumes: Dict[str, CtVolume] = {}
    lesions = []
    for record in records:
        try:
            if record.volume_path not in volumes:
                volumes[record.volume_path] = \
                    normalize_intensity(load_volume(record.volume_path))
            lesions.append(prepare_lesion(record,
                                          volumes[record.volume_path],
                                          min_edge))
        except Exception:
            LOG.exception(f"Skipping lesion {record.lesion_id}")
    return lesions


def recist_training_set(lesions: Iterable[LesionData]) -> TrainingSet:
    return TrainingSet(TrainingSample(lesion.lesion_id, 0,
                                      lesion.image_at(0), lesion.recist_label,
                                      Provenance.RECIST, 0)
                       for lesion in lesions)


def _make_optimizer(model: TiedScaleNet, schedule: TrainSchedule):
    if schedule.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=schedule.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=schedule.learning_rate,
                           momentum=schedule.momentum)


def _plateaued(losses: List[float], window: int, tolerance: float) -> bool:
    if len(losses) < 2 * window:
        return False
    previous = float(np.mean(losses[-2 * window:-window]))
    recent = float(np.mean(losses[-window:]))
    improvement = (previous - recent) / max(abs(previous), 1e-12)
    return improvement < tolerance


def _stack_samples(samples: List[TrainingSample], input_px: Optional[int],
                   thickness_px: int):
    images = [np.asarray(s.image, dtype=np.float64) for s in samples]
    masks = [np.asarray(s.label, dtype=bool) for s in samples]
    size = input_px or images[0].shape[-1]
    images = np.concatenate([resize_stack(i[None], size) for i in images])
    labels = np.concatenate([resize_stack(m[None], size, mode="nearest")
                             for m in masks])
    return images, labels, boundary_targets(labels, thickness_px)


def train_until_converged(training_set: TrainingSet, model: TiedScaleNet,
                          schedule: TrainSchedule,
                          weights: Optional[LossWeights] = None,
                          seed: int = 0, eps: float = DICE_EPS,
                          input_px: Optional[int] = None) -> FitResult:
    """
    Minimize the joint loss over the training set, warm-starting from `model`
    @param training_set: nonempty training set
    @param model: starting parameters, updated in place
    @param schedule: optimisation schedule
    @param weights: loss weights
    @param seed: seeds the mini-batch order
    @param eps: dice smoothing
    @param input_px: network input edge, crops are resampled to it
    @return: model holding the best-loss parameters and the loss trace
    """
    if not len(training_set):
        raise ValueError("Cannot train on an empty training set")
    if schedule.max_epochs == 0:
        return FitResult(model, [], float("nan"), 0)

    weights = weights or LossWeights()
    cfg = model.config
    dtype = model.stem.weight.dtype
    images, labels, boundaries = _stack_samples(
        training_set.samples, input_px, cfg.boundary_thickness_px)
    images_t = torch.as_tensor(images, dtype=dtype)[:, None]
    n = len(images)

    generator = torch.Generator().manual_seed(seed)
    optimizer = _make_optimizer(model, schedule)
    lr_schedule = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=schedule.lr_halving_epochs, gamma=0.5)

    losses: List[float] = []
    best_loss, best_state = float("inf"), copy.deepcopy(model.state_dict())
    model.train()
    for epoch in range(schedule.max_epochs):
        order = torch.randperm(n, generator=generator).numpy()
        total = 0.0
        for start in range(0, n, schedule.batch_size):
            batch = order[start:start + schedule.batch_size]
            optimizer.zero_grad()
            outputs = model(images_t[torch.as_tensor(batch)])
            loss = joint_loss(outputs, labels[batch], weights, cfg, eps,
                              gt_boundary=boundaries[batch])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"Non-finite loss at epoch {epoch} "
                    f"(lr={optimizer.param_groups[0]['lr']:.3g})")
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(batch)
        lr_schedule.step()
        epoch_loss = total / n
        losses.append(epoch_loss)
        LOG.debug(f"epoch {epoch}: loss={epoch_loss:.6f}")
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_state = copy.deepcopy(model.state_dict())
        if _plateaued(losses, schedule.plateau_window,
                      schedule.plateau_tolerance):
            LOG.debug(f"Loss plateaued after {epoch + 1} epochs")
            break

    model.load_state_dict(best_state)
    model.eval()
    LOG.info(f"Trained {len(losses)} epochs on {n} samples, best loss "
             f"{best_loss:.4f}")
    return FitResult(model, losses, best_loss, len(losses))


def expand_training_set(training_set: TrainingSet, model: TiedScaleNet,
                        lesions: Iterable[LesionData], k: int,
                        crf_cfg: Optional[CrfConfig] = None,
                        input_px: Optional[int] = None) -> List[TrainingSample]:
    """
    Label the slices k above and below every RECIST slice with the refined
    prediction of `model` and add them to `training_set`
    @return: samples added, in lesion order
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    crf_cfg = crf_cfg or CrfConfig()
    pending: List[Tuple[LesionData, int, np.ndarray]] = []
    probs: List[np.ndarray] = []
    for lesion in lesions:
        for direction in (-1, 1):
            offset = direction * k
            if offset not in lesion.axial_range or \
                    (lesion.lesion_id, offset) in training_set or \
                    (lesion.lesion_id, direction) in training_set.terminated:
                continue
            try:
                image = lesion.image_at(offset)
                probs.append(predict_probability(model, image, input_px))
            except Exception:
                LOG.exception(f"Prediction failed for {lesion.lesion_id} "
                              f"offset {offset}")
                continue
            pending.append((lesion, offset, image))

    refined = refine_many(probs, [image for _, _, image in pending], crf_cfg)
    added = []
    for (lesion, offset, image), prob in zip(pending, refined):
        label = binarize(prob, crf_cfg.threshold)
        if not label.any():
            direction = 1 if offset > 0 else -1
            training_set.terminated.add((lesion.lesion_id, direction))
            LOG.warning(f"Empty prediction for {lesion.lesion_id} at offset "
                        f"{offset}, propagation stops in this direction")
            continue
        sample = TrainingSample(lesion.lesion_id, offset, image, label,
                                Provenance.PROPAGATED, k)
        if training_set.add(sample):
            added.append(sample)
    LOG.info(f"Iteration {k}: added {len(added)} samples "
             f"(total {len(training_set)})")
    return added


@dataclass
class IterationRecord:
    iteration: int
    samples_added: int
    total_samples: int
    mean_loss: float
    wall_time_s: float


@dataclass
class ProgressiveResult:
    model: TiedScaleNet
    training_set: TrainingSet
    report: List[IterationRecord] = field(default_factory=list)
    per_offset: List[dict] = field(default_factory=list)

    def report_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.report],
                            columns=RUN_REPORT_COLUMNS)

    def per_offset_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.per_offset, columns=PER_OFFSET_COLUMNS)


def write_run_report(result: ProgressiveResult, output_dir: str) -> str:
    os.makedirs(output_dir, exist_ok=True)
    path = join(output_dir, "run_report.csv")
    result.report_frame().to_csv(path, index=False)
    LOG.info(f"Wrote {path}")
    return path


def write_per_offset_dsc(result: ProgressiveResult, output_dir: str) -> str:
    os.makedirs(output_dir, exist_ok=True)
    path = join(output_dir, "per_offset_dsc.csv")
    result.per_offset_frame().to_csv(path, index=False)
    LOG.info(f"Wrote {path}")
    return path


def on_started():
    LOG.info("Progressive training started.")


def on_ready():
    LOG.info("Progressive training finished.")


def on_error(e="Unknown"):
    LOG.error(f"Progressive training failed ({e}).")


def on_stopping():
    LOG.info("Progressive training stopping...")


class ProgressiveTrainer:
    """
    Drives the progressive loop for one configuration. Lifecycle is
    reported through `status`: started when training begins, ready once the
    final model is available, error on failure, stopping when `stop()` ends
    the run early.
    """

    def __init__(self, config: Mapping[str, Any],
                 output_dir: Optional[str] = None,
                 on_started=on_started, on_ready=on_ready,
                 on_error=on_error, on_stopping=on_stopping):
        callbacks = StatusCallbackMap(on_started=on_started,
                                      on_ready=on_ready,
                                      on_error=on_error,
                                      on_stopping=on_stopping)
        self.status = ProcessStatus("plseg.trainer", callback_map=callbacks)
        self.config = config
        self.output_dir = output_dir
        self.seed = int(config.get("seed", 0))
        self.schedule = TrainSchedule.from_config(config.get("training", {}))
        self.net_config = NetConfig.from_config(config.get("network", {}))
        self.loss_weights = LossWeights.from_config(config.get("loss", {}))
        self.eps = float(config.get("loss", {}).get("eps", DICE_EPS))
        self.crf_config = CrfConfig.from_config(config.get("crf", {}))
        self.input_px = config.get("data", {}).get("input_px")
        self.record_wall_time = bool(
            config.get("report", {}).get("record_wall_time", True))
        self._stop_requested = False
        self.status.set_alive()

    def stop(self):
        """
        End the run after the current iteration
        """
        self._stop_requested = True

    def _fit(self, training_set: TrainingSet, model: TiedScaleNet,
             iteration: int) -> FitResult:
        return train_until_converged(training_set, model, self.schedule,
                                     self.loss_weights,
                                     seed=self.seed + iteration,
                                     eps=self.eps, input_px=self.input_px)

    def _checkpoint(self, model: TiedScaleNet, iteration: int):
        if self.output_dir:
            save_checkpoint(model, join(self.output_dir, "checkpoints",
                                        f"iter_{iteration:02d}"),
                            iteration=iteration, seed=self.seed)

    def _record(self, result: ProgressiveResult, iteration: int, added: int,
                loss: float, started: float):
        elapsed = time.monotonic() - started if self.record_wall_time else 0.0
        record = IterationRecord(iteration, added, len(result.training_set),
                                 loss, round(elapsed, 3))
        result.report.append(record)
        LOG.info(f"iteration {iteration}: +{added} samples, total "
                 f"{record.total_samples}, loss {loss:.4f}")

    @staticmethod
    def _score_offsets(result: ProgressiveResult, lesions: Dict[str, LesionData],
                       samples: List[TrainingSample], iteration: int):
        for sample in samples:
            gt = lesions[sample.lesion_id].gt_at(sample.offset)
            if gt is None:
                continue
            result.per_offset.append({"iteration": iteration,
                                      "lesion_id": sample.lesion_id,
                                      "offset": sample.offset,
                                      "dsc": dsc(sample.label, gt)})

    def run(self, lesions: List[LesionData],
            model: Optional[TiedScaleNet] = None) -> ProgressiveResult:
        """
        Train on the RECIST slices, then expand and retrain until K_max or
        until an iteration labels no new slices
        @param lesions: prepared lesions
        @param model: optional starting network, built from the seed otherwise
        """
        if not lesions:
            raise ValueError("No lesions to train on")
        self.status.set_started()
        try:
            result = self._run(lesions, model)
        except Exception as e:
            LOG.exception("Progressive training failed")
            self.status.set_error(str(e))
            raise
        if self.output_dir:
            write_run_report(result, self.output_dir)
            write_per_offset_dsc(result, self.output_dir)
        if self.status.state != ProcessState.STOPPING:
            self.status.set_ready()
        return result

    def _run(self, lesions: List[LesionData],
             model: Optional[TiedScaleNet]) -> ProgressiveResult:
        by_id = {lesion.lesion_id: lesion for lesion in lesions}
        model = model or build_model(self.net_config, self.seed)
        training_set = recist_training_set(lesions)
        result = ProgressiveResult(model, training_set)

        started = time.monotonic()
        fit = self._fit(training_set, model, 0)
        self._checkpoint(model, 0)
        self._record(result, 0, len(training_set), fit.best_loss, started)

        for k in range(1, self.schedule.k_max + 1):
            if self._stop_requested:
                self.status.set_stopping()
                break
            started = time.monotonic()
            added = expand_training_set(training_set, model, lesions, k,
                                        self.crf_config, self.input_px)
            self._score_offsets(result, by_id, added, k)
            if not added:
                # nothing new to learn from, the model stays as it is
                self._record(result, k, 0, fit.best_loss, started)
                LOG.info(f"No samples added at iteration {k}, stopping")
                break
            fit = self._fit(training_set, model, k)
            self._checkpoint(model, k)
            self._record(result, k, len(added), fit.best_loss, started)
        return result


def run_progressive(lesions: List[LesionData], config: Mapping[str, Any],
                    output_dir: Optional[str] = None) -> ProgressiveResult:
    """
    Functional entry point for `ProgressiveTrainer`
    """
    return ProgressiveTrainer(config, output_dir).run(lesions)
