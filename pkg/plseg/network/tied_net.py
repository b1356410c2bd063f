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
from dataclasses import asdict, dataclass, field
from os.path import abspath, dirname
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from ovos_utils.log import LOG

from plseg.config import ConfigError
from plseg.network.kernels import CORE_KERNEL_SIZE, branch_kernel_sizes, \
    scale_invariant_fuse, transform_kernel

MIN_INPUT_PX = 32

LEVELS = ("level1", "level2", "level3")
COMBINED = "combined"
HEAD_LEVELS = LEVELS + (COMBINED,)


class NetworkInputError(ValueError):
    """Input crop the network cannot process"""


@dataclass
class NetConfig:
    n_branches: int = 3
    scale_coefficient: int = 2
    boundary_aware: bool = True
    combined_boundary_head: bool = True
    boundary_thickness_px: int = 1
    stem_width: int = 16
    block_widths: Tuple[int, int, int] = (16, 32, 64)
    head_width: int = 16

    def __post_init__(self):
        self.block_widths = tuple(int(w) for w in self.block_widths)
        if self.n_branches < 1:
            raise ConfigError(f"n_branches must be >= 1, got "
                              f"{self.n_branches}")
        if self.scale_coefficient < 1:
            raise ConfigError(f"scale_coefficient must be >= 1, got "
                              f"{self.scale_coefficient}")
        if self.boundary_thickness_px < 1:
            raise ConfigError(f"boundary_thickness_px must be >= 1, got "
                              f"{self.boundary_thickness_px}")
        if len(self.block_widths) != len(LEVELS):
            raise ConfigError(f"Exactly {len(LEVELS)} backbone blocks are "
                              f"supported, got {self.block_widths}")
        if min(self.block_widths + (self.stem_width, self.head_width)) < 1:
            raise ConfigError("Channel widths must be positive")

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> "NetConfig":
        return cls(n_branches=int(section.get("n_branches", 3)),
                   scale_coefficient=int(section.get("scale_coefficient", 2)),
                   boundary_aware=bool(section.get("boundary_aware", True)),
                   combined_boundary_head=bool(
                       section.get("combined_boundary_head", True)),
                   boundary_thickness_px=int(
                       section.get("boundary_thickness_px", 1)),
                   stem_width=int(section.get("stem_width", 16)),
                   block_widths=tuple(section.get("block_widths",
                                                  (16, 32, 64))),
                   head_width=int(section.get("head_width", 16)))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["block_widths"] = list(self.block_widths)
        return data

    @property
    def kernel_sizes(self) -> List[int]:
        return branch_kernel_sizes(self.n_branches, self.scale_coefficient)

    @property
    def boundary_levels(self) -> Tuple[str, ...]:
        if not self.boundary_aware:
            return tuple()
        if self.combined_boundary_head:
            return HEAD_LEVELS
        return LEVELS


@dataclass
class NetworkOutputs:
    """
    Probability maps (N, 1, H, W), aligned with the input crop
    """
    region_maps: Dict[str, torch.Tensor]
    boundary_maps: Dict[str, torch.Tensor]
    final_map: torch.Tensor
    # per-branch level features before fusion, kept for inspection
    branch_levels: List[List[torch.Tensor]] = field(default_factory=list)

    @property
    def all_maps(self) -> List[torch.Tensor]:
        return list(self.region_maps.values()) + \
            list(self.boundary_maps.values()) + [self.final_map]


def _he_normal(shape: Tuple[int, ...], fan_in: int) -> torch.Tensor:
    return torch.randn(shape) * math.sqrt(2.0 / fan_in)


class TiedConv(nn.Module):
    """
    Core 3x3 convolution whose larger-kernel variants are derived on the fly
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        fan_in = in_channels * CORE_KERNEL_SIZE ** 2
        self.weight = nn.Parameter(_he_normal(
            (out_channels, in_channels, CORE_KERNEL_SIZE, CORE_KERNEL_SIZE),
            fan_in))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def kernel(self, size: int) -> torch.Tensor:
        return transform_kernel(self.weight, size)

    def forward(self, x: torch.Tensor, size: int = CORE_KERNEL_SIZE):
        return F.conv2d(x, self.kernel(size), self.bias, padding=size // 2)


def _pointwise(in_channels: int, out_channels: int) -> nn.Conv2d:
    conv = nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=True)
    with torch.no_grad():
        conv.weight.copy_(_he_normal(tuple(conv.weight.shape), in_channels))
        conv.bias.zero_()
    return conv


class SupervisedHead(nn.Module):
    """
    1x1 hidden projection (the penultimate features) + 1x1 sigmoid output
    """

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.hidden = _pointwise(in_channels, width)
        self.out = _pointwise(width, 1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        hidden = F.relu(self.hidden(x))
        return hidden, torch.sigmoid(self.out(hidden))


class TiedScaleNet(nn.Module):
    """
    Scale-invariant, boundary-aware segmentation network.

    A shared stem feeds `n_branches` copies of a three-block VGG-style
    backbone. Branch b convolves with kernels transformed from the core 3x3
    kernels, so all branches share one set of weights. Same-level outputs are
    projected, resampled to the input size and max-fused across branches; the
    fused levels drive region and boundary heads (one per level plus their
    combination) and a final head over all hidden head features.
    """

    def __init__(self, config: Optional[NetConfig] = None):
        super().__init__()
        self.config = config or NetConfig()
        cfg = self.config
        self.stem = TiedConv(1, cfg.stem_width)
        blocks = []
        in_channels = cfg.stem_width
        for width in cfg.block_widths:
            blocks.append(nn.ModuleList([TiedConv(in_channels, width),
                                         TiedConv(width, width)]))
            in_channels = width
        self.blocks = nn.ModuleList(blocks)
        self.level_proj = nn.ModuleList([_pointwise(w, cfg.head_width)
                                         for w in cfg.block_widths])

        heads = {level: SupervisedHead(cfg.head_width, cfg.head_width)
                 for level in LEVELS}
        heads[COMBINED] = SupervisedHead(len(LEVELS) * cfg.head_width,
                                         cfg.head_width)
        self.region_heads = nn.ModuleDict(heads)
        boundary = {}
        for level in cfg.boundary_levels:
            in_channels = cfg.head_width if level != COMBINED else \
                len(LEVELS) * cfg.head_width
            boundary[level] = SupervisedHead(in_channels, cfg.head_width)
        self.boundary_heads = nn.ModuleDict(boundary)
        n_hidden = len(self.region_heads) + len(self.boundary_heads)
        self.final_head = _pointwise(n_hidden * cfg.head_width, 1)

    def _branch(self, x: torch.Tensor, size: int,
                out_hw: Tuple[int, int]) -> List[torch.Tensor]:
        levels = []
        for index, (conv_a, conv_b) in enumerate(self.blocks):
            if index > 0:
                x = F.max_pool2d(x, kernel_size=2)
            x = F.relu(conv_a(x, size))
            x = F.relu(conv_b(x, size))
            projected = self.level_proj[index](x)
            levels.append(F.interpolate(projected, size=out_hw,
                                        mode="bilinear",
                                        align_corners=False))
        return levels

    def forward_branches(self, x: torch.Tensor) -> List[List[torch.Tensor]]:
        """
        Per-branch level features at input resolution, before fusion
        """
        x = _as_batch(x, self.stem.weight.dtype)
        stem = F.relu(self.stem(x))
        out_hw = tuple(x.shape[-2:])
        return [self._branch(stem, size, out_hw)
                for size in self.config.kernel_sizes]

    def forward(self, x: torch.Tensor) -> NetworkOutputs:
        branches = self.forward_branches(x)
        fused = [scale_invariant_fuse([b[level] for b in branches])
                 for level in range(len(LEVELS))]
        combined = torch.cat(fused, dim=1)
        inputs = dict(zip(LEVELS, fused))
        inputs[COMBINED] = combined

        hidden, region, boundary = [], {}, {}
        for level, head in self.region_heads.items():
            h, region[level] = head(inputs[level])
            hidden.append(h)
        for level, head in self.boundary_heads.items():
            h, boundary[level] = head(inputs[level])
            hidden.append(h)
        final = torch.sigmoid(self.final_head(torch.cat(hidden, dim=1)))
        return NetworkOutputs(region_maps=region, boundary_maps=boundary,
                              final_map=final, branch_levels=branches)


def _as_batch(x, dtype) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=dtype)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise NetworkInputError(f"Expected (H, W), (N, H, W) or "
                                f"(N, 1, H, W) input, got {tuple(x.shape)}")
    if min(x.shape[-2:]) < MIN_INPUT_PX:
        raise NetworkInputError(f"Input {tuple(x.shape[-2:])} below the "
                                f"minimum {MIN_INPUT_PX}x{MIN_INPUT_PX}")
    return x


def build_model(config: Optional[NetConfig] = None, seed: int = 0,
                dtype=torch.float32) -> TiedScaleNet:
    """
    Create a randomly initialised network; `seed` fully determines weights
    """
    torch.manual_seed(seed)
    model = TiedScaleNet(config).to(dtype)
    LOG.debug(f"Built TiedScaleNet: kernel sizes {model.config.kernel_sizes}, "
              f"{count_trainable(model)} trainable parameters")
    return model


def forward(crop, model: TiedScaleNet) -> NetworkOutputs:
    """
    Functional entry point: run `model` on a normalized crop
    """
    return model(crop)


def enumerate_trainable(model: nn.Module) -> List[Tuple[str, Tuple[int, ...]]]:
    """
    Names and shapes of all trainable tensors
    """
    return [(name, tuple(p.shape)) for name, p in model.named_parameters()
            if p.requires_grad]


def count_trainable(model: nn.Module) -> int:
    return int(sum(p.numel() for p in model.parameters() if p.requires_grad))


def resize_stack(stack: np.ndarray, size: int,
                 mode: str = "bilinear") -> np.ndarray:
    """
    Resample a stack (N, H, W) to (N, size, size); "nearest" for labels
    """
    stack = np.asarray(stack)
    if stack.shape[-2:] == (size, size):
        return stack
    tensor = torch.as_tensor(stack.astype(np.float64))[:, None]
    kwargs = {"align_corners": False} if mode == "bilinear" else {}
    resized = F.interpolate(tensor, size=(size, size), mode=mode, **kwargs)
    resized = resized[:, 0].numpy()
    if stack.dtype == bool:
        return resized >= 0.5
    return resized.astype(stack.dtype)


@torch.no_grad()
def predict_probability(model: TiedScaleNet, crops: np.ndarray,
                        input_px: Optional[int] = None) -> np.ndarray:
    """
    Final-map probabilities for one crop (H, W) or a stack (N, H, W)
    @param model: network
    @param crops: normalized crops
    @param input_px: network input edge; crops are resampled to it and the
        probabilities back to the crop edge
    """
    model.eval()
    crops = np.asarray(crops)
    single = crops.ndim == 2
    stack = crops[None] if single else crops
    side = stack.shape[-1]
    if input_px and input_px != side:
        stack = resize_stack(stack, input_px)
    outputs = model(stack)
    probs = outputs.final_map[:, 0].detach().cpu().numpy().astype(np.float64)
    if input_px and input_px != side:
        probs = np.clip(resize_stack(probs, side), 0.0, 1.0)
    return probs[0] if single else probs


# checkpoints: <prefix>.npz holds state_dict arrays, <prefix>.json the manifest

def _prefix(path: str) -> str:
    for ext in (".npz", ".json"):
        if path.endswith(ext):
            return path[:-len(ext)]
    return path


def save_checkpoint(model: TiedScaleNet, path: str, iteration: int = 0,
                    seed: int = 0, extra: Optional[dict] = None) -> str:
    """
    Write `<prefix>.npz` and `<prefix>.json`
    @return: checkpoint prefix
    """
    prefix = _prefix(path)
    os.makedirs(dirname(abspath(prefix)), exist_ok=True)
    arrays = {name: tensor.detach().cpu().numpy()
              for name, tensor in model.state_dict().items()}
    np.savez(prefix + ".npz", **arrays)
    manifest = {"config": model.config.to_dict(),
                "iteration": int(iteration),
                "seed": int(seed),
                "dtype": str(model.stem.weight.dtype).replace("torch.", ""),
                "keys": sorted(arrays)}
    if extra:
        manifest.update(extra)
    with open(prefix + ".json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    LOG.info(f"Saved checkpoint {prefix} (iteration {iteration})")
    return prefix


def load_checkpoint(path: str) -> Tuple[TiedScaleNet, dict]:
    """
    Rebuild a model from `save_checkpoint` output
    @return: model and its manifest
    """
    prefix = _prefix(path)
    with open(prefix + ".json") as f:
        manifest = json.load(f)
    config = NetConfig.from_config(manifest["config"])
    dtype = getattr(torch, manifest.get("dtype", "float32"))
    model = TiedScaleNet(config).to(dtype)
    with np.load(prefix + ".npz") as arrays:
        state = {name: torch.from_numpy(arrays[name]) for name in arrays.files}
    model.load_state_dict(state)
    LOG.debug(f"Loaded checkpoint {prefix}")
    return model, manifest


def import_backbone_weights(model: TiedScaleNet,
                            arrays: Mapping[str, np.ndarray]) -> List[str]:
    """
    Copy externally trained weights whose names and shapes match
    @param model: target network
    @param arrays: name -> array, names as in `model.state_dict()`
    @return: names that were imported
    """
    state = model.state_dict()
    imported = []
    for name, value in arrays.items():
        if name not in state:
            LOG.warning(f"Skipping unknown weight: {name}")
            continue
        value = torch.as_tensor(np.asarray(value), dtype=state[name].dtype)
        if tuple(value.shape) != tuple(state[name].shape):
            LOG.warning(f"Skipping {name}: shape {tuple(value.shape)} != "
                        f"{tuple(state[name].shape)}")
            continue
        state[name] = value
        imported.append(name)
    model.load_state_dict(state)
    LOG.info(f"Imported {len(imported)} of {len(arrays)} weights")
    return imported
