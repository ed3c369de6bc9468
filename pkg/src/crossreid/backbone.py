"""Two-stream encoder: per-resolution shallow stems with a shared deep trunk.

The HR and LR streams own a stem convolution plus the first residual stage
(same structure, independent parameters); the remaining stages are shared
and produce the matching feature maps for both streams. The last stage
stride defaults to 1 so the final maps keep 2x spatial resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import torch
import torch.nn as nn

from .errors import ConfigurationError, ShapeError


class StreamTag(str, Enum):
    F_HR = "F_HR"
    F_LR = "F_LR"
    F_SYNTH_LR = "F_SYNTH_LR"
    F_SYNTH_HR = "F_SYNTH_HR"


@dataclass
class FeatureMap:
    """A batched (N, C, H, W) feature tensor with its stream provenance."""

    values: torch.Tensor
    tag: StreamTag

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ShapeError(f"FeatureMap expects (N, C, H, W), got {tuple(self.values.shape)}")

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass
class BackboneConfig:
    variant: str = "tiny"  # "tiny" | "full_scale"
    stage_channels: tuple = (32, 64, 128, 256)
    last_stage_stride: int = 1
    two_stream: bool = True

    def __post_init__(self):
        if self.variant not in ("tiny", "full_scale"):
            raise ConfigurationError(f"unknown backbone variant: {self.variant}")
        if self.last_stage_stride not in (1, 2):
            raise ConfigurationError("last_stage_stride must be 1 or 2")
        if self.variant == "full_scale":
            self.stage_channels = (256, 512, 1024, 2048)

    @property
    def embedding_dim(self) -> int:
        return self.stage_channels[-1]


def _norm(channels: int) -> nn.GroupNorm:
    # batch-independent normalization: desk-scale batches are far too small
    # for stable batch statistics, and train/eval behavior must agree
    return nn.GroupNorm(min(8, channels), channels)


class BasicBlock(nn.Module):
    """Two 3x3 convs with group norm and a projection shortcut when needed."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = _norm(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                _norm(out_ch),
            )
        nn.init.zeros_(self.bn2.weight)  # identity-friendly residual init

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, planes: int, stride: int = 1):
        super().__init__()
        out_ch = planes * self.expansion
        self.conv1 = nn.Conv2d(in_ch, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        nn.init.zeros_(self.bn3.weight)

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


def _init_conv(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")


def _tiny_stem(channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(3, channels, 3, padding=1, bias=False),
        _norm(channels),
        nn.ReLU(inplace=True),
    )


def _full_stem() -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
        nn.BatchNorm2d(64),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(3, stride=2, padding=1),
    )


def _bottleneck_stage(in_ch: int, planes: int, blocks: int, stride: int) -> nn.Sequential:
    layers = [Bottleneck(in_ch, planes, stride)]
    for _ in range(blocks - 1):
        layers.append(Bottleneck(planes * Bottleneck.expansion, planes))
    return nn.Sequential(*layers)


class TwoStreamBackbone(nn.Module):
    """Per-stream shallow encoders feeding a shared deep ReID encoder.

    ``stem_hr``/``stage1_hr`` and ``stem_lr``/``stage1_lr`` are structurally
    identical but share no parameters; ``shared`` (stages 2-4) processes
    both streams. With ``two_stream=False`` only the HR-side shallow
    encoder exists (single-stream baseline).
    """

    def __init__(self, config: Optional[BackboneConfig] = None):
        super().__init__()
        self.config = config or BackboneConfig()
        c = self.config.stage_channels
        s_last = self.config.last_stage_stride

        if self.config.variant == "tiny":
            def shallow():
                return nn.Sequential(_tiny_stem(c[0]), BasicBlock(c[0], c[0], stride=2))

            shared = nn.Sequential(
                BasicBlock(c[0], c[1], stride=2),
                BasicBlock(c[1], c[2], stride=2),
                BasicBlock(c[2], c[3], stride=s_last),
            )
        else:
            layout = (3, 4, 6, 3)

            def shallow():
                return nn.Sequential(_full_stem(), _bottleneck_stage(64, 64, layout[0], 1))

            shared = nn.Sequential(
                _bottleneck_stage(256, 128, layout[1], 2),
                _bottleneck_stage(512, 256, layout[2], 2),
                _bottleneck_stage(1024, 512, layout[3], s_last),
            )

        self.shallow_hr = shallow()
        self.shallow_lr = shallow() if self.config.two_stream else None
        self.shared = shared
        _init_conv(self)

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def stream_parameters(self, which: str):
        """Named parameters of one component: 'hr', 'lr' or 'shared'."""
        mod = {"hr": self.shallow_hr, "lr": self.shallow_lr, "shared": self.shared}[which]
        if mod is None:
            return []
        return list(mod.parameters())

    def forward(self, images: torch.Tensor, stream: str,
                synthetic: bool = False) -> FeatureMap:
        """Encode a batch through the selected stream ('hr' or 'lr').

        ``synthetic`` marks LR inputs that were produced by degradation so
        the output carries the matching stream tag.
        """
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) input, got {tuple(images.shape)}")
        if stream == "hr":
            shallow, tag = self.shallow_hr, StreamTag.F_HR
        elif stream == "lr":
            if self.shallow_lr is None:
                raise ConfigurationError("single-stream backbone has no LR stream")
            shallow = self.shallow_lr
            tag = StreamTag.F_SYNTH_LR if synthetic else StreamTag.F_LR
        else:
            raise ConfigurationError(f"stream must be 'hr' or 'lr', got {stream!r}")
        return FeatureMap(self.shared(shallow(images)), tag)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
