"""Feature-space resolution transform: maps LR-stream maps to HR-like maps.

Built from stacked distillation blocks (channel split -> refine -> concat)
with a pooled sigmoid gate, kept narrow internally so the whole module
stays within a small fraction of the backbone's parameter budget.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeatureMap, StreamTag
from .errors import ContractError, ShapeError

NEGATIVE_SLOPE = 0.05


def channel_split(x: torch.Tensor) -> tuple:
    """Split a (N, C, H, W) tensor into equal channel halves, order-preserving."""
    c = x.shape[1]
    if c % 2 != 0:
        raise ShapeError(f"channel_split requires an even channel count, got {c}")
    return x[:, : c // 2], x[:, c // 2:]


@dataclass
class TransformConfig:
    channels: int                      # must match the backbone feature channels
    inner_channels: Optional[int] = None
    num_blocks: int = 3
    num_inner_steps: int = 3
    attention_reduction: int = 4

    def __post_init__(self):
        if self.inner_channels is None:
            # keep the module well under 10% of the backbone parameter count
            self.inner_channels = max(8, self.channels // (16 if self.channels <= 512 else 32))
        if self.inner_channels % (2 ** self.num_inner_steps) != 0:
            raise ShapeError(
                f"inner_channels {self.inner_channels} must be divisible by "
                f"2^{self.num_inner_steps} for the repeated channel split"
            )


class DistillBlock(nn.Module):
    """Residual block: repeated {conv3x3 + LReLU -> channel split}, concat of
    the distilled halves, 1x1 fuse (no activation), pooled sigmoid gate,
    plus the block input."""

    def __init__(self, channels: int, num_steps: int = 3, attention_reduction: int = 4):
        super().__init__()
        if channels % (2 ** num_steps) != 0:
            raise ShapeError(f"{channels} channels cannot be split {num_steps} times")
        self.convs = nn.ModuleList()
        w = channels
        for _ in range(num_steps):
            self.convs.append(nn.Conv2d(w, w, 3, padding=1))
            w //= 2
        self.fuse = nn.Conv2d(channels, channels, 1)
        hidden = max(1, channels // attention_reduction)
        self.gate_down = nn.Conv2d(channels, hidden, 1)
        self.gate_up = nn.Conv2d(hidden, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        parts = []
        cur = x
        for conv in self.convs:
            y = F.leaky_relu(conv(cur), NEGATIVE_SLOPE)
            distilled, cur = channel_split(y)
            parts.append(distilled)
        parts.append(cur)
        fused = self.fuse(torch.cat(parts, dim=1))
        pooled = fused.mean(dim=(2, 3), keepdim=True)
        gate = torch.sigmoid(self.gate_up(F.leaky_relu(self.gate_down(pooled), NEGATIVE_SLOPE)))
        return fused * gate + x


class FeatureTransformer(nn.Module):
    """LR-feature to HR-feature mapper, shape preserving.

    Wiring: 3x3 head conv (projects to the narrow internal width) ->
    stacked distillation blocks -> concat of block outputs -> 1x1 fuse +
    LReLU -> 3x3 tail conv -> add head output -> 1x1 projection back to
    the backbone channel width.
    """

    def __init__(self, config: TransformConfig):
        super().__init__()
        self.config = config
        c, w = config.channels, config.inner_channels
        self.head = nn.Conv2d(c, w, 3, padding=1)
        self.blocks = nn.ModuleList(
            DistillBlock(w, config.num_inner_steps, config.attention_reduction)
            for _ in range(config.num_blocks)
        )
        self.fuse = nn.Conv2d(w * config.num_blocks, w, 1)
        self.tail = nn.Conv2d(w, w, 3, padding=1)
        self.out_proj = nn.Conv2d(w, c, 1)

    def forward(self, fmap: FeatureMap) -> FeatureMap:
        if fmap.tag not in (StreamTag.F_LR, StreamTag.F_SYNTH_LR):
            raise ContractError(
                f"transform expects an LR-stream feature map, got tag {fmap.tag.value}"
            )
        if fmap.channels != self.config.channels:
            raise ShapeError(
                f"expected {self.config.channels} channels, got {fmap.channels}"
            )
        h = F.leaky_relu(self.head(fmap.values), NEGATIVE_SLOPE)
        outs = []
        cur = h
        for block in self.blocks:
            cur = block(cur)
            outs.append(cur)
        body = self.tail(F.leaky_relu(self.fuse(torch.cat(outs, dim=1)), NEGATIVE_SLOPE))
        return FeatureMap(self.out_proj(body + h), StreamTag.F_SYNTH_HR)


def transform_loss(target: torch.Tensor, transformed: torch.Tensor) -> torch.Tensor:
    """Mean absolute elementwise difference between HR and transformed maps."""
    if target.shape != transformed.shape:
        raise ShapeError(
            f"shape mismatch: target {tuple(target.shape)} vs transformed {tuple(transformed.shape)}"
        )
    return (target - transformed).abs().mean()
