"""Variant assembly and checkpointing.

The ablation ladder:
  baseline - single-stream backbone, plain classification + triplet losses
  ftwa_b   - two-stream backbone, plain losses, no transform / no weighting
  ftwa_r   - adds the feature transform (all loss weights fixed to 1)
  ftwa     - full model with quality-weighted losses
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .backbone import BackboneConfig, TwoStreamBackbone
from .errors import CheckpointError, ConfigurationError
from .heads import StreamHeads
from .transform import FeatureTransformer, TransformConfig

VARIANTS = ("baseline", "ftwa_b", "ftwa_r", "ftwa")


@dataclass
class ModelConfig:
    variant: str = "ftwa"
    backbone: str = "tiny"
    n_identities: int = 2
    last_stage_stride: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def has_transform(self) -> bool:
        return self.variant in ("ftwa_r", "ftwa")

    @property
    def has_evaluators(self) -> bool:
        return self.variant == "ftwa"

    @property
    def two_stream(self) -> bool:
        return self.variant != "baseline"


class ReIDModel(nn.Module):
    """Backbone + optional feature transform + per-stream heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = TwoStreamBackbone(BackboneConfig(
            variant=config.backbone,
            last_stage_stride=config.last_stage_stride,
            two_stream=config.two_stream,
        ))
        dim = self.backbone.embedding_dim
        self.transform = (FeatureTransformer(TransformConfig(channels=dim))
                          if config.has_transform else None)
        self.heads = StreamHeads(dim, config.n_identities,
                                 with_evaluators=config.has_evaluators)

    @property
    def embedding_dim(self) -> int:
        return self.backbone.embedding_dim


def config_hash(config: ModelConfig) -> str:
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(model: ReIDModel, path, extra: Optional[dict] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": dataclasses.asdict(model.config),
        "config_hash": config_hash(model.config),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> tuple:
    """Rebuild a model from disk; returns (model, extra).

    If ``expected_config`` is given, a hash mismatch is rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    try:
        config = ModelConfig(**payload["config"])
        stored_hash = payload["config_hash"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if config_hash(config) != stored_hash:
        raise CheckpointError("checkpoint config hash does not match its config")
    if expected_config is not None and config_hash(expected_config) != stored_hash:
        raise CheckpointError(
            f"checkpoint config {payload['config']} does not match the expected config"
        )
    model = ReIDModel(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
