"""Per-stream quality evaluators and identity classifiers.

Each resolution stream (HR / LR) owns one evaluator and one classifier;
real and synthetic vectors of a resolution share that resolution's heads.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeatureMap
from .errors import ConfigurationError

NEGATIVE_SLOPE = 0.05


def gap_flatten(fmap: FeatureMap) -> torch.Tensor:
    """Global average pool + flatten: (N, C, H, W) -> (N, C) embedding."""
    return fmap.values.mean(dim=(2, 3))


class QualityEvaluator(nn.Module):
    """Two-layer perceptron D -> D/4 -> 1 ending in a sigmoid.

    The sigmoid keeps every quality weight strictly inside (0, 1) so
    weighted-loss denominators never vanish.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, max(1, dim // 4))
        self.fc2 = nn.Linear(max(1, dim // 4), 1)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.fc1(v), NEGATIVE_SLOPE)
        return torch.sigmoid(self.fc2(h)).squeeze(-1)


class IdentityClassifier(nn.Module):
    """Single linear map D -> number of training identities."""

    def __init__(self, dim: int, n_identities: int):
        super().__init__()
        if n_identities < 2:
            raise ConfigurationError("identity vocabulary must contain >= 2 identities")
        self.fc = nn.Linear(dim, n_identities)

    @property
    def n_identities(self) -> int:
        return self.fc.out_features

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.fc(v)


class StreamHeads(nn.Module):
    """Bundles the HR and LR evaluators and classifiers."""

    def __init__(self, dim: int, n_identities: int, with_evaluators: bool = True):
        super().__init__()
        self.classifier_hr = IdentityClassifier(dim, n_identities)
        self.classifier_lr = IdentityClassifier(dim, n_identities)
        self.evaluator_hr = QualityEvaluator(dim) if with_evaluators else None
        self.evaluator_lr = QualityEvaluator(dim) if with_evaluators else None

    def classify(self, v: torch.Tensor, stream: str) -> torch.Tensor:
        return {"hr": self.classifier_hr, "lr": self.classifier_lr}[stream](v)

    def evaluate_quality(self, v: torch.Tensor, stream: str) -> torch.Tensor:
        evaluator = {"hr": self.evaluator_hr, "lr": self.evaluator_lr}[stream]
        if evaluator is None:
            raise ConfigurationError("this variant was built without quality evaluators")
        return evaluator(v)
