"""Finite-difference verification of every training-loss gradient.

Each check builds a 64-bit toy problem (8-dim embeddings, 8-channel maps,
4 identities), computes analytic gradients with autograd, and compares them
against central finite differences over all inputs and parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .backbone import FeatureMap, StreamTag
from .errors import ConfigurationError
from .heads import IdentityClassifier, QualityEvaluator
from .losses import (
    LossWeights,
    batch_all_triplet_loss,
    cls_loss,
    swa_cls_loss,
    swa_triplet_loss,
    total_loss,
)
from .transform import FeatureTransformer, TransformConfig, transform_loss

LOSS_NAMES = ("transform", "cls", "tri", "swa_cls", "swa_tri", "total")
TOLERANCE = 1e-4


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_checked: int
    passed: bool


def max_relative_error(fn, tensors: Sequence[torch.Tensor], eps: float = 1e-5,
                       grad_perturbation: float = 0.0,
                       denom_floor: float = 1e-6) -> tuple:
    """Compare autograd gradients of ``fn()`` against central differences.

    ``denom_floor`` keeps coordinates whose true gradient is at the level
    of finite-difference round-off from dominating the relative error.
    ``grad_perturbation`` shifts the analytic gradients and exists only as
    a negative control for the harness itself.
    """
    loss = fn()
    grads = torch.autograd.grad(loss, tensors)
    worst, count = 0.0, 0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            flat = t.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                analytic = gflat[i].item() + grad_perturbation
                denom = max(abs(numeric), abs(analytic), denom_floor)
                worst = max(worst, abs(numeric - analytic) / denom)
                count += 1
    return worst, count


def _toy_vectors(gen, n=8, dim=8):
    return torch.randn(n, dim, generator=gen, dtype=torch.float64)


def _toy_labels(n=8, n_ids=4):
    return torch.arange(n, dtype=torch.long) % n_ids


class _Toy:
    """Shared 64-bit fixtures for the loss checks."""

    def __init__(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        self.dim, self.n_ids = 8, 4
        self.labels = _toy_labels()
        self.v = {k: _toy_vectors(gen).requires_grad_() for k in ("hr", "shr", "lr", "slr")}
        self.logits = torch.randn(8, self.n_ids, generator=gen,
                                  dtype=torch.float64).requires_grad_()
        self.eval_hr = QualityEvaluator(self.dim).double()
        self.eval_lr = QualityEvaluator(self.dim).double()
        self.cls_hr = IdentityClassifier(self.dim, self.n_ids).double()
        self.cls_lr = IdentityClassifier(self.dim, self.n_ids).double()
        cfg = TransformConfig(channels=8, inner_channels=8, num_blocks=2)
        self.transformer = FeatureTransformer(cfg).double()
        self.fmap_in = torch.randn(2, 8, 4, 2, generator=gen,
                                   dtype=torch.float64).requires_grad_()
        self.fmap_target = torch.randn(2, 8, 4, 2, generator=gen, dtype=torch.float64)

    def eval_params(self):
        return [*self.eval_hr.parameters(), *self.eval_lr.parameters()]

    def head_params(self):
        return [*self.eval_params(), *self.cls_hr.parameters(), *self.cls_lr.parameters()]

    def swa_cls_value(self):
        w = {k: ev(self.v[k]) for k, ev in
             (("hr", self.eval_hr), ("shr", self.eval_hr),
              ("lr", self.eval_lr), ("slr", self.eval_lr))}
        l = {k: cls_loss(c(self.v[k]), self.labels) for k, c in
             (("hr", self.cls_hr), ("shr", self.cls_hr),
              ("lr", self.cls_lr), ("slr", self.cls_lr))}
        return swa_cls_loss(w["hr"], l["hr"], w["slr"], l["slr"],
                            w["lr"], l["lr"], w["shr"], l["shr"])

    def swa_tri_value(self, margin=0.3):
        w = {k: ev(self.v[k]).mean() for k, ev in
             (("hr", self.eval_hr), ("shr", self.eval_hr),
              ("lr", self.eval_lr), ("slr", self.eval_lr))}
        both = torch.cat([self.labels, self.labels])
        loss_hr, _ = batch_all_triplet_loss(torch.cat([self.v["hr"], self.v["shr"]]),
                                            both, margin)
        loss_lr, _ = batch_all_triplet_loss(torch.cat([self.v["lr"], self.v["slr"]]),
                                            both, margin)
        return swa_triplet_loss(w["hr"], w["shr"], w["lr"], w["slr"], loss_hr, loss_lr)

    def transform_value(self):
        fmap = FeatureMap(self.fmap_in, StreamTag.F_SYNTH_LR)
        return transform_loss(self.fmap_target, self.transformer(fmap).values)


def run_gradcheck(losses: Optional[Sequence[str]] = None, seed: int = 0,
                  grad_perturbation: float = 0.0,
                  tolerance: float = TOLERANCE) -> list:
    """Run the selected gradient checks; returns one report per loss."""
    selected = tuple(losses) if losses else LOSS_NAMES
    unknown = set(selected) - set(LOSS_NAMES)
    if unknown:
        raise ConfigurationError(f"unknown loss name(s) {sorted(unknown)}; choose from {LOSS_NAMES}")

    toy = _Toy(seed)
    reports = []

    def check(name, fn, tensors):
        err, n = max_relative_error(fn, tensors, grad_perturbation=grad_perturbation)
        reports.append(GradCheckReport(name, err, n, err < tolerance))

    for name in selected:
        if name == "transform":
            check("transform", toy.transform_value,
                  [toy.fmap_in, *toy.transformer.parameters()])
        elif name == "cls":
            check("cls", lambda: cls_loss(toy.logits, toy.labels).mean(), [toy.logits])
        elif name == "tri":
            check("tri", lambda: batch_all_triplet_loss(toy.v["hr"], toy.labels, 0.3)[0],
                  [toy.v["hr"]])
        elif name == "swa_cls":
            check("swa_cls", toy.swa_cls_value,
                  [*toy.v.values(), *toy.head_params()])
        elif name == "swa_tri":
            check("swa_tri", toy.swa_tri_value,
                  [*toy.v.values(), *toy.eval_params()])
        elif name == "total":
            weights = LossWeights()

            def total_value():
                return total_loss(toy.swa_cls_value(), toy.swa_tri_value(),
                                  toy.transform_value(), weights)

            check("total", total_value,
                  [*toy.v.values(), toy.fmap_in, *toy.head_params(),
                   *toy.transformer.parameters()])
    return reports
