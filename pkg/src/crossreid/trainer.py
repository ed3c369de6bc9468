"""Training loop: optimizer, learning-rate schedule, ablation variants,
metrics logging and checkpointing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import (
    MLRConfig,
    TrainingBatch,
    downsample,
    pk_sample,
    records_to_tensor,
    upsample_to_canonical,
)
from .errors import ConfigurationError, TrainingDivergenceError
from .heads import gap_flatten
from .losses import (
    LossWeights,
    batch_all_triplet_loss,
    cls_loss,
    swa_cls_loss,
    swa_triplet_loss,
    total_loss,
    weighted_pair_cls,
)
from .model import ModelConfig, ReIDModel, save_checkpoint
from .transform import transform_loss

METRIC_FIELDS = ("step", "epoch", "lr", "total", "cls", "triplet", "transform",
                 "w_hr", "w_shr", "w_lr", "w_slr")


@dataclass
class TrainConfig:
    variant: str = "ftwa"
    backbone: str = "tiny"
    epochs: int = 120
    P: int = 16
    K: int = 4
    batches_per_epoch: Optional[int] = None
    base_lr: float = 0.0007
    decay_epochs: tuple = (40, 70)
    decay_factor: float = 0.2
    warmup_epochs: int = 10
    weight_decay: float = 0.0005
    loss_weights: LossWeights = field(default_factory=LossWeights)
    rate_set: tuple = (2, 3, 4)
    canonical_size: tuple = (64, 32)
    seed: int = 0
    deterministic: bool = False
    batch_hard: bool = False
    augment_flip: bool = False

    def __post_init__(self):
        de = tuple(self.decay_epochs)
        if any(a >= b for a, b in zip(de, de[1:])) or (de and de[-1] >= self.epochs):
            raise ConfigurationError(
                f"decay_epochs {de} must be strictly increasing and < epochs {self.epochs}"
            )

    @property
    def batch_size(self) -> int:
        return self.P * self.K


def desk_config(variant: str = "ftwa", seed: int = 0, **overrides) -> TrainConfig:
    """Small CPU-friendly preset used by the end-to-end tests."""
    base = dict(variant=variant, backbone="tiny", epochs=60, P=4, K=4,
                batches_per_epoch=5, decay_epochs=(30, 45), warmup_epochs=5,
                seed=seed, canonical_size=(64, 32))
    base.update(overrides)
    if "epochs" in overrides and "decay_epochs" not in overrides:
        # keep the decay points proportional when the run length is overridden
        e = base["epochs"]
        base["decay_epochs"] = tuple(sorted({max(1, e // 2), max(2, e * 3 // 4)}))
        if base["decay_epochs"][-1] >= e:
            base["decay_epochs"] = (max(1, e - 1),) if e > 1 else ()
        base["warmup_epochs"] = min(base["warmup_epochs"], max(0, e // 6))
    return TrainConfig(**base)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Linear warmup from base/10 to base, then step decay at decay_epochs."""
    if not 0 <= epoch < config.epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.warmup_epochs > 0 and epoch < config.warmup_epochs:
        frac = epoch / config.warmup_epochs
        return config.base_lr * (0.1 + 0.9 * frac)
    n_decays = sum(1 for e in config.decay_epochs if e <= epoch)
    return config.base_lr * (config.decay_factor ** n_decays)


def train_config_hash(config: TrainConfig) -> str:
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    model: ReIDModel
    history: list
    id_map: dict
    diverged: bool = False


def _maybe_flip(pixels: np.ndarray, rng: np.random.Generator, enabled: bool) -> np.ndarray:
    if enabled and rng.random() < 0.5:
        return np.ascontiguousarray(pixels[:, ::-1, :])
    return pixels


def _paired_synth_lr(batch: TrainingBatch, config: TrainConfig,
                     rng: np.random.Generator) -> list:
    """One degraded view per HR record, rate drawn uniformly from rate_set."""
    rates = sorted(config.rate_set)
    return [downsample(rec, int(rng.choice(rates))) for rec in batch.hr]


class _StepOutputs:
    """Per-step tensors shared by the loss assembly of all variants."""

    def __init__(self):
        self.cls = None
        self.triplet = None
        self.transform = None
        self.weights = {"w_hr": 1.0, "w_shr": 1.0, "w_lr": 1.0, "w_slr": 1.0}


def _forward_step(model: ReIDModel, batch: TrainingBatch, config: TrainConfig,
                  id_map: dict, rng: np.random.Generator) -> _StepOutputs:
    out = _StepOutputs()
    lw = config.loss_weights
    size = config.canonical_size
    y_hr = torch.tensor([id_map[r.person_id] for r in batch.hr], dtype=torch.long)

    if config.variant == "baseline":
        imgs = records_to_tensor(batch.hr, size)
        v = gap_flatten(model.backbone(imgs, "hr"))
        out.cls = cls_loss(model.heads.classify(v, "hr"), y_hr).mean()
        out.triplet, _ = batch_all_triplet_loss(v, y_hr, lw.margin, config.batch_hard)
        out.transform = torch.zeros(())
        return out

    y_lr = torch.tensor([id_map[r.person_id] for r in batch.lr], dtype=torch.long)
    slr_records = _paired_synth_lr(batch, config, rng)

    f_hr = model.backbone(records_to_tensor(batch.hr, size), "hr")
    f_slr = model.backbone(records_to_tensor(slr_records, size), "lr", synthetic=True)
    f_lr = model.backbone(records_to_tensor(batch.lr, size), "lr")

    v_hr, v_slr, v_lr = gap_flatten(f_hr), gap_flatten(f_slr), gap_flatten(f_lr)
    l_hr = cls_loss(model.heads.classify(v_hr, "hr"), y_hr)
    l_slr = cls_loss(model.heads.classify(v_slr, "lr"), y_hr)
    l_lr = cls_loss(model.heads.classify(v_lr, "lr"), y_lr)

    v_shr = None
    if model.transform is not None:
        # supervision: transformed synthetic-LR maps regress onto the fixed HR maps
        t_slr = model.transform(f_slr)
        out.transform = transform_loss(f_hr.values.detach(), t_slr.values)
        f_shr = model.transform(f_lr)
        v_shr = gap_flatten(f_shr)
        l_shr = cls_loss(model.heads.classify(v_shr, "hr"), y_lr)
    else:
        out.transform = torch.zeros(())

    if config.variant == "ftwa":
        w_hr = model.heads.evaluate_quality(v_hr, "hr")
        w_slr = model.heads.evaluate_quality(v_slr, "lr")
        w_lr = model.heads.evaluate_quality(v_lr, "lr")
        w_shr = model.heads.evaluate_quality(v_shr, "hr")
        out.cls = swa_cls_loss(w_hr, l_hr, w_slr, l_slr, w_lr, l_lr, w_shr, l_shr)
        loss_hr, _ = batch_all_triplet_loss(torch.cat([v_hr, v_shr]),
                                            torch.cat([y_hr, y_lr]),
                                            lw.margin, config.batch_hard)
        loss_lr, _ = batch_all_triplet_loss(torch.cat([v_lr, v_slr]),
                                            torch.cat([y_lr, y_hr]),
                                            lw.margin, config.batch_hard)
        mw = {k: w.mean() for k, w in
              zip(("w_hr", "w_slr", "w_lr", "w_shr"), (w_hr, w_slr, w_lr, w_shr))}
        out.triplet = swa_triplet_loss(mw["w_hr"], mw["w_shr"], mw["w_lr"], mw["w_slr"],
                                       loss_hr, loss_lr)
        out.weights = {k: float(v.detach()) for k, v in mw.items()}
        return out

    # plain (all-weights-1) losses for ftwa_b / ftwa_r
    out.cls = (l_hr + l_slr).mean() / 2
    if v_shr is not None:
        out.cls = out.cls + (l_lr + l_shr).mean() / 2
        loss_hr, _ = batch_all_triplet_loss(torch.cat([v_hr, v_shr]),
                                            torch.cat([y_hr, y_lr]),
                                            lw.margin, config.batch_hard)
    else:
        out.cls = out.cls + l_lr.mean()
        loss_hr, _ = batch_all_triplet_loss(v_hr, y_hr, lw.margin, config.batch_hard)
    loss_lr, _ = batch_all_triplet_loss(torch.cat([v_lr, v_slr]),
                                        torch.cat([y_lr, y_hr]),
                                        lw.margin, config.batch_hard)
    out.triplet = (loss_hr + loss_lr) / 2
    return out


def train(config: TrainConfig, train_records) -> TrainResult:
    """Run the optimization loop; returns the trained model plus per-step metrics.

    On divergence (non-finite loss) the exception carries component
    attribution; the model still holds the parameters of the last finite
    step and is returned inside the raised error's ``result`` attribute.
    """
    if config.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    torch.manual_seed(config.seed)

    ids = sorted({r.person_id for r in train_records})
    id_map = {pid: i for i, pid in enumerate(ids)}

    model = ReIDModel(ModelConfig(variant=config.variant, backbone=config.backbone,
                                  n_identities=len(ids)))
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.base_lr,
                                 weight_decay=config.weight_decay)

    sampler = pk_sample(train_records, config.P, config.K, seed=config.seed,
                        batches_per_epoch=config.batches_per_epoch,
                        require_lr=config.variant != "baseline")
    rng = np.random.default_rng(config.seed + 1)
    n_ids = sum(1 for _ in ids)
    batches_per_epoch = config.batches_per_epoch or -(-n_ids // config.P)

    history = []
    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for batch in islice(sampler, batches_per_epoch):
            out = _forward_step(model, batch, config, id_map, rng)
            try:
                loss = total_loss(out.cls, out.triplet, out.transform, config.loss_weights)
            except TrainingDivergenceError as exc:
                exc.result = TrainResult(model, history, id_map, diverged=True)
                raise
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            history.append({
                "step": step, "epoch": epoch, "lr": lr,
                "total": float(loss.detach()), "cls": float(out.cls.detach()),
                "triplet": float(out.triplet.detach()),
                "transform": float(out.transform.detach()),
                **out.weights,
            })
            step += 1
    model.eval()
    return TrainResult(model, history, id_map)


def write_metrics_csv(history, path) -> Path:
    """Write per-step metrics with a stable float format (byte-reproducible)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(METRIC_FIELDS)]
    for row in history:
        cells = []
        for k in METRIC_FIELDS:
            v = row[k]
            cells.append(str(v) if isinstance(v, int) else f"{v:.12g}")
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
    return path


def save_run(result: TrainResult, config: TrainConfig, run_dir) -> dict:
    """Persist checkpoint + metrics + manifest under a run directory."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / "checkpoint.pt"
    save_checkpoint(result.model, ckpt, extra={
        "id_map": {str(k): v for k, v in result.id_map.items()},
        "train_config": dataclasses.asdict(config),
    })
    metrics = write_metrics_csv(result.history, run_dir / "metrics.csv")
    manifest = {
        "config": dataclasses.asdict(config),
        "config_hash": train_config_hash(config),
        "seed": config.seed,
        "variant": config.variant,
        "artifacts": {"checkpoint": str(ckpt), "metrics": str(metrics)},
    }
    (run_dir / "run.json").write_text(json.dumps(manifest, indent=2))
    return manifest
