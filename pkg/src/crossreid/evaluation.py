"""Inference-time descriptors, weighted cross-resolution matching, and
single-shot CMC scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .data import ImageRecord, downsample, records_to_tensor
from .errors import ProtocolError, ShapeError
from .heads import gap_flatten
from .model import ReIDModel

RANKS = (1, 5, 10, 20)


@dataclass
class Descriptor:
    """Unit-normalized matching vectors with fusion weights summing to 1."""

    primary: np.ndarray
    auxiliary: Optional[np.ndarray]
    weights: tuple  # (w_primary, w_auxiliary), positive, sum 1
    person_id: int = -1

    def __post_init__(self):
        w1, w2 = self.weights
        if not (w1 >= 0 and w2 >= 0 and abs(w1 + w2 - 1.0) < 1e-9):
            raise ShapeError(f"fusion weights must be non-negative and sum to 1, got {self.weights}")
        if self.auxiliary is None and w2 != 0.0:
            raise ShapeError("absent auxiliary vector requires zero auxiliary weight")


@dataclass
class CMCResult:
    """Rank-k accuracies averaged over single-shot gallery trials."""

    rank_accuracy: dict       # k -> mean fraction in [0, 1]
    trials: int
    per_trial: dict           # k -> list of per-trial fractions


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else v


def extract_descriptors(
    model: ReIDModel,
    records: Sequence[ImageRecord],
    side: str,
    canonical_size: tuple = (64, 32),
    fusion: bool = True,
    gallery_aux_rate: int = 2,
) -> list:
    """Build matching descriptors for query (LR) or gallery (HR) records.

    Descriptors pair vectors that live in the same embedding space on both
    sides. LR queries: primary = transformed (HR-like) embedding, auxiliary
    = LR-stream embedding. HR gallery: primary = HR-stream embedding,
    auxiliary = LR-stream embedding of a fixed-rate degraded view. The
    primary comparison therefore happens in HR feature space (aligned by
    the transform's regression loss) and the auxiliary comparison in LR
    feature space. Variants without the transform (or with fusion
    disabled) emit single-vector descriptors with weights (1, 0).
    """
    if side not in ("query", "gallery"):
        raise ProtocolError(f"side must be 'query' or 'gallery', got {side!r}")
    model.eval()
    fuse = fusion and model.transform is not None
    descriptors = []
    with torch.no_grad():
        for rec in records:
            if side == "query":
                stream = "lr" if model.config.two_stream else "hr"
                fmap = model.backbone(records_to_tensor([rec], canonical_size), stream,
                                      synthetic=stream == "lr")
                v_native = gap_flatten(fmap)
                v = v_native
                aux_v = w = aux_w = None
                if fuse:
                    v = gap_flatten(model.transform(fmap))  # HR-like, primary
                    aux_v = v_native
                    if model.config.has_evaluators:
                        w = float(model.heads.evaluate_quality(v, "hr"))
                        aux_w = float(model.heads.evaluate_quality(aux_v, "lr"))
            else:
                fmap = model.backbone(records_to_tensor([rec], canonical_size), "hr")
                v = gap_flatten(fmap)
                aux_v = w = aux_w = None
                if fuse:
                    degraded = downsample(rec, gallery_aux_rate)
                    aux_map = model.backbone(records_to_tensor([degraded], canonical_size),
                                             "lr", synthetic=True)
                    aux_v = gap_flatten(aux_map)
                    if model.config.has_evaluators:
                        w = float(model.heads.evaluate_quality(v, "hr"))
                        aux_w = float(model.heads.evaluate_quality(aux_v, "lr"))

            primary = _unit(v.squeeze(0).numpy().astype(np.float64))
            if aux_v is None:
                descriptors.append(Descriptor(primary, None, (1.0, 0.0), rec.person_id))
                continue
            auxiliary = _unit(aux_v.squeeze(0).numpy().astype(np.float64))
            if w is None:
                weights = (0.5, 0.5)
            else:
                total = w + aux_w
                weights = (w / total, aux_w / total)
            descriptors.append(Descriptor(primary, auxiliary, weights, rec.person_id))
    return descriptors


def distance(q: Descriptor, g: Descriptor) -> float:
    """Weighted two-term distance; absent auxiliaries contribute zero."""
    if q.primary.shape != g.primary.shape:
        raise ShapeError(
            f"embedding dimension mismatch: {q.primary.shape} vs {g.primary.shape}"
        )
    d = np.sqrt(q.weights[0] * g.weights[0]) * np.linalg.norm(q.primary - g.primary)
    if q.auxiliary is not None and g.auxiliary is not None:
        d += np.sqrt(q.weights[1] * g.weights[1]) * np.linalg.norm(q.auxiliary - g.auxiliary)
    return float(d)


def distance_matrix(queries: Sequence[Descriptor], gallery: Sequence[Descriptor]) -> np.ndarray:
    out = np.empty((len(queries), len(gallery)), dtype=np.float64)
    for i, q in enumerate(queries):
        for j, g in enumerate(gallery):
            out[i, j] = distance(q, g)
    return out


def cmc_from_distance_matrix(
    dist: np.ndarray,
    query_ids: Sequence[int],
    gallery_ids: Sequence[int],
    trials: int = 10,
    seed: int = 0,
    ranks: tuple = RANKS,
) -> CMCResult:
    """Single-shot CMC: per trial one gallery image per identity is kept,
    the gallery is ranked by ascending distance, and rank-k accuracy is the
    fraction of queries whose identity appears in the top k."""
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if dist.shape != (len(query_ids), len(gallery_ids)):
        raise ShapeError(f"distance matrix {dist.shape} does not match id lists")
    missing = sorted(set(query_ids.tolist()) - set(gallery_ids.tolist()))
    if missing:
        raise ProtocolError(f"query identities absent from gallery: {missing}")

    rng = np.random.default_rng(seed)
    unique_g = sorted(set(gallery_ids.tolist()))
    by_id = {pid: np.flatnonzero(gallery_ids == pid) for pid in unique_g}

    per_trial = {k: [] for k in ranks}
    for _ in range(trials):
        chosen = np.array([int(rng.choice(by_id[pid])) for pid in unique_g])
        sub = dist[:, chosen]
        sub_ids = gallery_ids[chosen]
        order = np.argsort(sub, axis=1, kind="stable")
        ranked_ids = sub_ids[order]
        match_rank = np.argmax(ranked_ids == query_ids[:, None], axis=1)
        for k in ranks:
            per_trial[k].append(float(np.mean(match_rank < min(k, len(chosen)))))
    return CMCResult(
        rank_accuracy={k: float(np.mean(v)) for k, v in per_trial.items()},
        trials=trials,
        per_trial=per_trial,
    )


def cmc(queries: Sequence[Descriptor], gallery: Sequence[Descriptor],
        trials: int = 10, seed: int = 0) -> CMCResult:
    dist = distance_matrix(queries, gallery)
    return cmc_from_distance_matrix(
        dist,
        [q.person_id for q in queries],
        [g.person_id for g in gallery],
        trials=trials,
        seed=seed,
    )
