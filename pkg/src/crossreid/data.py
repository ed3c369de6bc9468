"""Dataset construction for cross-resolution ReID.

Covers directory ingestion, the synthetic desk-scale corpus, resolution
degradation, the LR-query / HR-gallery split protocol and identity-balanced
(P x K) batch sampling. All randomized operations are reproducible from
(inputs, seed).
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigurationError, DegenerateInputError, ShapeError


class ResolutionTag(str, Enum):
    REAL_HR = "REAL_HR"
    REAL_LR = "REAL_LR"
    SYNTH_LR = "SYNTH_LR"


@dataclass
class ImageRecord:
    """One image with identity/camera labels and a resolution tag.

    ``pixels`` is an (H, W, 3) float32 array with intensities in [0, 1].
    SYNTH_LR records additionally carry the down-sampling rate that
    produced them.
    """

    pixels: np.ndarray
    person_id: int
    camera_id: int
    tag: ResolutionTag = ResolutionTag.REAL_HR
    rate: Optional[int] = None
    source_path: Optional[str] = None

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float32)
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ShapeError(f"pixels must be (H, W, 3) with H, W >= 1, got {p.shape}")
        if float(p.min()) < 0.0 or float(p.max()) > 1.0:
            raise ShapeError("pixel intensities must lie in [0, 1]")
        self.pixels = p
        if self.tag == ResolutionTag.SYNTH_LR and self.rate is None:
            raise ConfigurationError("SYNTH_LR records must store their down-sampling rate")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class MLRConfig:
    """Protocol knobs for constructing a multi-resolution (MLR) split."""

    rate_set: tuple = (2, 3, 4)
    lr_camera_ids: tuple = (1,)
    canonical_size: tuple = (64, 32)
    rng_seed: int = 0
    train_fraction: float = 0.5
    single_shot_trials: int = 10

    def validate(self, all_camera_ids: set):
        if any(r < 2 for r in self.rate_set):
            raise ConfigurationError(f"every down-sampling rate must be >= 2, got {self.rate_set}")
        lr = set(self.lr_camera_ids)
        if not lr or not lr.issubset(all_camera_ids) or lr == all_camera_ids:
            raise ConfigurationError(
                f"lr_camera_ids {sorted(lr)} must be a proper nonempty subset of cameras {sorted(all_camera_ids)}"
            )


@dataclass
class MLRSplit:
    """Result of the split protocol: identity-disjoint train/test partitions."""

    train: list
    query: list
    gallery: list
    excluded_identities: int = 0
    config: Optional[MLRConfig] = None


@dataclass
class TrainingBatch:
    """Identity-balanced batch: P identities x K instances per stream."""

    hr: list
    lr: list
    P: int
    K: int

    def __post_init__(self):
        if self.K < 2:
            raise ConfigurationError("K >= 2 required so every identity has a positive")
        if len(self.hr) != self.P * self.K:
            raise ConfigurationError(f"batch size must be P*K = {self.P * self.K}, got {len(self.hr)}")

    @property
    def hr_labels(self) -> np.ndarray:
        return np.array([r.person_id for r in self.hr], dtype=np.int64)

    @property
    def lr_labels(self) -> np.ndarray:
        return np.array([r.person_id for r in self.lr], dtype=np.int64)


def _resize(pixels: np.ndarray, size: tuple, antialias: bool) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=antialias)
    out = out.clamp_(0.0, 1.0).squeeze(0).permute(1, 2, 0).contiguous().numpy()
    return out.astype(np.float32)


def downsample(record: ImageRecord, rate: int) -> ImageRecord:
    """Degrade an image by an integer rate using anti-aliased bilinear resampling.

    Identity and camera labels are preserved; the result is tagged SYNTH_LR
    and remembers its rate.
    """
    if rate < 2:
        raise DegenerateInputError(f"down-sampling rate must be >= 2, got {rate}")
    if record.height < rate or record.width < rate:
        raise DegenerateInputError(
            f"rate {rate} exceeds image dimensions {record.height}x{record.width}"
        )
    new_size = (record.height // rate, record.width // rate)
    pixels = _resize(record.pixels, new_size, antialias=True)
    return replace(record, pixels=pixels, tag=ResolutionTag.SYNTH_LR, rate=rate)


def upsample_to_canonical(record: ImageRecord, canonical_size: tuple) -> ImageRecord:
    """Bilinear resize to the network input size, preserving the tag.

    Images already at the canonical size are returned unchanged.
    """
    h0, w0 = canonical_size
    if h0 < 1 or w0 < 1:
        raise DegenerateInputError(f"canonical size must be positive, got {canonical_size}")
    if (record.height, record.width) == (h0, w0):
        return record
    pixels = _resize(record.pixels, (h0, w0), antialias=False)
    return replace(record, pixels=pixels)


def records_to_tensor(records: Sequence[ImageRecord], canonical_size: tuple) -> torch.Tensor:
    """Stack records into an (N, 3, H0, W0) float tensor at canonical size."""
    arrs = [upsample_to_canonical(r, canonical_size).pixels for r in records]
    return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

def generate_synthetic_corpus(
    n_identities: int,
    n_cameras: int,
    images_per_id_per_cam: int,
    seed: int,
    size: tuple = (64, 32),
) -> list:
    """Render a procedural person corpus, deterministic under ``seed``.

    Each identity gets a signature of stacked clothing-color bands plus a
    torso stripe texture; each camera applies a global color tint, a
    brightness offset and geometric jitter, so cross-camera matching is
    non-trivial but identity remains recoverable from appearance.
    """
    if min(n_identities, n_cameras, images_per_id_per_cam) < 1:
        raise ConfigurationError("all corpus counts must be >= 1")
    rng = np.random.default_rng(seed)
    H, W = size

    band_colors = rng.uniform(0.05, 0.95, size=(n_identities, 4, 3))
    stripe_colors = rng.uniform(0.05, 0.95, size=(n_identities, 3))
    stripe_freq = rng.uniform(2.0, 7.0, size=n_identities)
    stripe_phase = rng.uniform(0.0, 2 * np.pi, size=n_identities)

    cam_gain = rng.uniform(0.55, 1.0, size=(n_cameras, 3))
    cam_offset = rng.uniform(-0.10, 0.10, size=n_cameras)

    records = []
    for pid in range(n_identities):
        for cam in range(n_cameras):
            for idx in range(images_per_id_per_cam):
                img = np.full((H, W, 3), 0.5, dtype=np.float64)
                img += rng.normal(0.0, 0.03, size=(H, W, 3))

                dy = int(rng.integers(-2, 3))
                dx = int(rng.integers(-2, 3))
                top, bottom = int(0.08 * H) + dy, int(0.95 * H) + dy
                left, right = int(0.20 * W) + dx, int(0.80 * W) + dx
                top, bottom = max(top, 0), min(bottom, H)
                left, right = max(left, 0), min(right, W)

                span = bottom - top
                # head / torso / legs / shoes proportions, jittered per image
                props = np.array([0.15, 0.40, 0.35, 0.10])
                props = props * rng.uniform(0.9, 1.1, size=4)
                props = props / props.sum()
                edges = top + np.round(np.cumsum(np.concatenate([[0.0], props])) * span).astype(int)
                for b in range(4):
                    img[edges[b]:edges[b + 1], left:right, :] = band_colors[pid, b]

                # torso stripes mix in the secondary identity color
                t0, t1 = edges[1], edges[2]
                if t1 > t0:
                    rows = np.arange(t0, t1)
                    wave = 0.5 * (1 + np.sin(stripe_freq[pid] * rows * 2 * np.pi / H + stripe_phase[pid]))
                    mix = wave[:, None, None]
                    img[t0:t1, left:right, :] = (
                        (1 - mix) * img[t0:t1, left:right, :] + mix * stripe_colors[pid]
                    )

                img = img * cam_gain[cam][None, None, :] + cam_offset[cam]
                img += rng.normal(0.0, 0.02, size=(H, W, 3))
                img = np.clip(img, 0.0, 1.0).astype(np.float32)
                records.append(ImageRecord(img, person_id=pid, camera_id=cam))
    return records


# ---------------------------------------------------------------------------
# Split protocol
# ---------------------------------------------------------------------------

def build_mlr_split(
    records: Sequence[ImageRecord],
    config: MLRConfig,
    train_ids: Optional[Sequence[int]] = None,
) -> MLRSplit:
    """Construct the LR-query / HR-gallery split.

    Images from ``lr_camera_ids`` are degraded with a per-image rate drawn
    uniformly from ``rate_set`` (seeded). Test identities missing either a
    degraded or an untouched view are excluded and counted. Query and
    gallery image sets are disjoint; every query identity appears in the
    gallery.
    """
    cameras = {r.camera_id for r in records}
    if len(cameras) < 2:
        raise ConfigurationError("split protocol requires records from at least 2 cameras")
    config.validate(cameras)
    rng = np.random.default_rng(config.rng_seed)

    all_ids = sorted({r.person_id for r in records})
    if train_ids is None:
        order = list(all_ids)
        rng.shuffle(order)
        n_train = max(1, int(round(config.train_fraction * len(order))))
        train_ids = set(order[:n_train])
    else:
        train_ids = set(train_ids)
    test_ids = [i for i in all_ids if i not in train_ids]

    lr_cams = set(config.lr_camera_ids)
    rates = sorted(config.rate_set)

    def degrade(rec: ImageRecord) -> ImageRecord:
        r = int(rng.choice(rates))
        return downsample(rec, r)

    train, query, gallery = [], [], []
    test_by_id: dict = {}
    for rec in records:
        processed = degrade(rec) if rec.camera_id in lr_cams else rec
        if rec.person_id in train_ids:
            train.append(processed)
        else:
            test_by_id.setdefault(rec.person_id, []).append(processed)

    excluded = 0
    for pid in test_ids:
        recs = test_by_id.get(pid, [])
        q = [r for r in recs if r.camera_id in lr_cams]
        g = [r for r in recs if r.camera_id not in lr_cams]
        if not q or not g:
            excluded += 1
            continue
        query.extend(q)
        gallery.extend(g)

    return MLRSplit(train=train, query=query, gallery=gallery,
                    excluded_identities=excluded, config=config)


# ---------------------------------------------------------------------------
# P x K sampling
# ---------------------------------------------------------------------------

def pk_sample(
    train_set: Sequence[ImageRecord],
    P: int,
    K: int,
    seed: int,
    batches_per_epoch: Optional[int] = None,
    require_lr: bool = True,
) -> Iterator[TrainingBatch]:
    """Yield identity-balanced batches of P identities x K instances.

    Each batch carries K HR records per identity and, when ``require_lr``,
    K low-resolution records of the same identities (sampled with
    replacement if an identity has fewer than K LR images). The sequence is
    deterministic under ``seed``; one epoch visits ``batches_per_epoch``
    batches (default: ceil(#eligible identities / P)).
    """
    hr_pool: dict = {}
    lr_pool: dict = {}
    for rec in train_set:
        pool = hr_pool if rec.tag == ResolutionTag.REAL_HR else lr_pool
        pool.setdefault(rec.person_id, []).append(rec)

    eligible = [pid for pid, recs in hr_pool.items() if len(recs) >= K]
    if require_lr:
        eligible = [pid for pid in eligible if pid in lr_pool]
    eligible.sort()
    if len(eligible) < P:
        raise ConfigurationError(
            f"need >= {P} identities with >= {K} HR images"
            + (" and >= 1 LR image" if require_lr else "")
            + f", found {len(eligible)}"
        )

    rng = np.random.default_rng(seed)
    n_batches = batches_per_epoch or -(-len(eligible) // P)
    while True:
        order = list(eligible)
        rng.shuffle(order)
        for b in range(n_batches):
            ids = [order[(b * P + i) % len(order)] for i in range(P)]
            hr, lr = [], []
            for pid in ids:
                pool = hr_pool[pid]
                pick = rng.choice(len(pool), size=K, replace=len(pool) < K)
                hr.extend(pool[i] for i in pick)
                if require_lr:
                    lpool = lr_pool[pid]
                    lpick = rng.choice(len(lpool), size=K, replace=len(lpool) < K)
                    lr.extend(lpool[i] for i in lpick)
            yield TrainingBatch(hr=hr, lr=lr, P=P, K=K)


# ---------------------------------------------------------------------------
# Directory ingestion and manifests
# ---------------------------------------------------------------------------

_NAME_RE = re.compile(r"^(\d+)_(\d+)_(\d+)\.(png|jpg|jpeg)$", re.IGNORECASE)


def ingest_directory(root) -> tuple:
    """Load ``<person_id>_<camera_id>_<index>.<ext>`` images from a directory.

    Returns (records, rejected) where rejected is a list of
    (filename, reason) for files that do not parse.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"image directory not found: {root}")
    records, rejected = [], []
    for path in sorted(root.iterdir()):
        if path.is_dir():
            continue
        m = _NAME_RE.match(path.name)
        if not m:
            rejected.append((path.name, "filename does not match <pid>_<cam>_<idx>.<ext>"))
            continue
        try:
            img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        except Exception as exc:  # unreadable or truncated file
            rejected.append((path.name, f"unreadable image: {exc}"))
            continue
        records.append(ImageRecord(img, person_id=int(m.group(1)),
                                   camera_id=int(m.group(2)), source_path=str(path)))
    return records, rejected


def save_records(records: Sequence[ImageRecord], out_dir, prefix: str = "") -> list:
    """Write records as 8-bit PNGs; returns manifest entries."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    counter: dict = {}
    for rec in records:
        key = (rec.person_id, rec.camera_id)
        idx = counter.get(key, 0)
        counter[key] = idx + 1
        name = f"{prefix}{rec.person_id:04d}_{rec.camera_id}_{idx:03d}.png"
        path = out_dir / name
        Image.fromarray((rec.pixels * 255.0 + 0.5).astype(np.uint8)).save(path)
        entries.append({
            "path": str(path),
            "person_id": rec.person_id,
            "camera_id": rec.camera_id,
            "tag": rec.tag.value,
            "rate": rec.rate,
        })
    return entries


def save_split_manifest(split: MLRSplit, out_dir) -> Path:
    """Freeze a split to disk (PNG images + JSON manifest); returns the manifest path."""
    out_dir = Path(out_dir)
    manifest = {
        "config": dataclasses.asdict(split.config) if split.config else None,
        "excluded_identities": split.excluded_identities,
        "train": save_records(split.train, out_dir / "train"),
        "query": save_records(split.query, out_dir / "query"),
        "gallery": save_records(split.gallery, out_dir / "gallery"),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _load_entries(entries) -> list:
    records = []
    for e in entries:
        img = np.asarray(Image.open(e["path"]).convert("RGB"), dtype=np.float32) / 255.0
        records.append(ImageRecord(img, person_id=e["person_id"], camera_id=e["camera_id"],
                                   tag=ResolutionTag(e["tag"]), rate=e["rate"],
                                   source_path=e["path"]))
    return records


def load_split_manifest(path) -> MLRSplit:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    cfg = manifest.get("config")
    config = None
    if cfg:
        cfg = dict(cfg)
        for k in ("rate_set", "lr_camera_ids", "canonical_size"):
            if cfg.get(k) is not None:
                cfg[k] = tuple(cfg[k])
        config = MLRConfig(**cfg)
    return MLRSplit(
        train=_load_entries(manifest["train"]),
        query=_load_entries(manifest["query"]),
        gallery=_load_entries(manifest["gallery"]),
        excluded_identities=manifest.get("excluded_identities", 0),
        config=config,
    )
