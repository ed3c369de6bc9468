"""Cross-resolution person re-identification toolkit.

Two-stream encoding, feature-space resolution transformation,
quality-weighted training losses, and single-shot CMC evaluation.
"""

from .backbone import BackboneConfig, FeatureMap, StreamTag, TwoStreamBackbone
from .data import (
    ImageRecord,
    MLRConfig,
    MLRSplit,
    ResolutionTag,
    TrainingBatch,
    build_mlr_split,
    downsample,
    generate_synthetic_corpus,
    pk_sample,
    upsample_to_canonical,
)
from .evaluation import CMCResult, Descriptor, cmc, distance, extract_descriptors
from .losses import (
    LossWeights,
    batch_all_triplet_loss,
    cls_loss,
    swa_cls_loss,
    swa_triplet_loss,
    total_loss,
)
from .model import VARIANTS, ModelConfig, ReIDModel, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, desk_config, lr_at, train
from .transform import FeatureTransformer, TransformConfig, channel_split, transform_loss

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
