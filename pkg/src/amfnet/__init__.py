"""RGB-depth fusion segmentation with adaptive masking of invalid-depth regions."""

from .amf import (
    AdaptiveMaskFusion,
    AdaptiveMaskGenerator,
    AdaptiveMaskPair,
    AdaptiveWeights,
    ChannelAttention,
    SpatialAttention,
    make_adaptive_masks,
    masked_fuse,
    weights_from_logits,
)
from .backbone import Encoder, EncoderConfig, MultiHeadSelfAttention2d
from .checkpoint import load_into, read_checkpoint, restore_network, save_checkpoint
from .core import (
    NUM_CLASSES,
    STAGE_COUNT,
    DepthImage,
    FeatureMap,
    GridError,
    LabelMap,
    Mask,
    MaskPyramid,
    RGBImage,
    normalize_depth,
)
from .data import Sample, SynthParams, generate_corpus, load_sample, split_ids, synth_scene
from .decoder import Decoder, DualResidualBlock
from .maskgen import build_pyramid, generate_mask, stage_shapes
from .metrics import ConfusionMatrix, MetricsReport
from .network import (
    AblationSpec,
    AMFNet,
    NetworkConfig,
    build_network,
    build_variant,
    parameter_count,
    segmentation_loss,
)
from .train import TrainConfig, TrainResult, desk_config, evaluate, lr_at, train

__version__ = "0.1.0"
