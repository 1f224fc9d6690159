"""Injected-noise dataset discrimination: masks, pseudo labels, and pretext training."""

from .encoder import (
    Encoder,
    EncoderConfig,
    FeaturePyramid,
    LevelSpec,
    Neck,
    inject,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    ArgumentError,
    ConfigError,
    DataError,
    DimensionError,
    StatisticsError,
)
from .labels import (
    BoxLabel,
    InstanceLabel,
    boxes_from_mask,
    connected_components,
    instances_from_mask,
    semantic_from_mask,
)
from .layersplit import LayerMaskSet, rasterize, split_mask
from .masks import MaskGenConfig, NoiseMask, gen_noise_mask, gen_sample_mask, mask_fraction
from .tensor import (
    GradientMap,
    Tape,
    Tensor,
    backward,
    conv2d,
    masked_merge,
    nn_resize,
    tensor,
)
from .train import (
    AugmentationConfig,
    ChannelStats,
    DatasetPairing,
    PretextModel,
    TrainConfig,
    augment,
    eval_pretext,
    focal_loss,
    lr_at_epoch,
    normalize,
    sgd_step,
    train_pretext,
)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "AugmentationConfig",
    "BoxLabel",
    "ChannelStats",
    "ConfigError",
    "DataError",
    "DatasetPairing",
    "DimensionError",
    "Encoder",
    "EncoderConfig",
    "FeaturePyramid",
    "GradientMap",
    "InstanceLabel",
    "LayerMaskSet",
    "LevelSpec",
    "MaskGenConfig",
    "Neck",
    "NoiseMask",
    "PretextModel",
    "StatisticsError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "augment",
    "backward",
    "boxes_from_mask",
    "connected_components",
    "conv2d",
    "eval_pretext",
    "focal_loss",
    "gen_noise_mask",
    "gen_sample_mask",
    "inject",
    "instances_from_mask",
    "load_checkpoint",
    "lr_at_epoch",
    "mask_fraction",
    "masked_merge",
    "nn_resize",
    "normalize",
    "rasterize",
    "save_checkpoint",
    "semantic_from_mask",
    "sgd_step",
    "split_mask",
    "tensor",
    "train_pretext",
]
