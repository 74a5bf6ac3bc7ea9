"""Retinal vessel segmentation engine with a from-scratch autodiff core.

Multi-scale dilated pyramid pooling, squeeze-and-attention blocks, and
multi-level feature aggregation on top of a numpy tensor substrate, plus a
full train/eval/predict pipeline and a built-in verification suite.
"""

from .tensor import (
    BNStats, ConvSpec, Tensor, no_grad,
    add, adaptive_avg_pool2d, batchnorm2d, concat_channels, conv2d,
    hardtanh, maxpool2d, mul, relu, sigmoid, upsample_bilinear,
)
from .gradcheck import gradcheck
from .blocks import CBlock, DBlock, DDPP, EBlock, SA, receptive_field
from .model import (
    NetworkConfig, VesselNet, init_he_normal, load_checkpoint, param_count,
    save_checkpoint,
)
from .losses import LossConfig, bce_loss, dice_loss, ei_loss, smoothed_heaviside
from .metrics import (
    ConfusionCounts, accuracy, auroc, confusion, dataset_report,
    roc_curve, sensitivity, specificity,
)
from .data import (
    AugmentationConfig, DatasetManifest, Sample, augment, extract_patches,
    load_dataset, load_manifest, normalize, stitch,
)
from .train import Adam, TrainConfig, TrainHistory, adam_step, evaluate, train
from .config import RunConfig

__version__ = "0.1.0"
