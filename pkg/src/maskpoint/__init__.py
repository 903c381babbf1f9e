"""Mask R-CNN with an auxiliary contour-point keypoint head fused into the mask branch."""

from .contour import (
    ContourPointSet,
    HeatmapLabel,
    centroid,
    corner_sample,
    decode_heatmaps,
    encode_heatmaps,
    points_to_mask,
    trace_contour,
    uniform_sample,
)
from .losses import LossBreakdown, total_loss
from .metrics import EvalReport, mask_ap
from .model import FusionConfig, MaskPointRCNN, ModelConfig
from .train import TrainConfig, Trainer, evaluate, infer

__version__ = "0.1.0"
