"""Backbone, RoI sampling, box/mask/keypoint heads and keypoint-to-mask fusion.

Tensors are NCHW. Boxes are (top, left, height, width) in image pixels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DegenerateBox, ShapeError

DESIGNS = ("a", "b", "c", "d")
REDUCTIONS = ("maxpool", "avgpool", "strided_conv")
MODES = ("add", "max", "multiply")


@dataclass
class FusionConfig:
    design: str = "b"
    reduction: str = "strided_conv"
    mode: str = "multiply"
    k: int = 100
    use_center: bool = True
    alpha: float = 0.5
    enabled: bool = True
    # design c only: average-pool the 56x56 fused output back to 28x28
    downsample_c_output: bool = False

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"design must be one of {DESIGNS}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    @property
    def channels(self):
        return self.k + (1 if self.use_center else 0)

    @property
    def keypoint_size(self):
        return 28 if self.design == "d" else 56

    @property
    def mask_out_size(self):
        if self.enabled and self.design == "c" and not self.downsample_c_output:
            return 56
        return 28


@dataclass
class ModelConfig:
    num_classes: int = 4
    features: int = 64
    backbone_width: int = 32
    mask_width: int = 64  # 256 in the full-size model
    keypoint_width: int = 64  # 512 in the full-size model
    box_hidden: int = 256
    roi_size: int = 14
    keypoint: bool = True
    fusion: FusionConfig = field(default_factory=FusionConfig)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("fusion"), dict):
            d["fusion"] = FusionConfig(**d["fusion"])
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class HeadOutputs:
    class_logits: torch.Tensor  # (R, C+1)
    box_deltas: torch.Tensor  # (R, 4C)
    mask_logits: torch.Tensor | None = None  # (R', C, 28, 28)
    keypoint_logits: torch.Tensor | None = None  # (R', K, M, M)
    fused_mask_logits: torch.Tensor | None = None  # (R', C, N, N)
    keypoint_sum: torch.Tensor | None = None  # O_k, (R', 1, N, N)


def init_parameters(module, generator):
    """Fan-in scaled uniform weights, zero biases, drawn in module registration order."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            w = m.weight
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = w.shape[0] * w.shape[2] * w.shape[3] // (m.stride[0] * m.stride[1])
            else:
                fan_in = w[0].numel()
            bound = math.sqrt(6.0 / max(fan_in, 1))
            with torch.no_grad():
                w.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


class Backbone(nn.Module):
    """Six 3x3 convolutions with two stride-2 steps: (B, 3, H, W) -> (B, F, H/4, W/4)."""

    def __init__(self, features=64, width=32):
        super().__init__()
        spec = [(3, width, 1), (width, width, 2), (width, 2 * width, 1), (2 * width, 2 * width, 2),
                (2 * width, 2 * width, 1), (2 * width, features, 1)]
        self.convs = nn.ModuleList(nn.Conv2d(i, o, 3, s, 1) for i, o, s in spec)

    def forward(self, images):
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W), got {tuple(images.shape)}")
        if images.shape[2] % 4 or images.shape[3] % 4:
            raise ShapeError(f"image size {tuple(images.shape[2:])} not divisible by 4")
        x = images
        for conv in self.convs:
            x = F.relu(conv(x))
        return x


def roi_extract(features, boxes, batch_index=None, out_size=14, stride=4):
    """Bilinear sample an ``out_size`` grid of bin centers inside each box.

    ``features`` is (B, F, h, w) at ``stride`` pixels per cell; feature cell
    ``j`` is centered on image coordinate ``stride * (j + 0.5)``.
    Returns (R, F, out_size, out_size).
    """
    boxes = torch.as_tensor(boxes, dtype=features.dtype).reshape(-1, 4)
    if (boxes[:, 2] < 1).any() or (boxes[:, 3] < 1).any():
        raise DegenerateBox("box height and width must be >= 1 pixel")
    R = boxes.shape[0]
    if batch_index is None:
        batch_index = torch.zeros(R, dtype=torch.long)
    batch_index = torch.as_tensor(batch_index, dtype=torch.long)
    _, _, h, w = features.shape
    S = out_size
    offs = (torch.arange(S, dtype=features.dtype) + 0.5) / S
    fy = (boxes[:, 0:1] + offs * boxes[:, 2:3]) / stride - 0.5
    fx = (boxes[:, 1:2] + offs * boxes[:, 3:4]) / stride - 0.5

    def axis(coord, size):
        coord = coord.clamp(0, size - 1)
        lo = coord.floor().long().clamp(max=max(size - 2, 0))
        hi = (lo + 1).clamp(max=size - 1)
        frac = coord - lo.to(coord.dtype)
        return lo, hi, frac

    y0, y1, wy = axis(fy, h)
    x0, x1, wx = axis(fx, w)
    b = batch_index[:, None, None]

    def gather(ys, xs):
        # (R, S, S, F)
        return features.permute(0, 2, 3, 1)[b, ys[:, :, None], xs[:, None, :]]

    wy = wy[:, :, None, None]
    wx = wx[:, None, :, None]
    out = (
        gather(y0, x0) * (1 - wy) * (1 - wx)
        + gather(y0, x1) * (1 - wy) * wx
        + gather(y1, x0) * wy * (1 - wx)
        + gather(y1, x1) * wy * wx
    )
    return out.permute(0, 3, 1, 2).contiguous()


class BoxHead(nn.Module):
    def __init__(self, in_features, num_classes, roi_size=14, hidden=256):
        super().__init__()
        self.fc1 = nn.Linear(in_features * roi_size * roi_size, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.box = nn.Linear(hidden, 4 * num_classes)

    def forward(self, roi):
        x = F.relu(self.fc1(roi.flatten(1)))
        x = F.relu(self.fc2(x))
        return self.cls(x), self.box(x)


class MaskHead(nn.Module):
    """Four 3x3 convs, 2x transposed-conv upsample, 1x1 to per-class logits."""

    def __init__(self, in_features, num_classes, width=64):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(in_features if i == 0 else width, width, 3, 1, 1) for i in range(4))
        self.up = nn.ConvTranspose2d(width, width, 2, 2)
        self.out = nn.Conv2d(width, num_classes, 1)

    def forward(self, roi):
        x = roi
        for conv in self.convs:
            x = F.relu(conv(x))
        return self.out(F.relu(self.up(x)))


class KeypointHead(nn.Module):
    """Eight 3x3 convs, one or two 2x upsamples, 1x1 to one logit map per point."""

    def __init__(self, in_features, channels, width=64, upsamples=2):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(in_features if i == 0 else width, width, 3, 1, 1) for i in range(8))
        self.ups = nn.ModuleList(nn.ConvTranspose2d(width, width, 2, 2) for _ in range(upsamples))
        self.out = nn.Conv2d(width, channels, 1)

    def forward(self, roi):
        x = roi
        for conv in self.convs:
            x = F.relu(conv(x))
        for up in self.ups:
            x = F.relu(up(x))
        return self.out(x)


def _combine(o_k, f_m, mode):
    if mode == "multiply":
        return o_k * f_m
    if mode == "add":
        return f_m + o_k
    return torch.maximum(o_k.expand_as(f_m), f_m)


class Fusion(nn.Module):
    """Collapse keypoint logits to one map and broadcast-fuse it into the mask logits.

    Returns ``(fused, o_k)``.
    """

    def __init__(self, config, num_classes):
        super().__init__()
        self.config = config
        K = config.channels
        self.reduce = None
        self.upsample = None
        if config.reduction == "strided_conv" and config.design in ("a", "b"):
            ch = 1 if config.design == "a" else K
            self.reduce = nn.Conv2d(ch, ch, 3, 2, 1)
        if config.design == "c":
            self.upsample = nn.ConvTranspose2d(num_classes, num_classes, 2, 2)

    def _downsample(self, x):
        # no rectifier after the reduction
        red = self.config.reduction
        if red == "maxpool":
            return F.max_pool2d(x, 2, 2)
        if red == "avgpool":
            return F.avg_pool2d(x, 2, 2)
        return self.reduce(x)

    def forward(self, keypoint_logits, mask_logits):
        cfg = self.config
        kp, fm = keypoint_logits, mask_logits
        if kp.shape[1] != cfg.channels:
            raise ShapeError(f"keypoint logits have {kp.shape[1]} channels, expected {cfg.channels}")
        if kp.shape[0] != fm.shape[0]:
            raise ShapeError("keypoint and mask logits disagree on RoI count")
        if cfg.design == "a":
            o_k = self._downsample(kp.sum(dim=1, keepdim=True))
        elif cfg.design == "b":
            o_k = self._downsample(kp).sum(dim=1, keepdim=True)
        elif cfg.design == "c":
            fm = self.upsample(fm)
            o_k = kp.sum(dim=1, keepdim=True)
        else:
            o_k = kp.sum(dim=1, keepdim=True)
        if o_k.shape[-2:] != fm.shape[-2:]:
            raise ShapeError(f"O_k is {tuple(o_k.shape[-2:])} but mask logits are {tuple(fm.shape[-2:])}")
        fused = _combine(o_k, fm, cfg.mode)
        if cfg.design == "c" and cfg.downsample_c_output:
            fused = F.avg_pool2d(fused, 2, 2)
        return fused, o_k


def fuse(keypoint_logits, mask_logits, config, fusion_module=None):
    """Functional entry point; builds a parameter-free module when none is supplied."""
    if fusion_module is None:
        if config.design == "c" or (config.design in ("a", "b") and config.reduction == "strided_conv"):
            raise ValueError("this fusion variant has parameters; pass fusion_module")
        fusion_module = Fusion(config, mask_logits.shape[1])
    return fusion_module(keypoint_logits, mask_logits)


class MaskPointRCNN(nn.Module):
    def __init__(self, config=None, seed=0):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        fc = cfg.fusion
        self.backbone = Backbone(cfg.features, cfg.backbone_width)
        self.box_head = BoxHead(cfg.features, cfg.num_classes, cfg.roi_size, cfg.box_hidden)
        self.mask_head = MaskHead(cfg.features, cfg.num_classes, cfg.mask_width)
        self.keypoint_head = None
        self.fusion = None
        if cfg.keypoint:
            ups = 1 if fc.design == "d" else 2
            self.keypoint_head = KeypointHead(cfg.features, fc.channels, cfg.keypoint_width, ups)
            if fc.enabled:
                self.fusion = Fusion(fc, cfg.num_classes)
        # shared components draw first so a mask-only model initializes identically
        gen = torch.Generator().manual_seed(seed)
        for part in (self.backbone, self.box_head, self.mask_head, self.keypoint_head, self.fusion):
            if part is not None:
                init_parameters(part, gen)

    @property
    def mask_size(self):
        return self.config.fusion.mask_out_size if self.fusion is not None else 28

    def features(self, images):
        return self.backbone(images)

    def heads(self, features, boxes, batch_index=None, mask_rois=None):
        """Run all heads. ``mask_rois`` selects the RoIs that also get mask/keypoint heads."""
        rois = roi_extract(features, boxes, batch_index, self.config.roi_size)
        class_logits, box_deltas = self.box_head(rois)
        out = HeadOutputs(class_logits, box_deltas)
        sel = rois if mask_rois is None else rois[mask_rois]
        if sel.shape[0] == 0:
            return out
        out.mask_logits = self.mask_head(sel)
        out.fused_mask_logits = out.mask_logits
        if self.keypoint_head is not None:
            out.keypoint_logits = self.keypoint_head(sel)
            if self.fusion is not None:
                out.fused_mask_logits, out.keypoint_sum = self.fusion(out.keypoint_logits, out.mask_logits)
        return out

    def forward(self, images, boxes, batch_index=None, mask_rois=None):
        return self.heads(self.features(images), boxes, batch_index, mask_rois)
