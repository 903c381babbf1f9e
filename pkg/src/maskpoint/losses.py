"""Training losses and their weighted combination."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import LabelError, TargetError


@dataclass
class LossBreakdown:
    l_cls: float
    l_box: float
    l_mask: float
    l_keypoint: float
    alpha: float
    total: float

    def to_dict(self):
        return asdict(self)


def weighted_sum(l_cls, l_box, l_mask, l_keypoint, alpha):
    return l_cls + l_box + l_mask + alpha * l_keypoint


def total_loss(l_cls, l_box, l_mask, l_keypoint, alpha):
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    parts = [float(v) for v in (l_cls, l_box, l_mask, l_keypoint)]
    return LossBreakdown(*parts, float(alpha), weighted_sum(*parts, float(alpha)))


def loss_cls(class_logits, target_class):
    """Softmax cross-entropy; the last logit index is background."""
    logits = torch.as_tensor(class_logits)
    if logits.dim() == 1:
        logits = logits[None]
    target = torch.as_tensor(target_class, dtype=torch.long).reshape(-1)
    if target.numel() and ((target < 0) | (target >= logits.shape[1])).any():
        raise TargetError(f"class targets must lie in [0, {logits.shape[1] - 1}]")
    return F.cross_entropy(logits, target)


def smooth_l1(x, beta=1.0):
    a = x.abs()
    return torch.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def loss_box(box_deltas, target_deltas, target_class):
    """Smooth-L1 over the target class's (tx, ty, tw, th), summed per RoI, averaged over foreground RoIs.

    ``target_class`` equal to the number of classes marks background and contributes nothing.
    """
    deltas = torch.as_tensor(box_deltas)
    if deltas.dim() == 1:
        deltas = deltas[None]
    num_classes = deltas.shape[1] // 4
    target_class = torch.as_tensor(target_class, dtype=torch.long).reshape(-1)
    target = torch.as_tensor(target_deltas, dtype=deltas.dtype).reshape(-1, 4)
    fg = target_class < num_classes
    if not fg.any():
        return deltas.sum() * 0.0
    rows = torch.nonzero(fg).squeeze(1)
    pred = deltas.reshape(-1, num_classes, 4)[rows, target_class[rows]]
    return smooth_l1(pred - target[rows]).sum(dim=1).mean()


def loss_mask(mask_logits, target_mask, target_class):
    """Mean binary cross-entropy on the target-class channel of each RoI."""
    logits = torch.as_tensor(mask_logits)
    target_class = torch.as_tensor(target_class, dtype=torch.long).reshape(-1)
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    chosen = logits[torch.arange(logits.shape[0]), target_class]
    return F.binary_cross_entropy_with_logits(chosen, torch.as_tensor(target_mask, dtype=chosen.dtype))


def loss_keypoint(keypoint_logits, heatmap_label):
    """Spatial softmax cross-entropy per channel, averaged over channels (and RoIs).

    Accepts (K, M, M) or (R, K, M, M) logits with matching one-hot labels.
    """
    logits = torch.as_tensor(keypoint_logits)
    label = torch.as_tensor(heatmap_label)
    if logits.shape != label.shape:
        raise LabelError(f"label shape {tuple(label.shape)} != logits shape {tuple(logits.shape)}")
    if logits.dim() == 3:
        logits, label = logits[None], label[None]
    R, K = logits.shape[:2]
    if R == 0:
        return logits.sum() * 0.0
    flat_label = label.reshape(R * K, -1)
    if not ((flat_label == 0) | (flat_label == 1)).all() or not (flat_label.sum(dim=1) == 1).all():
        raise LabelError("every heatmap channel must be one-hot")
    target = flat_label.argmax(dim=1)
    return F.cross_entropy(logits.reshape(R * K, -1), target)
