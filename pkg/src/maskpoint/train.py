"""Training loop, inference and evaluation."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .contour import decode_heatmaps, flip_point_set
from .errors import DivergedError
from .geometry import box_iou, clip_box, decode_box_deltas
from .losses import loss_box, loss_cls, loss_keypoint, loss_mask, total_loss, weighted_sum
from .metrics import EvalReport, GroundTruth, Prediction, contour_only_eval, keypoint_pck, mask_ap, mask_iou_matrix
from .model import FusionConfig, MaskPointRCNN, ModelConfig
from .proposals import assign_targets, grid_boxes, sample_proposals
from .synth import InstanceAnnotation, SceneRecord

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_images: int = 4
    iterations: int = 800
    lr_drop_fraction: float = 0.75
    lr_drop_factor: float = 0.1
    flip_prob: float = 0.5
    fusion: FusionConfig = field(default_factory=FusionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    per_gt: int = 2
    negatives: int = 6
    jitter: float = 0.15
    sampling: str = "uniform"
    epsilon: float = 2.0
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.fusion, dict):
            self.fusion = FusionConfig(**self.fusion)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    def model_config(self, keypoint=True):
        """Architecture config with this run's fusion settings."""
        mc = copy.deepcopy(self.model)
        mc.fusion = copy.deepcopy(self.fusion)
        mc.keypoint = keypoint and mc.keypoint
        return mc

    def lr_at(self, iteration):
        drop_at = int(self.lr_drop_fraction * self.iterations)
        return self.learning_rate * (self.lr_drop_factor if iteration >= drop_at else 1.0)


@dataclass
class InferConfig:
    score_threshold: float = 0.5
    nms_iou: float = 0.5
    scales: tuple = (18.0, 28.0, 42.0)
    stride: int = 6
    mask_threshold: float = 0.5
    chunk: int = 512
    max_detections: int = 50


@dataclass
class DetectionResult:
    boxes: np.ndarray  # (n, 4)
    scores: np.ndarray
    labels: np.ndarray
    masks: np.ndarray  # (n, H, W) bool
    keypoints: np.ndarray  # (n, K, 2)
    keypoint_sums: list = field(default_factory=list, repr=False)  # O_k per detection
    mask_logits: list = field(default_factory=list, repr=False)  # f_m of the labeled class

    def __len__(self):
        return len(self.scores)


def flip_record(rec):
    """Horizontal mirror of a scene, its masks and contour labels."""
    W = rec.width
    instances = []
    for inst in rec.instances:
        top, left, h, w = inst.box
        cps = None
        if inst.contour_points is not None:
            cps, _ = flip_point_set(inst.contour_points, W)
        instances.append(InstanceAnnotation(inst.class_id, (top, W - left - w, h, w), inst.mask[:, ::-1].copy(), cps))
    return SceneRecord(rec.image[:, ::-1].copy(), instances, rec.scene_id, rec.seed)


def image_tensor(image, dtype=torch.float32):
    return torch.as_tensor(np.ascontiguousarray(image.transpose(2, 0, 1)), dtype=dtype)


def build_targets(rec, config, seed, need_keypoints=None):
    gt_boxes = [inst.box for inst in rec.instances]
    props = sample_proposals(
        gt_boxes,
        (rec.height, rec.width),
        per_gt=config.per_gt,
        negatives=config.negatives,
        seed=seed,
        jitter=config.jitter,
        num_classes=config.model.num_classes,
        gt_classes=[inst.class_id for inst in rec.instances],
    )
    return assign_targets(props, rec.instances, config.fusion, config.model.num_classes, need_keypoints)


def make_batch(records, config, iteration, need_keypoints=None):
    """Images and RoI targets for one iteration; a pure function of (config.seed, iteration)."""
    rng = np.random.default_rng([config.seed, iteration])
    per_epoch = max(len(records) // config.batch_images, 1)
    epoch, slot = divmod(iteration, per_epoch)
    order = np.random.default_rng([config.seed, 10**6 + epoch]).permutation(len(records))
    picks = order[slot * config.batch_images : (slot + 1) * config.batch_images]
    batch = []
    for i in picks:
        rec = records[int(i)]
        if rng.random() < config.flip_prob:
            rec = flip_record(rec)
        batch.append((rec, build_targets(rec, config, int(rng.integers(2**31)), need_keypoints)))
    return batch


def make_optimizer(model, config):
    return torch.optim.SGD(
        model.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def compute_losses(model, batch, alpha):
    """Forward a batch and return (total tensor, LossBreakdown)."""
    dtype = next(model.parameters()).dtype
    images = torch.stack([image_tensor(rec.image, dtype) for rec, _ in batch])
    boxes, bidx, classes, fg, deltas, masks, heatmaps = [], [], [], [], [], [], []
    offset = 0
    for b, (_, tg) in enumerate(batch):
        n = len(tg.classes)
        boxes.append(tg.boxes)
        bidx.append(np.full(n, b))
        classes.append(tg.classes)
        fg.append(tg.fg + offset)
        full = np.zeros((n, 4))
        full[tg.fg] = tg.box_deltas
        deltas.append(full)
        masks.append(tg.masks)
        if tg.heatmaps is not None:
            heatmaps.append(tg.heatmaps)
        offset += n
    boxes = np.concatenate(boxes)
    classes_t = torch.as_tensor(np.concatenate(classes))
    fg_t = torch.as_tensor(np.concatenate(fg), dtype=torch.long)

    out = model(images, torch.as_tensor(boxes, dtype=dtype), torch.as_tensor(np.concatenate(bidx)), fg_t)
    l_cls = loss_cls(out.class_logits, classes_t)
    l_box = loss_box(out.box_deltas, torch.as_tensor(np.concatenate(deltas), dtype=dtype), classes_t)
    fg_classes = classes_t[fg_t]
    if out.fused_mask_logits is not None:
        l_mask = loss_mask(out.fused_mask_logits, torch.as_tensor(np.concatenate(masks), dtype=dtype), fg_classes)
    else:
        l_mask = out.class_logits.sum() * 0.0
    if out.keypoint_logits is not None and len(heatmaps) == len(batch):
        l_kp = loss_keypoint(out.keypoint_logits, torch.as_tensor(np.concatenate(heatmaps)))
    else:
        l_kp = out.class_logits.sum() * 0.0
    total = weighted_sum(l_cls, l_box, l_mask, l_kp, alpha)
    breakdown = total_loss(l_cls.item(), l_box.item(), l_mask.item(), l_kp.item(), alpha)
    return total, breakdown


def train_step(model, optimizer, batch, config):
    """One SGD-with-momentum step. Returns the pre-update :class:`LossBreakdown`."""
    total, breakdown = compute_losses(model, batch, config.fusion.alpha)
    if not math.isfinite(breakdown.total):
        raise DivergedError(breakdown)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return breakdown


class Trainer:
    """Owns the model, optimizer state and iteration counter for one run."""

    def __init__(self, records, config, keypoint=True, log_file=None):
        if config.deterministic:
            torch.set_num_threads(1)
        self.records = records
        self.config = config
        self.model = MaskPointRCNN(config.model_config(keypoint), seed=config.seed)
        self.optimizer = make_optimizer(self.model, config)
        self.iteration = 0
        self.history = []
        self.log_file = log_file
        labeled = all(inst.contour_points is not None for rec in records for inst in rec.instances)
        # with alpha == 0 the keypoint loss is still reported when labels exist
        self.need_keypoints = keypoint and (config.fusion.alpha > 0 or labeled)

    def step(self):
        cfg = self.config
        for group in self.optimizer.param_groups:
            group["lr"] = cfg.lr_at(self.iteration)
        batch = make_batch(self.records, cfg, self.iteration, self.need_keypoints)
        breakdown = train_step(self.model, self.optimizer, batch, cfg)
        self.history.append(breakdown)
        if self.log_file is not None:
            rec = {"iteration": self.iteration, **breakdown.to_dict()}
            self.log_file.write(json.dumps(rec) + "\n")
            self.log_file.flush()
        self.iteration += 1
        return breakdown

    def run(self, iterations=None, callback=None):
        n = self.config.iterations if iterations is None else iterations
        for _ in range(n):
            b = self.step()
            if callback is not None:
                callback(self.iteration - 1, b)
        return self.history


def _nms(boxes, scores, iou_threshold):
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    ious = box_iou(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] >= iou_threshold
    return np.asarray(keep, dtype=np.int64)


def paste_mask(probs, box, height, width, threshold=0.5):
    """Threshold a box-registered probability grid and paste it into a full-image mask."""
    N = probs.shape[-1]
    top, left, h, w = box
    out = np.zeros((height, width), dtype=bool)
    r0, r1 = max(int(np.floor(top)), 0), min(int(np.ceil(top + h)), height)
    c0, c1 = max(int(np.floor(left)), 0), min(int(np.ceil(left + w)), width)
    if r0 >= r1 or c0 >= c1:
        return out
    ri = np.floor((np.arange(r0, r1) + 0.5 - top) / h * N).astype(int)
    ci = np.floor((np.arange(c0, c1) + 0.5 - left) / w * N).astype(int)
    vr = (ri >= 0) & (ri < N)
    vc = (ci >= 0) & (ci < N)
    sub = probs[np.clip(ri, 0, N - 1)][:, np.clip(ci, 0, N - 1)] >= threshold
    sub &= vr[:, None] & vc[None, :]
    out[r0:r1, c0:c1] = sub
    return out


@torch.no_grad()
def infer(model, image, config=None):
    """Detect, segment and locate contour points in one (H, W, 3) image."""
    config = config or InferConfig()
    model.eval()
    dtype = next(model.parameters()).dtype
    H, W = image.shape[:2]
    C = model.config.num_classes
    feats = model.features(image_tensor(image, dtype)[None])
    cands = grid_boxes((H, W), config.scales, config.stride)

    scores, labels, refined = [], [], []
    for s in range(0, len(cands), config.chunk):
        chunk = cands[s : s + config.chunk]
        out = model.heads(feats, torch.as_tensor(chunk, dtype=dtype), mask_rois=torch.zeros(0, dtype=torch.long))
        prob = F.softmax(out.class_logits, dim=1)[:, :C].numpy()
        lab = prob.argmax(1)
        sc = prob[np.arange(len(lab)), lab]
        deltas = out.box_deltas.numpy().reshape(-1, C, 4)
        for i in np.flatnonzero(sc > config.score_threshold):
            refined.append(clip_box(decode_box_deltas(chunk[i], deltas[i, lab[i]]), H, W))
            scores.append(float(sc[i]))
            labels.append(int(lab[i]))
    K = model.config.fusion.channels if model.keypoint_head is not None else 0
    if not scores:
        return DetectionResult(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64),
                               np.zeros((0, H, W), dtype=bool), np.zeros((0, K, 2)))
    refined, scores, labels = np.asarray(refined), np.asarray(scores), np.asarray(labels)
    keep = _nms(refined, scores, config.nms_iou)[: config.max_detections]
    boxes, scores, labels = refined[keep], scores[keep], labels[keep]

    out = model.heads(feats, torch.as_tensor(boxes, dtype=dtype))
    probs = torch.sigmoid(out.fused_mask_logits).numpy()
    masks = np.stack([paste_mask(probs[i, labels[i]], boxes[i], H, W, config.mask_threshold) for i in range(len(boxes))])
    if out.keypoint_logits is not None:
        kps = np.stack([decode_heatmaps(out.keypoint_logits[i].numpy(), boxes[i]) for i in range(len(boxes))])
    else:
        kps = np.zeros((len(boxes), 0, 2))
    if out.keypoint_sum is not None:
        sums = [out.keypoint_sum[i, 0].numpy() for i in range(len(boxes))]
    elif out.keypoint_logits is not None:
        sums = [out.keypoint_logits[i].sum(0).numpy() for i in range(len(boxes))]
    else:
        sums = [None] * len(boxes)
    logits = [out.mask_logits[i, labels[i]].numpy() for i in range(len(boxes))]
    return DetectionResult(boxes, scores, labels, masks, kps, sums, logits)


def evaluate(model, records, infer_config=None, pck_fraction=0.05):
    """Mask AP, AP50, keypoint PCK and contour-only AP over ``records``."""
    preds, gts, contour_preds = [], [], []
    hits, total = 0.0, 0
    k = model.config.fusion.k
    for rec in records:
        det = infer(model, rec.image, infer_config)
        preds.append([Prediction(int(l), float(s), m) for l, s, m in zip(det.labels, det.scores, det.masks)])
        gts.append([GroundTruth(inst.class_id, inst.mask) for inst in rec.instances])
        if det.keypoints.shape[1] >= 3:
            contour_preds.append([(int(l), float(s), det.keypoints[i, :k])
                                  for i, (l, s) in enumerate(zip(det.labels, det.scores))])
        else:
            contour_preds.append([])
        # PCK over detections matched one-to-one to labeled GT by mask IoU >= 0.5
        ious = mask_iou_matrix(list(det.masks), [inst.mask for inst in rec.instances])
        used = set()
        for i in np.argsort(-det.scores, kind="stable"):
            if not ious.size:
                break
            j = int(np.argmax(ious[i]))
            if ious[i, j] < 0.5 or j in used:
                continue
            used.add(j)
            cps = rec.instances[j].contour_points
            if cps is None or det.keypoints.shape[1] == 0:
                continue
            gt_pts = cps.all_points() if model.config.fusion.use_center else np.asarray(cps.points)
            if len(gt_pts) != det.keypoints.shape[1]:
                continue
            _, _, h, w = rec.instances[j].box
            radius = pck_fraction * math.hypot(h, w)
            hits += keypoint_pck(det.keypoints[i], gt_pts, radius) * len(gt_pts)
            total += len(gt_pts)
    ap = mask_ap(preds, gts)
    contour_ap = contour_only_eval(contour_preds, gts)["mask_ap"] if any(contour_preds) else 0.0
    return EvalReport(
        mask_ap=ap["mask_ap"],
        ap50=ap["ap50"],
        keypoint_pck=hits / total if total else 0.0,
        contour_only_ap=contour_ap,
        per_class=ap["per_class"],
    )


def gt_contour_eval(records, M=56, kinds=None):
    """Contour-only AP when the keypoints come from ground-truth heatmaps.

    Each labeled instance's points are encoded over its box, decoded, and
    refilled into a mask; ``kinds`` restricts to those class ids.
    """
    from .contour import encode_points

    preds, gts = [], []
    for rec in records:
        insts = [i for i in rec.instances if kinds is None or i.class_id in kinds]
        if not insts:
            continue
        gts.append([GroundTruth(i.class_id, i.mask) for i in insts])
        img = []
        for inst in insts:
            pts = np.asarray(inst.contour_points.points)
            decoded = decode_heatmaps(encode_points(pts, inst.box, M), inst.box)
            img.append((inst.class_id, 1.0, decoded))
        preds.append(img)
    return contour_only_eval(preds, gts)
