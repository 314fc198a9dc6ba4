"""
Single-stage anchor head, target assignment, focal + smooth-L1 loss, box
decoding with per-class NMS, and VOC-style all-point mAP.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ffpf.backbone import PyramidFeatures
from ffpf.exceptions import DatasetError, DimensionError
from ffpf.layers import Conv2d, Module, ModuleList
from ffpf.models import AnchorSpec, BoxDetection, EvaluationResult, ModelConfig
from ffpf.tensor import Tensor, apply_op, relu

logger = logging.getLogger(__name__)

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
SMOOTH_L1_BETA = 1.0 / 9.0
MAX_DELTA_WH = float(np.log(1000.0 / 16))


# --- anchors ---


@dataclass(frozen=True)
class Anchor:
    cx: float
    cy: float
    width: float
    height: float
    level: int

    @property
    def box(self) -> tuple[float, float, float, float]:
        hw, hh = self.width / 2, self.height / 2
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)


@dataclass
class AnchorGrid:
    """All anchors of an image, flattened level by level, then (y, x, scale)."""

    boxes: np.ndarray  # [A, 4] x1 y1 x2 y2
    levels: np.ndarray  # [A] pyramid level 2..5

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, index: int) -> Anchor:
        x1, y1, x2, y2 = self.boxes[index]
        return Anchor(
            cx=float((x1 + x2) / 2),
            cy=float((y1 + y2) / 2),
            width=float(x2 - x1),
            height=float(y2 - y1),
            level=int(self.levels[index]),
        )


def generate_anchors(
    feature_sizes: Sequence[tuple[int, int]],
    strides: Sequence[int],
    spec: AnchorSpec,
) -> AnchorGrid:
    boxes: list[np.ndarray] = []
    levels: list[np.ndarray] = []
    for level, ((h, w), stride) in enumerate(zip(feature_sizes, strides), start=2):
        sizes = np.array(spec.scales()) * stride
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cx = ((xs + 0.5) * stride)[..., None]
        cy = ((ys + 0.5) * stride)[..., None]
        half = sizes / 2
        level_boxes = np.stack(
            np.broadcast_arrays(cx - half, cy - half, cx + half, cy + half), axis=-1
        ).reshape(-1, 4)
        boxes.append(level_boxes)
        levels.append(np.full(len(level_boxes), level))
    return AnchorGrid(boxes=np.concatenate(boxes), levels=np.concatenate(levels))


# --- head ---


class DetectionHead(Module):
    """Shared 3x3 conv tower, then A*K class logits and A*4 box deltas."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        c = config.neck_channels
        self.num_classes = config.num_classes
        self.num_anchors = config.anchor.num_anchors
        self.tower = ModuleList([Conv2d(c, c, 3, bias=True, init="normal:0.01") for _ in range(config.head_convs)])
        self.cls_conv = Conv2d(
            c, self.num_anchors * self.num_classes, 3, bias=True, init="normal:0.01", bias_init="prior"
        )
        self.box_conv = Conv2d(c, self.num_anchors * 4, 3, bias=True, init="normal:0.01")

    def forward(self, features: PyramidFeatures) -> list[tuple[Tensor, Tensor]]:
        return head_forward(features, self)


def head_forward(features: PyramidFeatures, params: DetectionHead) -> list[tuple[Tensor, Tensor]]:
    outputs = []
    for feature in features:
        x = feature
        for conv in params.tower:
            x = relu(conv(x))
        outputs.append((params.cls_conv(x), params.box_conv(x)))
    return outputs


def _flatten_level(t: np.ndarray, per_anchor: int) -> np.ndarray:
    n, _, h, w = t.shape
    return t.transpose(0, 2, 3, 1).reshape(n, -1, per_anchor)


def _unflatten_level(flat: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = shape
    return flat.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def flatten_outputs(
    outputs: list[tuple[Tensor, Tensor]], num_classes: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-level head maps -> ([N, A, K] logits, [N, A, 4] deltas)."""
    cls = np.concatenate([_flatten_level(c.data, num_classes) for c, _ in outputs], axis=1)
    box = np.concatenate([_flatten_level(b.data, 4) for _, b in outputs], axis=1)
    return cls, box


# --- geometry ---


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    return float(iou_matrix(np.asarray([a], dtype=np.float64), np.asarray([b], dtype=np.float64))[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [P, 4] and [Q, 4] boxes -> [P, Q]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + bw / 2
    by = boxes[:, 1] + bh / 2
    return np.stack([(bx - ax) / aw, (by - ay) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    dw = np.clip(deltas[:, 2], -MAX_DELTA_WH, MAX_DELTA_WH)
    dh = np.clip(deltas[:, 3], -MAX_DELTA_WH, MAX_DELTA_WH)
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


# --- assignment ---

IGNORE, NEGATIVE, POSITIVE = -1, 0, 1


@dataclass
class Assignment:
    state: np.ndarray  # [A] IGNORE / NEGATIVE / POSITIVE
    classes: np.ndarray  # [A] class id, meaningful where POSITIVE
    box_targets: np.ndarray  # [A, 4] encoded deltas, meaningful where POSITIVE

    @property
    def num_positive(self) -> int:
        return int((self.state == POSITIVE).sum())


def assign_targets(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    pos_thr: float = 0.5,
    neg_thr: float = 0.4,
) -> Assignment:
    """IoU >= pos_thr positive, < neg_thr negative, in between ignored; each gt's
    best anchor (lowest index on ties) is forced positive.
    """
    num = len(anchors)
    state = np.full(num, IGNORE, dtype=np.int64)
    classes = np.zeros(num, dtype=np.int64)
    targets = np.zeros((num, 4), dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if len(gt_boxes) == 0:
        state[:] = NEGATIVE
        return Assignment(state, classes, targets)

    overlaps = iou_matrix(anchors, gt_boxes)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(num), best_gt]
    state[best_iou < neg_thr] = NEGATIVE
    state[best_iou >= pos_thr] = POSITIVE
    for j in range(len(gt_boxes)):
        a = int(overlaps[:, j].argmax())
        state[a] = POSITIVE
        best_gt[a] = j

    pos = state == POSITIVE
    classes[pos] = gt_classes[best_gt[pos]]
    targets[pos] = encode_boxes(anchors[pos], gt_boxes[best_gt[pos]])
    return Assignment(state, classes, targets)


# --- losses ---


def focal_loss_terms(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid focal loss and its gradient w.r.t. the logits, elementwise."""
    log_p = -np.logaddexp(0, -logits)
    log_1mp = -np.logaddexp(0, logits)
    p = np.exp(log_p)
    pos_loss = -FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * log_p
    neg_loss = -(1 - FOCAL_ALPHA) * p**FOCAL_GAMMA * log_1mp
    pos_grad = FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * (FOCAL_GAMMA * p * log_p + p - 1)
    neg_grad = (1 - FOCAL_ALPHA) * p**FOCAL_GAMMA * (p - FOCAL_GAMMA * (1 - p) * log_1mp)
    loss = np.where(targets > 0, pos_loss, neg_loss)
    grad = np.where(targets > 0, pos_grad, neg_grad)
    return loss, grad


def smooth_l1_terms(diff: np.ndarray, beta: float = SMOOTH_L1_BETA) -> tuple[np.ndarray, np.ndarray]:
    small = np.abs(diff) < beta
    loss = np.where(small, 0.5 * diff * diff / beta, np.abs(diff) - 0.5 * beta)
    grad = np.where(small, diff / beta, np.sign(diff))
    return loss, grad


def detection_loss(
    outputs: list[tuple[Tensor, Tensor]],
    assignments: Sequence[Assignment],
    num_classes: int,
) -> Tensor:
    """Focal loss over non-ignored anchors plus smooth-L1 over positives, both
    divided by the batch's positive count (at least 1).
    """
    cls_flat, box_flat = flatten_outputs(outputs, num_classes)
    n, total, _ = cls_flat.shape
    if len(assignments) != n:
        raise DimensionError(f"detection_loss: {len(assignments)} assignments for batch of {n}")
    state = np.stack([a.state for a in assignments])
    if state.shape[1] != total:
        raise DimensionError(f"detection_loss: {state.shape[1]} anchors assigned, head has {total}")
    pos = state == POSITIVE
    valid = (state != IGNORE)[..., None]
    onehot = np.zeros_like(cls_flat, dtype=np.float64)
    for i, a in enumerate(assignments):
        onehot[i, pos[i], a.classes[pos[i]]] = 1.0
    box_targets = np.stack([a.box_targets for a in assignments])
    norm = max(1, int(pos.sum()))
    if not pos.any():
        logger.warning("detection_loss: batch has no positive anchors")

    logits = cls_flat.astype(np.float64)
    cls_loss, cls_grad = focal_loss_terms(logits, onehot)
    diff = box_flat.astype(np.float64) - box_targets
    reg_loss, reg_grad = smooth_l1_terms(diff)
    pos_mask = pos[..., None]
    value = ((cls_loss * valid).sum() + (reg_loss * pos_mask).sum()) / norm
    cls_grad = cls_grad * valid / norm
    reg_grad = reg_grad * pos_mask / norm

    dtype = outputs[0][0].data.dtype
    inputs: list[Tensor] = []
    for c, b in outputs:
        inputs.extend([c, b])

    def _backward(g: np.ndarray) -> list[np.ndarray | None]:
        grads: list[np.ndarray | None] = []
        start = 0
        for c, b in outputs:
            _, _, h, w = c.shape
            count = h * w * (c.shape[1] // num_classes)
            gc = cls_grad[:, start : start + count] * g
            gb = reg_grad[:, start : start + count] * g
            grads.append(_unflatten_level(gc.reshape(n, h * w, -1), c.shape).astype(dtype))
            grads.append(_unflatten_level(gb.reshape(n, h * w, -1), b.shape).astype(dtype))
            start += count
        return grads

    return apply_op("detection_loss", np.asarray(value, dtype=dtype), inputs, _backward)


# --- inference ---


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy suppression by descending score, lower index first on ties.
    Returns kept indices in selection order.
    """
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep: list[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    overlaps = iou_matrix(boxes, boxes) if len(boxes) else np.zeros((0, 0))
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= overlaps[i] > iou_thr
    return np.asarray(keep, dtype=np.int64)


def decode_and_nms(
    cls_logits: np.ndarray,
    deltas: np.ndarray,
    anchors: np.ndarray,
    image_size: tuple[int, int],
    score_thr: float = 0.05,
    iou_thr: float = 0.5,
    max_det: int = 100,
    pre_nms_top: int = 1000,
    image_id: str = "",
) -> list[BoxDetection]:
    """One image: [A, K] logits, [A, 4] deltas -> clipped, per-class NMS'd boxes."""
    height, width = image_size
    scores = 1.0 / (1.0 + np.exp(-cls_logits.astype(np.float64)))
    boxes = decode_boxes(anchors, deltas.astype(np.float64))
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, height)
    nondegenerate = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])

    found: list[tuple[float, int, int, np.ndarray]] = []
    for k in range(scores.shape[1]):
        candidates = np.flatnonzero((scores[:, k] > score_thr) & nondegenerate)
        if not len(candidates):
            continue
        cand_scores = scores[candidates, k]
        ranked = np.lexsort((candidates, -cand_scores))[:pre_nms_top]
        candidates = candidates[ranked]
        kept = nms(boxes[candidates], scores[candidates, k], iou_thr)
        for idx in candidates[kept]:
            found.append((float(scores[idx, k]), k, int(idx), boxes[idx]))

    found.sort(key=lambda item: (-item[0], item[1], item[2]))
    return [
        BoxDetection(
            class_id=k,
            score=min(max(score, 0.0), 1.0),
            box=tuple(float(v) for v in box),
            image_id=image_id,
        )
        for score, k, _, box in found[:max_det]
    ]


# --- evaluation ---


@dataclass
class GroundTruth:
    boxes: np.ndarray  # [G, 4]
    classes: np.ndarray  # [G]


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the interpolated (monotone envelope) precision-recall curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]).sum())


def evaluate_map(
    detections: Sequence[BoxDetection],
    ground_truth: dict[str, GroundTruth],
    num_classes: int,
    iou_thr: float = 0.5,
) -> EvaluationResult:
    """Score detections against ground truth with all-point interpolated AP.

    Detections of each class are matched greedily, highest score first (ties
    broken by image order), and each ground-truth box absorbs at most one of
    them. Classes without ground truth are left out of the mean.

    Args:
        detections: Detections over the whole split, in any order.
        ground_truth: Boxes and class ids per image id.
        num_classes: Number of foreground classes.
        iou_thr: Minimum IoU for a detection to count as a true positive.

    Returns:
        AP per class with ground truth, their mean, and the detection count.
        A class with ground truth but no detections scores 0.

    Raises:
        DatasetError: A detection names an unknown class or image id.
    """
    for det in detections:
        if not 0 <= det.class_id < num_classes:
            raise DatasetError(f"unknown class id {det.class_id} (num_classes={num_classes})")
        if det.image_id not in ground_truth:
            raise DatasetError(f"detection for unknown image id {det.image_id!r}")

    image_order = {image_id: i for i, image_id in enumerate(ground_truth)}
    per_class: dict[int, float] = {}
    for k in range(num_classes):
        num_gt = sum(int((gt.classes == k).sum()) for gt in ground_truth.values())
        if num_gt == 0:
            logger.warning("class %d has no ground-truth boxes; excluded from mAP", k)
            continue
        ranked = sorted(
            (d for d in detections if d.class_id == k),
            key=lambda d: (-d.score, image_order[d.image_id]),
        )
        matched = {image_id: np.zeros(len(gt.boxes), dtype=bool) for image_id, gt in ground_truth.items()}
        tp = np.zeros(len(ranked))
        for i, det in enumerate(ranked):
            gt = ground_truth[det.image_id]
            of_class = np.flatnonzero(gt.classes == k)
            if not len(of_class):
                continue
            overlaps = iou_matrix(np.asarray([det.box]), gt.boxes[of_class])[0]
            best = int(overlaps.argmax())
            if overlaps[best] >= iou_thr and not matched[det.image_id][of_class[best]]:
                matched[det.image_id][of_class[best]] = True
                tp[i] = 1.0
        if not len(ranked):
            per_class[k] = 0.0
            continue
        tp_cum = np.cumsum(tp)
        fp_cum = np.cumsum(1.0 - tp)
        recall = tp_cum / num_gt
        precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
        per_class[k] = average_precision(recall, precision)

    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvaluationResult(per_class_ap=per_class, map=mean, num_detections=len(detections))


# --- dump format ---


def format_detection(det: BoxDetection) -> str:
    x1, y1, x2, y2 = det.box
    return f"{det.image_id} {det.class_id} {det.score:.6f} {x1:.6f} {y1:.6f} {x2:.6f} {y2:.6f}"


def write_detections(path: Path, detections: Sequence[BoxDetection]) -> None:
    path.write_text("".join(format_detection(d) + "\n" for d in detections))


def read_detections(path: Path) -> list[BoxDetection]:
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        image_id, class_id, score, *box = line.split()
        out.append(
            BoxDetection(
                image_id=image_id,
                class_id=int(class_id),
                score=float(score),
                box=tuple(float(v) for v in box),
            )
        )
    return out
