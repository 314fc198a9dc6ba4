"""
The FFPF detector: F-ResNet backbone, BS-FPN (or plain FPN) neck, anchor head.
"""

from typing import Sequence

import numpy as np

from ffpf.backbone import FResNet
from ffpf.detect import (
    AnchorGrid,
    DetectionHead,
    GroundTruth,
    assign_targets,
    decode_and_nms,
    detection_loss,
    flatten_outputs,
    generate_anchors,
)
from ffpf.layers import Module
from ffpf.models import BoxDetection, ModelConfig
from ffpf.pyramid import build_neck
from ffpf.tensor import Tensor


class FFPF(Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.backbone = FResNet(config)
        self.neck = build_neck(config, self.backbone.out_channels)
        self.head = DetectionHead(config)
        self._anchor_cache: dict[tuple[int, int], AnchorGrid] = {}
        self.initialize(config.seed)

    def forward(self, images: Tensor) -> list[tuple[Tensor, Tensor]]:
        return self.head(self.neck(self.backbone(images)))

    def anchors(self, image_size: tuple[int, int]) -> AnchorGrid:
        if image_size not in self._anchor_cache:
            h, w = image_size
            sizes = [(h // s, w // s) for s in self.config.strides]
            self._anchor_cache[image_size] = generate_anchors(
                sizes, self.config.strides, self.config.anchor
            )
        return self._anchor_cache[image_size]

    def loss(self, images: Tensor, targets: Sequence[GroundTruth]) -> Tensor:
        anchors = self.anchors(images.shape[2:]).boxes
        spec = self.config.anchor
        assignments = [
            assign_targets(anchors, t.boxes, t.classes, spec.pos_iou, spec.neg_iou)
            for t in targets
        ]
        return detection_loss(self(images), assignments, self.config.num_classes)

    def predict(
        self,
        images: Tensor,
        image_ids: Sequence[str],
        score_thr: float = 0.05,
        iou_thr: float = 0.5,
        max_det: int = 100,
    ) -> list[list[BoxDetection]]:
        image_size = images.shape[2:]
        anchors = self.anchors(image_size).boxes
        cls, box = flatten_outputs(self(images), self.config.num_classes)
        return [
            decode_and_nms(
                cls[i],
                box[i],
                anchors,
                image_size,
                score_thr=score_thr,
                iou_thr=iou_thr,
                max_det=max_det,
                image_id=image_ids[i],
            )
            for i in range(len(image_ids))
        ]


def forward_snapshot(model: FFPF, images: Tensor) -> list[np.ndarray]:
    """Head outputs as plain arrays, for bit-exact comparisons."""
    return [a.data.copy() for pair in model(images) for a in pair]
