#!/usr/bin/env python3
"""
SSD default boxes, box coding and non-maximum suppression
Boxes are (cx, cy, w, h) or (xmin, ymin, xmax, ymax) fractions of the image.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from tensor_utils import ShapeError

logger = logging.getLogger(__name__)

# --- Configuration ---
VARIANCES = (0.1, 0.2)
MIN_SCALE = 0.2
MAX_SCALE = 0.9
SSD300_SIDES = (38, 19, 10, 5, 3, 1)
SSD300_BOXES = (4, 6, 6, 6, 4, 4)
SCORE_THRESHOLD = 0.01
NMS_IOU_THRESHOLD = 0.45
TOP_K = 200


def linear_scales(n_maps: int, min_scale: float = MIN_SCALE, max_scale: float = MAX_SCALE) -> List[float]:
    """Scales for each map plus one extra, spaced evenly from min to max"""
    step = (max_scale - min_scale) / (n_maps - 1) if n_maps > 1 else 0.0
    return [min_scale + step * k for k in range(n_maps + 1)]


def ratios_for(boxes: int) -> Tuple[float, ...]:
    """Aspect ratios besides the extra-scale square box"""
    if boxes == 4:
        return (1.0, 2.0, 0.5)
    if boxes == 6:
        return (1.0, 2.0, 0.5, 3.0, 1.0 / 3.0)
    raise ShapeError(f"no aspect-ratio set yields {boxes} boxes per cell")


@dataclass(frozen=True)
class DefaultBoxConfig:
    sides: Tuple[int, ...] = SSD300_SIDES
    boxes_per_map: Tuple[int, ...] = SSD300_BOXES
    scales: Tuple[float, ...] = field(default_factory=lambda: tuple(linear_scales(len(SSD300_SIDES))))
    image_size: int = 300

    def __post_init__(self):
        if len(self.sides) != len(self.boxes_per_map):
            raise ShapeError(f"{len(self.sides)} map sides but {len(self.boxes_per_map)} box counts")
        if len(self.scales) != len(self.sides) + 1:
            raise ShapeError(f"need {len(self.sides) + 1} scales (one extra), got {len(self.scales)}")
        for boxes in self.boxes_per_map:
            if len(ratios_for(boxes)) + 1 != boxes:
                raise ShapeError(f"ratio set does not produce {boxes} boxes")

    @classmethod
    def from_sides(cls, sides: Sequence[int], boxes_per_map: Sequence[int] = SSD300_BOXES,
                   image_size: int = 300) -> 'DefaultBoxConfig':
        return cls(tuple(sides), tuple(boxes_per_map), tuple(linear_scales(len(sides))), image_size)

    def total_boxes(self) -> int:
        return sum(s * s * b for s, b in zip(self.sides, self.boxes_per_map))


def generate_default_boxes(config: DefaultBoxConfig) -> np.ndarray:
    """
    Default boxes [M, 4] as (cx, cy, w, h), clipped to [0, 1].

    Cells are visited row-major within each map and maps in order; per cell
    the ratio boxes come first, followed by the extra-scale square box.
    """
    rows = []
    for k, (side, boxes) in enumerate(zip(config.sides, config.boxes_per_map)):
        scale, extra = config.scales[k], math.sqrt(config.scales[k] * config.scales[k + 1])
        shapes = [(scale * math.sqrt(r), scale / math.sqrt(r)) for r in ratios_for(boxes)]
        shapes.append((extra, extra))
        for i in range(side):
            for j in range(side):
                cx, cy = (j + 0.5) / side, (i + 0.5) / side
                rows.extend((cx, cy, w, h) for w, h in shapes)
    defaults = np.clip(np.array(rows, dtype=np.float64), 0.0, 1.0)
    logger.debug(f"Generated {len(defaults)} default boxes over {len(config.sides)} maps")
    return defaults


def center_to_corners(boxes: np.ndarray) -> np.ndarray:
    half = boxes[:, 2:] / 2
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def corners_to_center(boxes: np.ndarray) -> np.ndarray:
    wh = boxes[:, 2:] - boxes[:, :2]
    return np.concatenate([boxes[:, :2] + wh / 2, wh], axis=1)


def decode_boxes(loc: np.ndarray, defaults: np.ndarray, variances: Tuple[float, float] = VARIANCES,
                 clip: bool = True) -> np.ndarray:
    """Apply (dcx, dcy, dw, dh) regressions to default boxes; returns corner boxes"""
    loc = np.asarray(loc, dtype=np.float64)
    if loc.shape != defaults.shape or loc.ndim != 2 or loc.shape[1] != 4:
        raise ShapeError(f"deltas {list(loc.shape)} do not match defaults {list(defaults.shape)}")
    v1, v2 = variances
    centers = defaults[:, :2] + loc[:, :2] * v1 * defaults[:, 2:]
    sizes = defaults[:, 2:] * np.exp(loc[:, 2:] * v2)
    corners = center_to_corners(np.concatenate([centers, sizes], axis=1))
    return np.clip(corners, 0.0, 1.0) if clip else corners


def encode_boxes(corners: np.ndarray, defaults: np.ndarray,
                 variances: Tuple[float, float] = VARIANCES) -> np.ndarray:
    """Inverse of decode_boxes (without clipping) for boxes with w, h > 0"""
    corners = np.asarray(corners, dtype=np.float64)
    if corners.shape != defaults.shape:
        raise ShapeError(f"boxes {list(corners.shape)} do not match defaults {list(defaults.shape)}")
    v1, v2 = variances
    center = corners_to_center(corners)
    if np.any(center[:, 2:] <= 0):
        raise ShapeError("boxes must have positive width and height")
    dxy = (center[:, :2] - defaults[:, :2]) / (v1 * defaults[:, 2:])
    dwh = np.log(center[:, 2:] / defaults[:, 2:]) / v2
    return np.concatenate([dxy, dwh], axis=1)


def box_area(boxes: np.ndarray) -> np.ndarray:
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


def iou(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise IoU [N, M] of corner-form boxes"""
    lt = np.maximum(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = np.minimum(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(boxes1)[:, None] + box_area(boxes2)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = NMS_IOU_THRESHOLD,
        top_k: Optional[int] = TOP_K) -> np.ndarray:
    """
    Greedy suppression in descending score order, ties broken by lower
    index; a box is dropped when its IoU with a kept box exceeds the threshold.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4 or len(boxes) != len(scores):
        raise ShapeError(f"{len(boxes)} boxes but {len(scores)} scores")
    order = np.argsort(-scores, kind='stable')
    keep: List[int] = []
    while order.size:
        best = order[0]
        keep.append(int(best))
        if top_k is not None and len(keep) >= top_k:
            break
        rest = order[1:]
        overlaps = iou(boxes[best:best + 1], boxes[rest])[0]
        order = rest[overlaps <= iou_threshold]
    return np.array(keep, dtype=np.int64)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def flatten_head_outputs(outputs: Dict[str, np.ndarray], num_classes: int,
                         n_maps: int = len(SSD300_SIDES)) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gather loc{i}/conf{i} maps of one image into [M, 4] deltas and [M, C]
    logits in default-box order (row-major cells, boxes within a cell).
    """
    locs, confs = [], []
    for i in range(n_maps):
        loc, conf = outputs[f"loc{i}"][0], outputs[f"conf{i}"][0]
        locs.append(np.moveaxis(loc, 0, -1).reshape(-1, 4))
        confs.append(np.moveaxis(conf, 0, -1).reshape(-1, num_classes))
    return np.concatenate(locs), np.concatenate(confs)


def postprocess_detections(loc: np.ndarray, conf_logits: np.ndarray, defaults: np.ndarray,
                           score_threshold: float = SCORE_THRESHOLD, iou_threshold: float = NMS_IOU_THRESHOLD,
                           top_k: int = TOP_K) -> List[Dict]:
    """Decode, run per-class NMS (class 0 is background) and keep the top_k scores overall"""
    if len(loc) != len(conf_logits):
        raise ShapeError(f"{len(loc)} box deltas but {len(conf_logits)} score rows")
    boxes = decode_boxes(loc, defaults)
    scores = _softmax(np.asarray(conf_logits, dtype=np.float64))
    detections = []
    for c in range(1, scores.shape[1]):
        candidates = np.flatnonzero(scores[:, c] > score_threshold)
        if candidates.size == 0:
            continue
        kept = candidates[nms(boxes[candidates], scores[candidates, c], iou_threshold, top_k)]
        detections.extend({'class_id': c, 'score': float(scores[i, c]), 'box': boxes[i].tolist()} for i in kept)
    detections.sort(key=lambda d: -d['score'])
    return detections[:top_k]
