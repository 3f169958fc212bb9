#!/usr/bin/env python3
"""
Tests for SSD default boxes, box coding and NMS
"""

import math

import numpy as np
import pytest

from ssd_detection import (DefaultBoxConfig, center_to_corners, decode_boxes, encode_boxes, flatten_head_outputs,
                           generate_default_boxes, iou, linear_scales, nms, postprocess_detections)
from tensor_utils import ShapeError, philox_generator


def test_ssd300_anchor_counts():
    config = DefaultBoxConfig()
    boxes = generate_default_boxes(config)
    assert len(boxes) == config.total_boxes() == 8732
    first = generate_default_boxes(DefaultBoxConfig.from_sides([38], [4]))
    assert len(first) == 5776
    assert boxes.min() >= 0.0 and boxes.max() <= 1.0


def test_single_cell_map_is_centered():
    boxes = generate_default_boxes(DefaultBoxConfig.from_sides([1], [4]))
    assert boxes.shape == (4, 4)
    assert np.allclose(boxes[:, :2], 0.5)


def test_scales_span_min_to_max():
    scales = linear_scales(6)
    assert scales[0] == pytest.approx(0.2)
    assert scales[5] == pytest.approx(0.9)
    assert len(scales) == 7


def test_config_rejects_unsupported_box_counts():
    with pytest.raises(ShapeError):
        DefaultBoxConfig.from_sides([2], [5])
    with pytest.raises(ShapeError):
        DefaultBoxConfig((3, 1), (4,))


def test_decode_zero_deltas_returns_defaults():
    defaults = generate_default_boxes(DefaultBoxConfig())
    decoded = decode_boxes(np.zeros_like(defaults), defaults, clip=False)
    assert np.allclose(decoded, center_to_corners(defaults))


def test_decode_width_doubles():
    defaults = np.array([[0.5, 0.5, 0.2, 0.3]])
    deltas = np.array([[0.0, 0.0, math.log(2) / 0.2, 0.0]])
    corners = decode_boxes(deltas, defaults)
    assert corners[0, 2] - corners[0, 0] == pytest.approx(0.4)
    assert corners[0, 3] - corners[0, 1] == pytest.approx(0.3)


def test_encode_inverts_decode():
    defaults = generate_default_boxes(DefaultBoxConfig())
    deltas = philox_generator(4).uniform(-1, 1, size=defaults.shape)
    restored = encode_boxes(decode_boxes(deltas, defaults, clip=False), defaults)
    assert np.allclose(restored, deltas, atol=1e-6)


def test_decode_rejects_mismatched_deltas():
    defaults = generate_default_boxes(DefaultBoxConfig.from_sides([1], [4]))
    with pytest.raises(ShapeError):
        decode_boxes(np.zeros((3, 4)), defaults)


def test_nms_identical_and_disjoint_boxes():
    same = np.array([[0.1, 0.1, 0.4, 0.4], [0.1, 0.1, 0.4, 0.4]])
    assert nms(same, np.array([0.3, 0.9])).tolist() == [1]
    disjoint = np.array([[0.0, 0.0, 0.1, 0.1], [0.5, 0.5, 0.6, 0.6], [0.8, 0.8, 0.9, 0.9]])
    assert sorted(nms(disjoint, np.array([0.2, 0.5, 0.1])).tolist()) == [0, 1, 2]
    with pytest.raises(ShapeError):
        nms(disjoint, np.array([0.1]))


def test_nms_ties_keep_lower_index():
    same = np.array([[0.1, 0.1, 0.4, 0.4]] * 3)
    assert nms(same, np.array([0.5, 0.5, 0.5])).tolist() == [0]


def brute_force_nms(boxes, scores, threshold):
    ranked = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in ranked:
        if all(iou(boxes[i:i + 1], boxes[k:k + 1])[0, 0] <= threshold for k in kept):
            kept.append(i)
    return kept


def test_nms_matches_exhaustive_suppression():
    rng = philox_generator(11)
    for _ in range(5):
        corners = rng.uniform(0, 1, size=(50, 2, 2))
        boxes = np.concatenate([corners.min(axis=1), corners.max(axis=1)], axis=1)
        scores = rng.uniform(0, 1, size=50)
        kept = nms(boxes, scores, 0.45, top_k=None)
        assert kept.tolist() == brute_force_nms(boxes, scores, 0.45)
        assert np.all(np.diff(scores[kept]) <= 0)
        overlaps = iou(boxes[kept], boxes[kept])
        np.fill_diagonal(overlaps, 0)
        assert overlaps.max() <= 0.45


def test_nms_top_k():
    boxes = np.array([[0.0, 0.0, 0.1, 0.1], [0.5, 0.5, 0.6, 0.6], [0.8, 0.8, 0.9, 0.9]])
    assert nms(boxes, np.array([0.2, 0.5, 0.1]), top_k=2).tolist() == [1, 0]


def test_flatten_head_outputs_orders_cells_then_boxes():
    loc = np.arange(2 * 4 * 2 * 2, dtype=np.float64).reshape(1, 8, 2, 2)
    conf = np.zeros((1, 2 * 3, 2, 2))
    deltas, logits = flatten_head_outputs({'loc0': loc, 'conf0': conf}, num_classes=3, n_maps=1)
    assert deltas.shape == (8, 4)
    assert logits.shape == (8, 3)
    # cell (0, 0), second box: channels 4..7
    assert deltas[1].tolist() == loc[0, 4:8, 0, 0].tolist()


def test_postprocess_keeps_confident_foreground():
    defaults = generate_default_boxes(DefaultBoxConfig.from_sides([1], [4]))
    logits = np.tile([10.0, 0.0, 0.0], (4, 1))
    logits[0] = [0.0, 0.0, 10.0]
    detections = postprocess_detections(np.zeros((4, 4)), logits, defaults)
    assert len(detections) == 1
    assert detections[0]['class_id'] == 2
    assert detections[0]['score'] > 0.99
    assert np.allclose(detections[0]['box'], np.clip(center_to_corners(defaults[:1]), 0, 1)[0])
