import logging

import numpy as np
import pytest

from ffpf.backbone import PyramidFeatures
from ffpf.detect import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    Assignment,
    DetectionHead,
    GroundTruth,
    assign_targets,
    average_precision,
    decode_and_nms,
    decode_boxes,
    detection_loss,
    encode_boxes,
    evaluate_map,
    generate_anchors,
    head_forward,
    iou,
    iou_matrix,
    nms,
    read_detections,
    write_detections,
)
from ffpf.exceptions import DatasetError, DimensionError
from ffpf.models import AnchorSpec, BoxDetection, ModelConfig
from ffpf.tensor import Tensor, finite_diff_check, precision


def _det(image_id, class_id, score, box):
    return BoxDetection(image_id=image_id, class_id=class_id, score=score, box=box)


def _gt(boxes, classes):
    return GroundTruth(np.asarray(boxes, dtype=np.float64), np.asarray(classes))


class TestAnchors:
    def test_count_and_first_anchor(self):
        grid = generate_anchors([(16, 16), (8, 8), (4, 4), (2, 2)], [4, 8, 16, 32], AnchorSpec())
        assert len(grid) == (256 + 64 + 16 + 4) * 3
        first = grid[0]
        assert (first.cx, first.cy, first.width, first.level) == (2.0, 2.0, 16.0, 2)
        assert grid.boxes[0].tolist() == [-6.0, -6.0, 10.0, 10.0]

    def test_scales_per_octave(self):
        scales = AnchorSpec().scales()
        assert scales[0] == pytest.approx(4.0)
        assert scales[-1] == pytest.approx(4.0 * 2 ** (2 / 3))

    def test_levels_in_order(self):
        grid = generate_anchors([(2, 2), (1, 1)], [4, 8], AnchorSpec(scales_per_octave=1))
        assert grid.levels.tolist() == [2, 2, 2, 2, 3]


class TestGeometry:
    def test_iou(self):
        assert iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(1 / 3)
        assert iou([0, 0, 10, 10], [0, 0, 10, 10]) == pytest.approx(1.0)
        assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0

    def test_iou_degenerate_union(self):
        assert iou_matrix(np.zeros((1, 4)), np.zeros((1, 4)))[0, 0] == 0.0

    def test_encode_decode_inverse(self):
        rng = np.random.default_rng(0)
        anchors = np.array([[0, 0, 16, 16], [10, 4, 30, 20]], dtype=np.float64)
        xy = rng.uniform(0, 20, (2, 2))
        wh = rng.uniform(2, 20, (2, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        assert np.allclose(decode_boxes(anchors, encode_boxes(anchors, boxes)), boxes)

    def test_decode_clamps_scale(self):
        anchors = np.array([[0, 0, 16, 16]], dtype=np.float64)
        box = decode_boxes(anchors, np.array([[0, 0, 100.0, 0]]))[0]
        assert box[2] - box[0] == pytest.approx(1000.0)


class TestAssignment:
    def test_thresholds(self):
        anchors = np.array(
            [[0, 0, 10, 10], [0, 0, 10, 12], [0, 0, 10, 22], [50, 50, 60, 60]], dtype=np.float64
        )
        result = assign_targets(anchors, np.array([[0, 0, 10, 10]]), np.array([2]))
        assert result.state.tolist() == [POSITIVE, POSITIVE, IGNORE, NEGATIVE]
        assert result.classes[0] == 2
        assert np.allclose(result.box_targets[0], 0.0)
        assert result.num_positive == 2

    def test_best_anchor_forced_positive(self):
        anchors = np.array([[0, 0, 10, 10], [0, 0, 10, 10], [40, 40, 50, 50]], dtype=np.float64)
        gt = np.array([[0, 0, 30, 30]])
        result = assign_targets(anchors, gt, np.array([1]))
        # IoU 1/9 everywhere it overlaps; ties go to the lower index
        assert result.state.tolist() == [POSITIVE, NEGATIVE, NEGATIVE]

    def test_no_ground_truth(self):
        anchors = np.array([[0, 0, 10, 10]], dtype=np.float64)
        result = assign_targets(anchors, np.zeros((0, 4)), np.zeros(0))
        assert result.state.tolist() == [NEGATIVE]


def _single_anchor_outputs(logit=0.0, delta=0.0, dtype=np.float64):
    cls = Tensor(np.full((1, 1, 1, 1), logit), dtype=dtype)
    box = Tensor(np.full((1, 4, 1, 1), delta), dtype=dtype)
    return [(cls, box)]


def _positive(target=0.0):
    return Assignment(
        state=np.array([POSITIVE]),
        classes=np.array([0]),
        box_targets=np.full((1, 4), target),
    )


class TestLoss:
    def test_positive_at_zero_logit(self):
        value = detection_loss(_single_anchor_outputs(), [_positive()], 1).item()
        assert value == pytest.approx(0.25 * 0.25 * np.log(2.0))

    def test_smooth_l1_branches(self):
        small = detection_loss(_single_anchor_outputs(logit=30.0, delta=0.05), [_positive()], 1)
        large = detection_loss(_single_anchor_outputs(logit=30.0, delta=1.0), [_positive()], 1)
        beta = 1.0 / 9.0
        assert small.item() == pytest.approx(4 * 0.5 * 0.05**2 / beta, rel=1e-6)
        assert large.item() == pytest.approx(4 * (1.0 - 0.5 * beta), rel=1e-6)

    def test_ignored_anchor_contributes_nothing(self):
        ignored = Assignment(np.array([IGNORE]), np.array([0]), np.zeros((1, 4)))
        assert detection_loss(_single_anchor_outputs(logit=3.0), [ignored], 1).item() == 0.0

    def test_no_positives_warns(self, caplog):
        negative = Assignment(np.array([NEGATIVE]), np.array([0]), np.zeros((1, 4)))
        with caplog.at_level(logging.WARNING, logger="ffpf.detect"):
            value = detection_loss(_single_anchor_outputs(logit=0.0), [negative], 1).item()
        assert value == pytest.approx(0.75 * 0.25 * np.log(2.0))
        assert "no positive anchors" in caplog.text

    def test_hand_computed_three_anchor_batch(self):
        # anchors ordered along the width axis: positive, negative, ignored
        cls = Tensor(np.array([1.0, -1.0, 2.0]).reshape(1, 1, 1, 3), dtype=np.float64)
        box = Tensor(np.full((1, 4, 1, 3), 0.5), dtype=np.float64)
        assignment = Assignment(
            state=np.array([POSITIVE, NEGATIVE, IGNORE]),
            classes=np.array([0, 0, 0]),
            box_targets=np.array([[0.5, 0.5, 0.5, 0.0]] * 3),
        )
        p_pos = 1 / (1 + np.exp(-1.0))
        p_neg = 1 / (1 + np.exp(1.0))
        focal = 0.25 * (1 - p_pos) ** 2 * -np.log(p_pos) + 0.75 * p_neg**2 * -np.log(1 - p_neg)
        regression = 0.5 - 0.5 / 9.0
        value = detection_loss([(cls, box)], [assignment], 1).item()
        assert value == pytest.approx(focal + regression, rel=1e-9)

    def test_perfect_deltas_leave_only_classification(self):
        outputs = _single_anchor_outputs(logit=0.0, delta=0.3)
        value = detection_loss(outputs, [_positive(target=0.3)], 1).item()
        assert value == pytest.approx(0.25 * 0.25 * np.log(2.0))

    def test_confident_negatives_cost_nothing(self):
        negative = Assignment(np.array([NEGATIVE]), np.array([0]), np.zeros((1, 4)))
        assert detection_loss(_single_anchor_outputs(logit=-20.0), [negative], 1).item() < 1e-12

    def test_assignment_count_checked(self):
        with pytest.raises(DimensionError, match="assignments"):
            detection_loss(_single_anchor_outputs(), [_positive(), _positive()], 1)

    def test_gradient(self):
        rng = np.random.default_rng(0)
        with precision(np.float64):
            cls = Tensor(rng.standard_normal((2, 2, 2, 2)), name="cls")
            box = Tensor(rng.standard_normal((2, 4, 2, 2)), name="box")
            assignments = [
                Assignment(
                    state=np.array([POSITIVE, NEGATIVE, IGNORE, NEGATIVE]),
                    classes=np.array([1, 0, 0, 0]),
                    box_targets=rng.standard_normal((4, 4)),
                ),
                Assignment(
                    state=np.array([NEGATIVE, POSITIVE, POSITIVE, NEGATIVE]),
                    classes=np.array([0, 0, 1, 0]),
                    box_targets=rng.standard_normal((4, 4)),
                ),
            ]
            result = finite_diff_check(
                lambda: detection_loss([(cls, box)], assignments, 2),
                [cls, box],
                step=1e-6,
                max_elements=None,
                floor=1e-6,
            )
        assert result.passed(1e-5), result.location


class TestHead:
    def test_zero_weights_give_even_odds(self):
        config = ModelConfig.tiny()
        head = DetectionHead(config)
        head.initialize(0)
        for _, p in head.named_parameters():
            p.data[...] = 0
        rng = np.random.default_rng(0)
        features = PyramidFeatures([Tensor(rng.standard_normal((1, 8, s, s))) for s in (16, 8, 4, 2)])
        outputs = head_forward(features, head)
        a, k = config.anchor.num_anchors, config.num_classes
        assert [c.shape for c, _ in outputs] == [(1, a * k, s, s) for s in (16, 8, 4, 2)]
        assert [b.shape for _, b in outputs] == [(1, a * 4, s, s) for s in (16, 8, 4, 2)]
        for cls, _ in outputs:
            assert np.all(1 / (1 + np.exp(-cls.data)) == 0.5)


def _random_boxes(rng, n):
    corners = rng.uniform(0, 50, (n, 2))
    sizes = rng.uniform(2, 20, (n, 2))
    boxes = np.concatenate([corners, corners + sizes], axis=1)
    return boxes, rng.uniform(0, 1, n)


def _pair_iou(a, b):
    w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = w * h
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _greedy_reference(boxes, scores, iou_thr):
    remaining = list(range(len(scores)))
    keep = []
    while remaining:
        best = max(remaining, key=lambda i: (scores[i], -i))
        keep.append(best)
        remaining = [
            i for i in remaining if i != best and _pair_iou(boxes[best], boxes[i]) <= iou_thr
        ]
    return keep


class TestNMS:
    def test_suppresses_overlaps(self):
        boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30]], dtype=np.float64)
        keep = nms(boxes, np.array([0.9, 0.8, 0.7]), 0.5)
        assert keep.tolist() == [0, 2]

    def test_tie_goes_to_lower_index(self):
        boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=np.float64)
        assert nms(boxes, np.array([0.5, 0.5]), 0.5).tolist() == [0]
        assert nms(boxes[::-1].copy(), np.array([0.5, 0.5]), 0.5).tolist() == [0]

    def test_identical_boxes_keep_higher_score(self):
        boxes = np.array([[4, 4, 12, 12], [4, 4, 12, 12]], dtype=np.float64)
        assert nms(boxes, np.array([0.8, 0.9]), 0.5).tolist() == [1]

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            boxes, scores = _random_boxes(rng, 50)
            assert nms(boxes, scores, 0.5).tolist() == _greedy_reference(boxes, scores, 0.5)

    def test_input_order_does_not_matter(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            boxes, scores = _random_boxes(rng, 50)
            perm = rng.permutation(50)
            kept = nms(boxes, scores, 0.5)
            kept_permuted = nms(boxes[perm], scores[perm], 0.5)
            assert perm[kept_permuted].tolist() == kept.tolist()

    def test_empty(self):
        assert nms(np.zeros((0, 4)), np.zeros(0), 0.5).tolist() == []


class TestDecodeAndNMS:
    def test_single_confident_anchor(self):
        anchors = np.array([[0, 0, 16, 16], [2, 2, 18, 18], [40, 40, 56, 56]], dtype=np.float64)
        logits = np.array([[5.0, -9.0], [4.0, -9.0], [-9.0, -9.0]])
        dets = decode_and_nms(logits, np.zeros((3, 4)), anchors, (64, 64), image_id="000001")
        assert len(dets) == 1
        assert dets[0].class_id == 0
        assert dets[0].box == (0.0, 0.0, 16.0, 16.0)
        assert dets[0].image_id == "000001"

    def test_boxes_clipped_to_image(self):
        anchors = np.array([[-6, -6, 10, 10]], dtype=np.float64)
        dets = decode_and_nms(np.array([[5.0]]), np.zeros((1, 4)), anchors, (32, 32))
        assert dets[0].box == (0.0, 0.0, 10.0, 10.0)

    def test_max_det(self):
        anchors = np.array([[i * 20, 0, i * 20 + 10, 10] for i in range(5)], dtype=np.float64)
        logits = np.linspace(1, 5, 5)[:, None]
        dets = decode_and_nms(logits, np.zeros((5, 4)), anchors, (128, 128), max_det=2)
        assert [d.box[0] for d in dets] == [80.0, 60.0]


def _scored_fixture(rng):
    """Six ground-truth boxes, four of them detected, and three false positives."""
    boxes = [[i * 20, 0, i * 20 + 10, 10] for i in range(6)]
    gt = {"a": _gt(boxes, [0] * 6)}
    dets = [_det("a", 0, float(rng.uniform(0, 1)), tuple(boxes[i])) for i in range(4)]
    dets += [
        _det("a", 0, float(rng.uniform(0, 1)), (i * 20, 40, i * 20 + 10, 50)) for i in range(3)
    ]
    return gt, dets


class TestAveragePrecision:
    def test_perfect(self):
        gt = {"a": _gt([[0, 0, 10, 10]], [0])}
        result = evaluate_map([_det("a", 0, 0.9, (0, 0, 10, 10))], gt, 1)
        assert result.map == pytest.approx(1.0)

    def test_false_positive_ranked_first(self):
        gt = {"a": _gt([[0, 0, 10, 10]], [0])}
        dets = [_det("a", 0, 0.9, (30, 30, 40, 40)), _det("a", 0, 0.8, (0, 0, 10, 10))]
        assert evaluate_map(dets, gt, 1).map == pytest.approx(0.5)

    def test_duplicate_is_false_positive(self):
        gt = {"a": _gt([[0, 0, 10, 10], [20, 20, 30, 30]], [0, 0])}
        dets = [_det("a", 0, 0.9, (0, 0, 10, 10)), _det("a", 0, 0.8, (0, 0, 10, 10))]
        assert evaluate_map(dets, gt, 1).map == pytest.approx(0.5)

    def test_class_without_ground_truth_excluded(self):
        gt = {"a": _gt([[0, 0, 10, 10]], [0])}
        result = evaluate_map([_det("a", 0, 0.9, (0, 0, 10, 10))], gt, 3)
        assert set(result.per_class_ap) == {0}
        assert result.map == pytest.approx(1.0)

    def test_no_detections(self):
        gt = {"a": _gt([[0, 0, 10, 10]], [1])}
        result = evaluate_map([], gt, 2)
        assert result.per_class_ap == {1: 0.0}
        assert result.num_detections == 0

    def test_all_point_interpolation(self):
        recall = np.array([0.5, 0.5, 1.0])
        precision_ = np.array([1.0, 0.5, 2 / 3])
        assert average_precision(recall, precision_) == pytest.approx(0.5 + 0.5 * 2 / 3)

    def test_hand_computed_pr_curve(self):
        gt = {"a": _gt([[0, 0, 10, 10], [20, 20, 30, 30]], [0, 0])}
        dets = [
            _det("a", 0, 0.9, (0, 0, 10, 10)),
            _det("a", 0, 0.8, (40, 40, 50, 50)),
            _det("a", 0, 0.7, (0, 0, 10, 10)),
            _det("a", 0, 0.6, (20, 20, 30, 30)),
        ]
        # precision 1, 1/2, 1/3, 1/2 at recall 1/2, 1/2, 1/2, 1
        result = evaluate_map(dets, gt, 1)
        assert abs(result.per_class_ap[0] - (0.5 * 1.0 + 0.5 * 0.5)) < 1e-6

    @pytest.mark.parametrize("seed", range(20))
    def test_correct_detection_never_lowers_ap(self, seed):
        rng = np.random.default_rng(seed)
        gt, dets = _scored_fixture(rng)
        before = evaluate_map(dets, gt, 1).map
        missed = gt["a"].boxes[5]
        added = dets + [_det("a", 0, float(rng.uniform(0, 1)), tuple(missed))]
        assert evaluate_map(added, gt, 1).map >= before - 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_duplicate_never_raises_ap(self, seed):
        rng = np.random.default_rng(seed)
        gt, dets = _scored_fixture(rng)
        before = evaluate_map(dets, gt, 1).map
        original = dets[int(rng.integers(0, 4))]
        duplicate = _det("a", 0, original.score * float(rng.uniform(0, 1)), original.box)
        assert evaluate_map(dets + [duplicate], gt, 1).map <= before + 1e-12

    def test_unknown_class(self):
        with pytest.raises(DatasetError, match="class id"):
            evaluate_map([_det("a", 5, 0.5, (0, 0, 1, 1))], {"a": _gt([[0, 0, 1, 1]], [0])}, 3)

    def test_unknown_image(self):
        with pytest.raises(DatasetError, match="image id"):
            evaluate_map([_det("b", 0, 0.5, (0, 0, 1, 1))], {"a": _gt([[0, 0, 1, 1]], [0])}, 1)


class TestDetectionDump:
    def test_round_trip(self, tmp_path):
        dets = [_det("000003", 2, 0.75, (1.5, 2.0, 10.25, 12.0)), _det("000004", 0, 0.5, (0, 0, 4, 4))]
        path = tmp_path / "dets.txt"
        write_detections(path, dets)
        assert path.read_text().splitlines()[0] == (
            "000003 2 0.750000 1.500000 2.000000 10.250000 12.000000"
        )
        assert read_detections(path) == dets
