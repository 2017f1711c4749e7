import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import max_relative_error
from forge.datagen import SceneSample
from forge.detector import (
    Backbone,
    DetectHead,
    Detector,
    DetectorConfig,
    backbone_forward,
    build_targets,
    decode,
    decode_cell,
    detect_head,
    encode_box,
    iou,
    nms,
    supervised_loss,
    supervised_loss_terms,
)
from reference import ref_decode, ref_iou


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def sample(boxes, classes=None, domain="source"):
    classes = classes if classes is not None else [0] * len(boxes)
    return SceneSample(np.zeros((128, 128)), [tuple(b) for b in boxes], list(range(len(boxes))), classes, domain, 0, 0)


def empty_grid(s=8, fill=-30.0):
    g = np.zeros((s, s, 8))
    g[..., 4] = fill
    return g


class TestBackbone:
    def test_stage_sizes(self):
        feats = backbone_forward(Backbone(), torch.rand(2, 1, 128, 128))
        assert [tuple(f.shape[-2:]) for f in feats] == [(32, 32), (16, 16), (8, 8)]
        assert [f.shape[1] for f in feats] == [16, 32, 64]

    def test_zero_parameters_give_zero_output(self):
        with torch.no_grad():
            feats = backbone_forward(zero_(Backbone()), torch.zeros(1, 1, 64, 64))
        assert all(float(f.abs().max()) == 0.0 for f in feats)

    def test_deterministic(self):
        torch.manual_seed(0)
        bb = Backbone()
        x = torch.rand(1, 1, 64, 64)
        for a, b in zip(backbone_forward(bb, x), backbone_forward(bb, x)):
            assert torch.equal(a, b)

    def test_size_error(self):
        with pytest.raises(ValueError):
            backbone_forward(Backbone(), torch.rand(1, 1, 72, 64))

    def test_accepts_plain_array(self):
        feats = backbone_forward(Backbone(), np.random.default_rng(0).random((32, 32)))
        assert feats[-1].shape == (1, 64, 2, 2)


class TestHead:
    def test_shape(self):
        assert detect_head(DetectHead(64), torch.randn(1, 64, 8, 8)).shape == (1, 8, 8, 8)

    def test_zero(self):
        with torch.no_grad():
            out = detect_head(zero_(DetectHead(64)), torch.zeros(1, 64, 8, 8))
        assert float(out.abs().max()) == 0.0

    def test_full_detector_grid_size(self):
        _, grid = Detector()(torch.rand(1, 1, 128, 128))
        assert grid.shape == (1, 8, 8, 8)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000), scale=st.floats(0.0, 50.0))
    def test_finite(self, seed, scale):
        torch.manual_seed(seed)
        out = detect_head(DetectHead(64), torch.randn(2, 64, 4, 4) * scale)
        assert torch.isfinite(out).all()


class TestIou:
    def test_values(self):
        assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
        assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)

    def test_degenerate(self):
        assert iou((1, 1, 1, 5), (0, 0, 5, 5)) == 0.0
        assert iou((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 50), min_size=8, max_size=8))
    def test_symmetric_bounded(self, v):
        a = (min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]), max(v[2], v[3]))
        b = (min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]), max(v[6], v[7]))
        assert 0.0 <= iou(a, b) <= 1.0
        assert iou(a, b) == pytest.approx(iou(b, a))
        assert iou(a, b) == pytest.approx(ref_iou(a, b))


class TestDecode:
    def test_very_negative_is_empty(self):
        assert decode(empty_grid(), 0.0 + 1e-9, 0.5) == []

    def test_single_cell_score(self):
        g = empty_grid()
        g[3, 4, 4] = 0.0
        dets = decode(g, 0.1, 0.5)
        assert len(dets) == 1
        assert dets[0].score == pytest.approx(0.5 / 3, abs=1e-12)
        # tx=ty=0 puts the centre in the middle of the cell; tw=th=0 gives the anchor size
        assert dets[0].box == pytest.approx((4.5 * 16 - 16, 3.5 * 16 - 16, 4.5 * 16 + 16, 3.5 * 16 + 16))

    def test_identical_boxes_nms(self):
        assert nms([(0, 0, 10, 10), (0, 0, 10, 10)], [0.8, 0.9], 0.5) == [1]

    def test_identical_boxes_through_decode(self):
        g = empty_grid()
        g[2, 2, [4, 5]] = [5.0, 9.0]
        g[2, 3, [4, 5]] = [2.0, 9.0]
        # shift the second cell's centre back onto the first one's
        g[2, 3, 0] = -30.0
        g[2, 2, 0] = 30.0
        dets = decode(g, 0.1, 0.5)
        assert len(dets) == 1 and dets[0].score == pytest.approx(1 / (1 + math.exp(-5)), rel=1e-3)

    def test_sorted_and_bounded(self):
        rng = np.random.default_rng(0)
        dets = decode(rng.normal(size=(8, 8, 8)) * 2, 0.0, 0.5)
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)
        for d in dets:
            assert 0 <= d.score <= 1
            assert 0 <= d.box[0] < d.box[2] <= 128 and 0 <= d.box[1] < d.box[3] <= 128

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            decode(empty_grid(), 1.5, 0.5)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        g = rng.normal(size=(7, 7, 8))
        g[..., 2:4] = rng.normal(0.6, 0.4, size=(7, 7, 2))  # large boxes overlap a lot
        g[..., 5:] *= 3
        nms_iou = float(rng.uniform(0.1, 0.7))
        got = decode(g, 0.0, nms_iou)
        want = ref_decode(g, 0.0, nms_iou)
        assert [(d.box, d.class_id) for d in got] == [(pytest.approx(b), k) for b, _, k in want]


class TestBoxCoding:
    @settings(max_examples=200, deadline=None)
    @given(
        cx=st.floats(1, 127), cy=st.floats(1, 127), w=st.floats(2, 60), h=st.floats(2, 60)
    )
    def test_round_trip(self, cx, cy, w, h):
        box = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        row, col, t = encode_box(box, 16, 32.0, 8)
        assert np.allclose(decode_cell(row, col, t, 16, 32.0), box, atol=1e-5)

    def test_responsible_cell(self):
        row, col, _ = encode_box((30, 50, 40, 60), 16, 32.0, 8)
        assert (row, col) == (3, 2)


class TestSupervisedLoss:
    def test_empty_truth_negative_logits(self):
        g = torch.as_tensor(empty_grid(fill=-12.0))[None]
        loss = supervised_loss(g, [sample([])])
        assert 0 <= float(loss) < 0.01

    def test_empty_truth_is_background_only(self):
        g = torch.randn(1, 8, 8, 8, dtype=torch.float64)
        want = torch.nn.functional.softplus(g[..., 4]).sum()
        assert float(supervised_loss(g, [sample([])])) == pytest.approx(float(want), rel=1e-12)

    def test_perfect_box_prediction(self):
        box = (20.0, 30.0, 52.0, 70.0)
        row, col, t = encode_box(box, 16, 32.0, 8)
        g = torch.as_tensor(empty_grid())[None].clone()
        g[0, row, col, :4] = torch.tensor(t)
        g[0, row, col, 4] = 30.0
        _, terms = supervised_loss_terms(g, [sample([box])])
        assert terms["box"] == pytest.approx(0.0, abs=1e-12)

    def test_target_domain_rejected(self):
        with pytest.raises(ValueError):
            supervised_loss(torch.zeros(1, 8, 8, 8), [sample([], domain="target")])

    def test_collision_keeps_larger(self):
        small = (18.0, 18.0, 28.0, 28.0)
        big = (6.0, 6.0, 40.0, 40.0)
        mask, box_t, cls_t, n = build_targets(sample([small, big], [1, 2]), 8)
        assert n == 1 and mask.sum() == 1
        assert cls_t[1, 1] == 2
        assert box_t[1, 1, 2] == pytest.approx(math.log(34 / 32))
        _, terms = supervised_loss_terms(torch.zeros(1, 8, 8, 8), [sample([small, big], [1, 2])])
        assert terms["collisions"] == 1

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(0, 5), scale=st.floats(0.0, 20.0))
    def test_nonnegative_finite(self, seed, n, scale):
        rng = np.random.default_rng(seed)
        boxes = []
        for _ in range(n):
            x, y = rng.uniform(0, 100, size=2)
            boxes.append((x, y, x + rng.uniform(5, 28), y + rng.uniform(5, 28)))
        g = torch.as_tensor(rng.normal(size=(1, 8, 8, 8)) * scale)
        loss = supervised_loss(g, [sample(boxes, list(rng.integers(0, 3, n)))])
        assert torch.isfinite(loss) and float(loss) >= 0

    def test_gradient_wrt_grid(self):
        rng = np.random.default_rng(1)
        g = torch.as_tensor(rng.normal(size=(2, 8, 8, 8)), dtype=torch.float64).requires_grad_()
        truths = [sample([(10, 12, 40, 44), (70, 60, 98, 90)], [0, 2]), sample([(50, 5, 80, 30)], [1])]
        err = max_relative_error(lambda: supervised_loss(g, truths), [g])
        assert err < 1e-4

    def test_gradient_wrt_parameters(self):
        torch.manual_seed(0)
        det = Detector(DetectorConfig(widths=(4, 8, 8))).double()
        x = torch.rand(1, 1, 64, 64, dtype=torch.float64)
        truth = [sample([(10, 12, 40, 44)], [1])]

        def loss():
            return supervised_loss(det(x)[1], truth)

        assert max_relative_error(loss, list(det.parameters())) < 1e-4
