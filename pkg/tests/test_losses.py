import math

import numpy as np
import pytest

from cohseg import (
    BinaryMask,
    FlowField,
    LabelMap,
    LossConfig,
    SoftmaxMap,
    boundary_coherency,
    confident_disagreement_set,
    extend_boundary,
    extract_boundary,
    global_coherency,
    lovasz_softmax,
    seg_loss,
    total_loss,
)
from cohseg.losses import EPS, FramePair, lovasz_class_losses, _warp_normalized
from cohseg.metrics import boundary_mask, dilate_disc

from helpers import (
    constant_flow,
    full_correspondence,
    jaccard_loss_bruteforce,
    random_labels,
    random_softmax,
)

STEP = 1e-4


def fd_check(func, base, grad, coords, rtol=1e-3, atol=1e-7):
    for idx in coords:
        hi = base.copy()
        lo = base.copy()
        hi[idx] += STEP
        lo[idx] -= STEP
        fd = (func(hi) - func(lo)) / (2 * STEP)
        an = grad[idx]
        assert abs(fd - an) <= rtol * max(abs(fd), abs(an)) + atol, (
            f"coord {idx}: fd {fd} vs analytic {an}"
        )


def all_coords(shape):
    return list(np.ndindex(shape))


def argmax_gap_ok(scores, margin=1e-3):
    part = np.sort(scores, axis=-1)
    return float((part[..., -1] - part[..., -2]).min()) > margin


def lovasz_gaps_ok(scores_flat, labels_flat, margin=1e-3):
    for c in np.unique(labels_flat):
        fg = labels_flat == c
        e = np.where(fg, 1.0 - scores_flat[:, c], scores_flat[:, c])
        if e.size < 2:
            continue
        gaps = np.diff(np.sort(e))
        if float(gaps.min()) <= margin:
            return False
    return True


class TestSegLoss:
    def test_perfect_one_hot_is_zero(self):
        scores = np.zeros((2, 2, 2), dtype=np.float32)
        scores[..., 1] = 1.0
        gt = LabelMap(np.ones((2, 2), dtype=np.int32))
        value, grad = seg_loss(SoftmaxMap(scores), gt)
        assert value <= -math.log(1 - EPS) + 1e-12
        assert value == 0.0

    def test_uniform_binary_is_ln2(self):
        scores = np.full((3, 3, 2), 0.5, dtype=np.float32)
        gt = LabelMap(np.zeros((3, 3), dtype=np.int32))
        value, _ = seg_loss(SoftmaxMap(scores), gt)
        assert abs(value - math.log(2)) < 1e-7

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        m = random_softmax(rng, 8, 8, 3)
        gt = random_labels(rng, 8, 8, 3)
        base = m.scores.astype(np.float64)
        _, grad = seg_loss(base, gt.labels)
        fd_check(lambda x: seg_loss(x, gt.labels)[0], base, grad,
                 all_coords(base.shape), rtol=1e-4)


class TestLovasz:
    def test_one_hot_correct_is_zero(self):
        rng = np.random.default_rng(3)
        labels = random_labels(rng, 4, 4, 3)
        scores = np.zeros((4, 4, 3), dtype=np.float64)
        ys, xs = np.mgrid[0:4, 0:4]
        scores[ys, xs, labels.labels] = 1.0
        active = np.ones((4, 4), dtype=bool)
        value, _ = lovasz_softmax(scores, labels.labels, active)
        assert value == 0.0

    def test_hard_binary_fixture(self):
        # gt foreground {2 px}, prediction overlaps 1 and adds 1 extra
        labels = np.asarray([[1, 1, 0], [0, 0, 0]], dtype=np.int64)
        pred_fg = np.asarray([[1, 0, 0], [0, 1, 0]], dtype=np.float64)
        scores = np.stack([1.0 - pred_fg, pred_fg], axis=-1)
        active = np.ones((2, 3), dtype=bool)
        per_class = lovasz_class_losses(scores, labels, active)
        assert abs(per_class[1] - (1 - 1 / 3)) < 1e-12

    def test_empty_active_raises(self):
        rng = np.random.default_rng(5)
        m = random_softmax(rng, 3, 3, 2)
        with pytest.raises(ValueError, match="empty active"):
            lovasz_softmax(m, random_labels(rng, 3, 3, 2), np.zeros((3, 3), bool))

    def test_hard_predictions_equal_one_minus_iou(self):
        rng = np.random.default_rng(23)
        for _ in range(30):
            h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
            gt = rng.random((h, w)) < 0.5
            pred = rng.random((h, w)) < 0.5
            scores = np.stack([1.0 - pred, pred.astype(np.float64)], axis=-1)
            labels = gt.astype(np.int64)
            active = np.ones((h, w), dtype=bool)
            per_class = lovasz_class_losses(scores, labels, active)
            if gt.any():
                assert abs(per_class[1] - jaccard_loss_bruteforce(pred, gt)) < 1e-6
            if not gt.all():
                expected_bg = jaccard_loss_bruteforce(~pred, ~gt)
                assert abs(per_class[0] - expected_bg) < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(31)
        checked = 0
        for _ in range(20):
            m = random_softmax(rng, 6, 6, 2)
            labels = random_labels(rng, 6, 6, 2)
            active = rng.random((6, 6)) < 0.6
            if not active.any():
                continue
            base = m.scores.astype(np.float64)
            if not lovasz_gaps_ok(base[active], labels.labels[active]):
                continue
            _, grad = lovasz_softmax(base, labels.labels, active)
            fd_check(
                lambda x: lovasz_softmax(x, labels.labels, active)[0],
                base, grad, all_coords(base.shape),
            )
            checked += 1
        assert checked >= 8


def _one_hot_map(labels, classes):
    h, w = labels.shape
    scores = np.full((h, w, classes), 0.0, dtype=np.float32)
    ys, xs = np.mgrid[0:h, 0:w]
    scores[ys, xs, labels] = 1.0
    return SoftmaxMap(scores)


def _split_labels(h, w):
    labels = np.zeros((h, w), dtype=np.int32)
    labels[:, w // 2:] = 1
    return labels


class TestBoundaryCoherency:
    def test_identical_one_hot_zero_flow_is_zero(self):
        labels = _split_labels(6, 6)
        m = _one_hot_map(labels, 2)
        zero = FlowField.zeros(6, 6)
        result = boundary_coherency(m, m, zero, zero, theta=3)
        assert result.value == 0.0
        assert result.active_fwd > 0

    def test_constant_maps_have_empty_band(self):
        m = SoftmaxMap(np.dstack([np.full((5, 5), 0.8, np.float32),
                                  np.full((5, 5), 0.2, np.float32)]))
        zero = FlowField.zeros(5, 5)
        result = boundary_coherency(m, m, zero, zero, theta=3)
        assert result.empty
        assert result.value == 0.0
        assert not result.grad_prev.any()
        assert not result.grad_next.any()

    def test_value_matches_composed_pipeline(self):
        rng = np.random.default_rng(41)
        from cohseg import argmax_labels, warp_map

        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            m_prev = random_softmax(rng, 16, 16, 2)
            m_next = random_softmax(rng, 16, 16, 2)
            zero = FlowField.zeros(16, 16)
            theta = 5
            got = boundary_coherency(m_prev, m_next, zero, zero, theta=theta)

            def one_direction(source, anchor):
                labels = argmax_labels(anchor)
                band = extend_boundary(extract_boundary(labels), theta)
                warped, valid = warp_map(source, zero)
                active = band.as_bool() & valid.as_bool()
                value, _ = lovasz_softmax(
                    warped.scores.astype(np.float64), labels.labels, active
                )
                return value

            expected = 0.5 * one_direction(m_prev, m_next) + 0.5 * one_direction(m_next, m_prev)
            assert abs(got.value - expected) < 1e-6

    def _fd_instance(self, seed, size=8):
        rng = np.random.default_rng(seed)
        h = w = size
        m_prev = random_softmax(rng, h, w, 2).scores.astype(np.float64)
        m_next = random_softmax(rng, h, w, 2).scores.astype(np.float64)
        flow_fwd = FlowField(rng.uniform(-1.2, 1.2, size=(h, w, 2)).astype(np.float32))
        flow_bwd = FlowField(rng.uniform(-1.2, 1.2, size=(h, w, 2)).astype(np.float32))
        return m_prev, m_next, flow_fwd, flow_bwd

    def _instance_ok(self, m_prev, m_next, flow_fwd, flow_bwd, theta):
        # a finite-difference step moves warped scores by at most ~1.2e-4,
        # so 6e-4 of sort clearance rules out permutation changes
        if not (argmax_gap_ok(m_prev) and argmax_gap_ok(m_next)):
            return False
        for src, anchor, flow in (
            (m_prev, m_next, flow_fwd),
            (m_next, m_prev, flow_bwd),
        ):
            labels = np.argmax(anchor, axis=2)
            band = dilate_disc(boundary_mask(labels), theta // 2)
            out, valid, _, _ = _warp_normalized(src, flow.offsets.astype(np.float64))
            active = band & valid
            if not active.any():
                return False
            if not lovasz_gaps_ok(out[active], labels[active], margin=6e-4):
                return False
        return True

    def test_gradients_match_finite_differences(self):
        theta = 3
        checked = 0
        for seed in range(120):
            m_prev, m_next, flow_fwd, flow_bwd = self._fd_instance(500 + seed, size=6)
            if not self._instance_ok(m_prev, m_next, flow_fwd, flow_bwd, theta):
                continue
            result = boundary_coherency(m_prev, m_next, flow_fwd, flow_bwd, theta)
            rng = np.random.default_rng(seed)
            coords = [tuple(rng.integers(0, s) for s in m_prev.shape) for _ in range(25)]
            fd_check(
                lambda x: boundary_coherency(x, m_next, flow_fwd, flow_bwd, theta).value,
                m_prev, result.grad_prev, coords,
            )
            fd_check(
                lambda x: boundary_coherency(m_prev, x, flow_fwd, flow_bwd, theta).value,
                m_next, result.grad_next, coords,
            )
            checked += 1
            if checked >= 5:
                break
        assert checked >= 5

    def test_frame_swap_symmetry(self):
        for seed in range(10):
            m_prev, m_next, flow_fwd, flow_bwd = self._fd_instance(900 + seed)
            a = boundary_coherency(m_prev, m_next, flow_fwd, flow_bwd, theta=3)
            b = boundary_coherency(m_next, m_prev, flow_bwd, flow_fwd, theta=3)
            assert abs(a.value - b.value) <= 1e-9
            assert np.array_equal(a.grad_prev, b.grad_next)
            assert np.array_equal(a.grad_next, b.grad_prev)


class TestConfidentDisagreement:
    def test_equal_maps_empty(self):
        rng = np.random.default_rng(7)
        m = random_softmax(rng, 3, 3, 2)
        corr = full_correspondence(3, 3)
        assert confident_disagreement_set(m, m, 0.05, corr).count() == 0

    def test_gap_above_gamma_selected(self):
        m_next = SoftmaxMap(np.asarray([[[0.9, 0.1]]], dtype=np.float32))
        m_warp = SoftmaxMap(np.asarray([[[0.6, 0.4]]], dtype=np.float32))
        corr = full_correspondence(1, 1)
        assert confident_disagreement_set(m_next, m_warp, 0.05, corr).count() == 1

    def test_dual_matching_gates(self):
        m_next = SoftmaxMap(np.asarray([[[0.9, 0.1]]], dtype=np.float32))
        m_warp = SoftmaxMap(np.asarray([[[0.6, 0.4]]], dtype=np.float32))
        ones = BinaryMask(np.ones((1, 1), np.uint8))
        zeros = BinaryMask(np.zeros((1, 1), np.uint8))
        from cohseg import CorrespondenceSet

        corr = CorrespondenceSet(ones, zeros, np.zeros((1, 1), np.float32))
        assert confident_disagreement_set(m_next, m_warp, 0.05, corr).count() == 0

    def test_symmetric_reading(self):
        m_next = SoftmaxMap(np.asarray([[[0.3, 0.7]]], dtype=np.float32))
        m_warp = SoftmaxMap(np.asarray([[[0.05, 0.95]]], dtype=np.float32))
        corr = full_correspondence(1, 1)
        # top-1 gap is negative: one-sided reading rejects, symmetric accepts
        assert confident_disagreement_set(m_next, m_warp, 0.05, corr).count() == 0
        assert confident_disagreement_set(
            m_next, m_warp, 0.05, corr, symmetric=True
        ).count() == 1


class TestGlobalCoherency:
    def test_identical_maps_zero(self):
        rng = np.random.default_rng(2)
        m = random_softmax(rng, 4, 4, 2)
        zero = FlowField.zeros(4, 4)
        corr = full_correspondence(4, 4)
        result = global_coherency(m, m, zero, zero, corr, corr, gamma=0.05)
        assert result.empty
        assert result.value == 0.0

    def test_single_pixel_soft_ce(self):
        m_prev = SoftmaxMap(np.asarray([[[0.5, 0.5]]], dtype=np.float32))
        m_next = SoftmaxMap(np.asarray([[[1.0, 0.0]]], dtype=np.float32))
        zero = FlowField.zeros(1, 1)
        corr = full_correspondence(1, 1)
        result = global_coherency(m_prev, m_next, zero, zero, corr, corr, gamma=0.05)
        assert result.active_fwd == 1 and result.active_bwd == 0
        assert abs(result.value - 0.5 * math.log(2)) < 1e-7

    def test_gradients_match_frozen_target_finite_differences(self):
        for seed in range(6):
            rng = np.random.default_rng(700 + seed)
            h = w = 8
            m_prev = random_softmax(rng, h, w, 2).scores.astype(np.float64)
            m_next = random_softmax(rng, h, w, 2).scores.astype(np.float64)
            flow_fwd = FlowField(rng.uniform(-1.2, 1.2, (h, w, 2)).astype(np.float32))
            flow_bwd = FlowField(rng.uniform(-1.2, 1.2, (h, w, 2)).astype(np.float32))
            corr_fwd = full_correspondence(h, w)
            corr_bwd = full_correspondence(h, w)
            gamma = 0.05
            result = global_coherency(
                m_prev, m_next, flow_fwd, flow_bwd, corr_fwd, corr_bwd, gamma
            )
            if result.active_fwd == 0 or result.active_bwd == 0:
                continue

            def make_oracle(target_scores, flow, base_src, dual):
                from cohseg.losses import _confident_mask

                out0, valid0, _, _ = _warp_normalized(
                    base_src, flow.offsets.astype(np.float64)
                )
                active0 = _confident_mask(target_scores, out0, gamma, False) & dual & valid0

                def value(src_var):
                    out, _, _, _ = _warp_normalized(
                        src_var, flow.offsets.astype(np.float64)
                    )
                    p = np.maximum(out, EPS)
                    per_px = -(target_scores * np.log(p)).sum(axis=-1)
                    return 0.5 * float(per_px[active0].mean())

                return value

            fwd_oracle = make_oracle(m_next, flow_fwd, m_prev,
                                     corr_fwd.dual_matched.as_bool())
            bwd_oracle = make_oracle(m_prev, flow_bwd, m_next,
                                     corr_bwd.dual_matched.as_bool())
            rng2 = np.random.default_rng(seed)
            coords = [tuple(rng2.integers(0, s) for s in m_prev.shape) for _ in range(30)]
            fd_check(fwd_oracle, m_prev, result.grad_prev, coords, rtol=1e-4)
            fd_check(bwd_oracle, m_next, result.grad_next, coords, rtol=1e-4)

    def test_frame_swap_symmetry(self):
        for seed in range(10):
            rng = np.random.default_rng(800 + seed)
            h = w = 6
            m_prev = random_softmax(rng, h, w, 3)
            m_next = random_softmax(rng, h, w, 3)
            flow_fwd = FlowField(rng.uniform(-1, 1, (h, w, 2)).astype(np.float32))
            flow_bwd = FlowField(rng.uniform(-1, 1, (h, w, 2)).astype(np.float32))
            corr_fwd = full_correspondence(h, w)
            corr_bwd = full_correspondence(h, w)
            a = global_coherency(m_prev, m_next, flow_fwd, flow_bwd,
                                 corr_fwd, corr_bwd, 0.05)
            b = global_coherency(m_next, m_prev, flow_bwd, flow_fwd,
                                 corr_bwd, corr_fwd, 0.05)
            assert abs(a.value - b.value) <= 1e-9
            assert np.array_equal(a.grad_prev, b.grad_next)


class TestTotalLoss:
    def _pair(self, seed=0, h=8, w=8, c=2):
        rng = np.random.default_rng(seed)
        m_prev = random_softmax(rng, h, w, c)
        m_next = random_softmax(rng, h, w, c)
        zero = FlowField.zeros(h, w)
        corr = full_correspondence(h, w)
        return FramePair(m_prev, m_next, zero, zero, corr, corr)

    def test_degenerate_weights_reduce_to_seg(self):
        rng = np.random.default_rng(4)
        pred = random_softmax(rng, 5, 5, 3)
        gt = random_labels(rng, 5, 5, 3)
        config = LossConfig(alpha=0.0, beta=0.0)
        report = total_loss(labeled=(pred, gt), pair=self._pair(), config=config)
        seg_value, seg_grad = seg_loss(pred, gt)
        assert report.l_all == seg_value
        assert np.array_equal(report.grad_seg, seg_grad)

    def test_pair_only(self):
        config = LossConfig(alpha=1.0, beta=5e-5)
        pair = self._pair(seed=9)
        report = total_loss(pair=pair, config=config)
        assert report.l_seg == 0.0
        assert report.l_all == report.l_bc + 5e-5 * report.l_gc

    def test_requires_some_input(self):
        with pytest.raises(ValueError):
            total_loss()

    def test_recombination_within_1e9(self):
        rng = np.random.default_rng(6)
        pred = random_softmax(rng, 6, 6, 2)
        gt = random_labels(rng, 6, 6, 2)
        report = total_loss(labeled=(pred, gt), pair=self._pair(seed=3))
        combined = report.l_seg + report.alpha * report.l_bc + report.beta * report.l_gc
        assert abs(report.l_all - combined) <= 1e-9

    def test_gradients_combine_terms(self):
        config = LossConfig(alpha=0.7, beta=0.3)
        pair = self._pair(seed=12)
        report = total_loss(pair=pair, config=config)
        bc = boundary_coherency(pair.m_prev, pair.m_next, pair.flow_fwd,
                                pair.flow_bwd, theta=config.theta)
        gc = global_coherency(pair.m_prev, pair.m_next, pair.flow_fwd,
                              pair.flow_bwd, pair.corr_fwd, pair.corr_bwd,
                              gamma=config.gamma)
        assert np.allclose(report.grad_t_minus_1,
                           0.7 * bc.grad_prev + 0.3 * gc.grad_prev)
        assert np.allclose(report.grad_t, 0.7 * bc.grad_next + 0.3 * gc.grad_next)
        assert report.active_counts["bc_fwd"] == bc.active_fwd
        assert report.active_counts["gc_bwd"] == gc.active_bwd


class TestLossProperties:
    def test_values_nonnegative_and_finite(self):
        for seed in range(10):
            rng = np.random.default_rng(1000 + seed)
            h = w = 10
            m_prev = random_softmax(rng, h, w, 3)
            m_next = random_softmax(rng, h, w, 3)
            flow_fwd = FlowField(rng.uniform(-2, 2, (h, w, 2)).astype(np.float32))
            flow_bwd = FlowField(rng.uniform(-2, 2, (h, w, 2)).astype(np.float32))
            from cohseg import forward_backward_check

            corr_fwd = forward_backward_check(flow_fwd, flow_bwd, 1.5)
            corr_bwd = forward_backward_check(flow_bwd, flow_fwd, 1.5)
            pair = FramePair(m_prev, m_next, flow_fwd, flow_bwd, corr_fwd, corr_bwd)
            pred = random_softmax(rng, h, w, 3)
            gt = random_labels(rng, h, w, 3)
            report = total_loss(labeled=(pred, gt), pair=pair)
            for value in (report.l_seg, report.l_bc, report.l_gc, report.l_all):
                assert np.isfinite(value) and value >= 0.0

    def test_gradient_zero_outside_support(self):
        # zero flows: warp support is the active pixel itself
        labels = _split_labels(8, 8)
        rng = np.random.default_rng(2)
        noise = rng.uniform(0.0, 0.2, size=(8, 8, 2))
        scores = np.stack([1.0 - labels, labels], axis=-1).astype(np.float64)
        scores = scores * (1 - noise.sum(-1, keepdims=True) / 2)
        scores[..., 0] += noise[..., 0] / 2
        scores[..., 1] += noise[..., 1] / 2
        scores /= scores.sum(-1, keepdims=True)
        m_prev = SoftmaxMap(scores.astype(np.float32))
        m_next = random_softmax(rng, 8, 8, 2)
        zero = FlowField.zeros(8, 8)
        result = boundary_coherency(m_prev, m_next, zero, zero, theta=3)
        from cohseg import argmax_labels

        band_fwd = dilate_disc(
            boundary_mask(argmax_labels(m_next).labels), 1
        )
        outside = ~band_fwd
        assert not result.grad_prev[outside].any()
