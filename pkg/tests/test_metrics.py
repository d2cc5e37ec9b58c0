import numpy as np
import pytest

from pcdnet.compositor import Decomposition
from pcdnet.datagen import LabeledImage
from pcdnet.errors import InvalidArgumentError, UndefinedMetricError
from pcdnet.metrics import (
    adjusted_rand_index,
    ari_foreground,
    benchmark_throughput,
    labels_from_decomposition,
)
from pcdnet.model import init_model
from pcdnet.pc_cell import Candidate, Displacement

from oracles import ari_pair_counting


def _cand(mask, pid=0):
    mask = np.asarray(mask, dtype=np.float64)
    return Candidate(
        prototype_id=pid,
        displacement=Displacement(0, 0, 0.0),
        gray=mask.copy(),
        mask=mask,
        template=np.repeat(mask[:, :, None], 3, axis=2),
    )


def _dec(cands):
    comp = np.zeros(cands[0].mask.shape + (3,))
    return Decomposition(selected=cands, composite=comp, residual_error=0.0)


class TestLabelsFromDecomposition:
    def test_single_opaque_candidate(self):
        mask = np.zeros((6, 6))
        mask[1:4, 2:5] = 1.0
        seg = labels_from_decomposition(_dec([_cand(mask, pid=4)]))
        np.testing.assert_array_equal(seg.instance_labels, (mask > 0.5) * 1)
        np.testing.assert_array_equal(seg.semantic_labels, (mask > 0.5) * 5)

    def test_front_occludes_back(self):
        front = np.ones((5, 5))
        back = np.zeros((5, 5))
        back[2:4, 2:4] = 1.0
        seg = labels_from_decomposition(_dec([_cand(front, 0), _cand(back, 1)]))
        assert (seg.instance_labels == 1).all()
        assert (seg.instance_labels == 2).sum() == 0

    def test_disjoint_candidates_order_independent_up_to_index(self):
        a = np.zeros((6, 6))
        a[:3, :3] = 1.0
        b = np.zeros((6, 6))
        b[3:, 3:] = 1.0
        seg_ab = labels_from_decomposition(_dec([_cand(a, 0), _cand(b, 1)]))
        seg_ba = labels_from_decomposition(_dec([_cand(b, 1), _cand(a, 0)]))
        np.testing.assert_array_equal(seg_ab.semantic_labels, seg_ba.semantic_labels)
        np.testing.assert_array_equal(
            seg_ab.instance_labels == 1, seg_ba.instance_labels == 2
        )
        np.testing.assert_array_equal(
            seg_ab.instance_labels == 2, seg_ba.instance_labels == 1
        )

    def test_subthreshold_alpha_leaves_pixels_unassigned(self):
        mask = np.full((4, 4), 0.4)
        seg = labels_from_decomposition(_dec([_cand(mask)]), threshold=0.5)
        assert (seg.instance_labels == 0).all()

    def test_threshold_validation(self):
        with pytest.raises(InvalidArgumentError):
            labels_from_decomposition(_dec([_cand(np.ones((3, 3)))]), threshold=1.0)


class TestNumericARI:
    def test_perfect_match(self):
        labels = np.array([0, 0, 1, 1, 2, 2])
        assert adjusted_rand_index(labels, labels) == 1.0

    def test_permutation_invariance_exact(self):
        truth = np.array([0, 0, 0, 1, 1, 2, 2, 2])
        permuted = np.array([5, 5, 5, 0, 0, 9, 9, 9])
        assert adjusted_rand_index(truth, permuted) == 1.0

    def test_hand_computed_six_pixel_case(self):
        truth = np.array([0, 0, 0, 1, 1, 1])
        pred = np.array([0, 0, 1, 1, 1, 1])
        expected = 12.0 / 37.0  # closed-form contingency arithmetic
        assert abs(adjusted_rand_index(truth, pred) - expected) < 1e-15
        assert abs(ari_pair_counting(truth, pred) - expected) < 1e-15

    def test_single_cluster_prediction_is_exactly_zero(self):
        truth = np.array([0, 0, 1, 1, 2, 2, 2])
        pred = np.zeros(7, dtype=int)
        assert adjusted_rand_index(truth, pred) == 0.0

    def test_symmetry(self, rng):
        for _ in range(20):
            a = rng.integers(0, 4, size=30)
            b = rng.integers(0, 4, size=30)
            assert adjusted_rand_index(a, b) == adjusted_rand_index(b, a)

    def test_matches_pair_counting_oracle(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 31))
            a = rng.integers(0, 5, size=n)
            b = rng.integers(0, 5, size=n)
            fast = adjusted_rand_index(a, b)
            slow = ari_pair_counting(a, b)
            assert abs(fast - slow) < 1e-12

    def test_rejects_short_input(self):
        with pytest.raises(UndefinedMetricError):
            adjusted_rand_index(np.array([1]), np.array([1]))


class TestAriForeground:
    def _truth(self):
        instance = np.zeros((6, 6), dtype=np.int32)
        instance[0:2, 0:2] = 1
        instance[4:6, 0:2] = 2
        instance[0:2, 4:6] = 3
        return LabeledImage(image=np.zeros((6, 6, 3)), instance_mask=instance, semantic_mask=instance)

    def test_perfect_prediction(self):
        truth = self._truth()
        from pcdnet.metrics import SegmentationResult

        pred = SegmentationResult(truth.instance_mask.copy(), truth.instance_mask.copy())
        assert ari_foreground(pred, truth) == 1.0

    def test_background_prediction_ignored(self):
        truth = self._truth()
        from pcdnet.metrics import SegmentationResult

        noisy = truth.instance_mask.copy()
        noisy[truth.instance_mask == 0] = 7  # garbage off-foreground
        pred = SegmentationResult(noisy, noisy)
        assert ari_foreground(pred, truth) == 1.0

    def test_unassigned_foreground_counts_as_own_cluster(self):
        truth = self._truth()
        from pcdnet.metrics import SegmentationResult

        pred_labels = truth.instance_mask.copy()
        pred_labels[0, 0] = 0  # one foreground pixel left unassigned
        pred = SegmentationResult(pred_labels, pred_labels)
        score = ari_foreground(pred, truth)
        assert score < 1.0
        fg = truth.instance_mask > 0
        assert score == adjusted_rand_index(pred_labels[fg], truth.instance_mask[fg])

    def test_too_few_foreground_pixels(self):
        instance = np.zeros((4, 4), dtype=np.int32)
        instance[0, 0] = 1
        truth = LabeledImage(np.zeros((4, 4, 3)), instance, instance)
        from pcdnet.metrics import SegmentationResult

        pred = SegmentationResult(instance.copy(), instance.copy())
        with pytest.raises(UndefinedMetricError):
            ari_foreground(pred, truth)

    def test_missing_truth_mask(self):
        from pcdnet.metrics import SegmentationResult

        pred = SegmentationResult(np.zeros((4, 4), dtype=int), np.zeros((4, 4), dtype=int))
        with pytest.raises(InvalidArgumentError):
            ari_foreground(pred, LabeledImage(np.zeros((4, 4, 3)), None, None))


class TestBenchmark:
    def test_reports_positive_rates_and_schema(self, rng):
        state = init_model(p=2, proto_h=4, proto_w=4, image_h=12, image_w=12, channels=3)
        images = rng.random((4, 12, 12, 3)).astype(np.float32)
        report = benchmark_throughput(state, images, warmup=1, repeats=2)
        for key in ("mean_imgs_s", "std_imgs_s", "n_images"):
            assert key in report
        assert report["n_images"] == 4
        assert report["mean_imgs_s"] > 0 and np.isfinite(report["mean_imgs_s"])
        assert len(report["rates"]) == 2 and all(r > 0 for r in report["rates"])

    def test_more_candidates_is_slower(self, rng):
        images = rng.random((8, 16, 16, 3)).astype(np.float32)
        fast_state = init_model(p=3, proto_h=4, proto_w=4, image_h=16, image_w=16, channels=3, n_max=1)
        slow_state = init_model(p=3, proto_h=4, proto_w=4, image_h=16, image_w=16, channels=3, n_max=8)
        fast = benchmark_throughput(fast_state, images, warmup=1, repeats=3)
        slow = benchmark_throughput(slow_state, images, warmup=1, repeats=3)
        assert slow["mean_imgs_s"] < fast["mean_imgs_s"]

    def test_rejects_zero_repeats(self, rng):
        state = init_model(p=1, proto_h=2, proto_w=2, image_h=8, image_w=8, channels=3)
        with pytest.raises(InvalidArgumentError):
            benchmark_throughput(state, rng.random((1, 8, 8, 3)), repeats=0)
