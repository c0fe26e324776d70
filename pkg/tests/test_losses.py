"""Adjusted cross-entropy family: values, gradients, and metrics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from rac.dataspace import ClassStats
from rac.errors import ValidationError
from rac.losses import (
    Logits,
    LossSpec,
    adjusted_ce,
    balanced_error,
    balce_spec,
    bucket_accuracy,
    ce_spec,
    lace_spec,
    ldam_spec,
    make_loss_spec,
    per_class_accuracy,
    predictions_from_logits,
    reweight,
    smoothed_targets,
    topk_accuracy,
)


from oracles import fd_grad, rel_err


def stats_of(counts):
    counts = np.asarray(counts, dtype=np.int64)
    return ClassStats(counts, int(counts.sum()))


class TestAdjustedCe:
    def test_uniform_logits_give_log_L(self):
        for L in (2, 5, 17):
            spec = ce_spec(L)
            logits = np.zeros((4, L))
            labels = np.arange(4) % L
            res = adjusted_ce(logits, labels, spec)
            assert_allclose(res.loss, math.log(L), rtol=1e-12)

    def test_delta_shift_invariance(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(8, 6))
        labels = rng.integers(0, 6, size=8)
        delta = rng.normal(size=6)
        a = adjusted_ce(logits, labels, LossSpec(np.ones(6), delta, tau=1.3))
        b = adjusted_ce(logits, labels, LossSpec(np.ones(6), delta + 5.7, tau=1.3))
        assert_allclose(a.loss, b.loss, rtol=0, atol=1e-10)
        assert_allclose(a.grad, b.grad, rtol=0, atol=1e-10)

    def test_logit_shift_invariance(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, size=5)
        spec = ce_spec(4, epsilon=0.1)
        a = adjusted_ce(logits, labels, spec)
        b = adjusted_ce(logits + 3.25, labels, spec)
        assert_allclose(a.loss, b.loss, rtol=0, atol=1e-10)
        assert_allclose(a.grad, b.grad, rtol=0, atol=1e-10)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        for trial in range(100):
            n = int(rng.integers(1, 6))
            L = int(rng.integers(2, 7))
            logits = rng.normal(scale=2.0, size=(n, L))
            labels = rng.integers(0, L, size=n)
            counts = rng.integers(1, 200, size=L)
            kind = ("ce", "balce", "lace", "ldam")[trial % 4]
            spec = make_loss_spec(
                kind, stats_of(counts),
                tau=float(rng.uniform(0.0, 2.0)),
                epsilon=float(rng.choice([0.0, 0.1, 0.3])),
            )
            res = adjusted_ce(logits, labels, spec)
            num = fd_grad(lambda f: adjusted_ce(f, labels, spec).loss, logits)
            assert rel_err(res.grad, num) < 1e-5, f"trial {trial} ({kind})"

    def test_grad_rows_sum_to_zero(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(6, 5))
        labels = rng.integers(0, 5, size=6)
        spec = make_loss_spec("lace", stats_of([40, 30, 20, 7, 3]), epsilon=0.1)
        res = adjusted_ce(logits, labels, spec)
        assert_allclose(res.grad.sum(axis=1), 0.0, atol=1e-15)

    def test_rejects_non_finite_logits(self):
        spec = ce_spec(3)
        with pytest.raises(ValidationError):
            adjusted_ce(np.array([[0.0, np.inf, 1.0]]), [0], spec)
        with pytest.raises(ValidationError):
            adjusted_ce(np.array([[0.0, np.nan, 1.0]]), [0], spec)

    def test_rejects_bad_labels_and_shapes(self):
        spec = ce_spec(3)
        with pytest.raises(ValidationError):
            adjusted_ce(np.zeros((2, 3)), [0, 3], spec)
        with pytest.raises(ValidationError):
            adjusted_ce(np.zeros((2, 4)), [0, 1], spec)

    def test_accepts_logits_wrapper(self):
        spec = ce_spec(2)
        wrapped = Logits(np.zeros((1, 2)), branch="fused")
        assert_allclose(adjusted_ce(wrapped, [0], spec).loss, math.log(2), rtol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(shift=st.floats(-20, 20), seed=st.integers(0, 2**31))
    def test_shift_invariance_property(self, shift, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(3, 4))
        labels = rng.integers(0, 4, size=3)
        delta = rng.normal(size=4)
        a = adjusted_ce(logits, labels, LossSpec(np.ones(4), delta))
        b = adjusted_ce(logits, labels, LossSpec(np.ones(4), delta + shift))
        assert_allclose(a.loss, b.loss, rtol=0, atol=1e-9)


class TestSpecConstructors:
    def test_balce_weights(self):
        spec = balce_spec(stats_of([2, 1]))
        assert_allclose(spec.alpha, [0.5, 1.0], rtol=0)
        assert_array_equal(spec.delta, [0.0, 0.0])

    def test_balce_on_uniform_counts_scales_ce(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        n = 25
        lhs = adjusted_ce(logits, labels, balce_spec(stats_of([n] * 4))).loss
        rhs = adjusted_ce(logits, labels, ce_spec(4)).loss / n
        assert_allclose(lhs, rhs, rtol=0, atol=1e-12)

    def test_balce_equals_per_sample_reweighted_ce(self):
        rng = np.random.default_rng(6)
        counts = np.array([50, 20, 5])
        logits = rng.normal(size=(7, 3))
        labels = rng.integers(0, 3, size=7)
        lhs = adjusted_ce(logits, labels, balce_spec(stats_of(counts))).loss
        per_sample = []
        plain = ce_spec(3)
        for i in range(7):
            li = adjusted_ce(logits[i : i + 1], labels[i : i + 1], plain).loss
            per_sample.append(li / counts[labels[i]])
        assert_allclose(lhs, np.mean(per_sample), rtol=0, atol=1e-12)

    def test_lace_adjustments(self):
        spec = lace_spec(stats_of([75, 25]))
        assert_allclose(spec.delta, [-0.2876820724517809, -1.3862943611198906], rtol=1e-12)
        assert_array_equal(spec.alpha, [1.0, 1.0])
        assert spec.tau == 1.0

    def test_lace_single_class_has_zero_adjustment(self):
        assert_allclose(lace_spec(stats_of([10])).delta, [0.0], atol=0)

    def test_lace_tau_zero_is_plain_ce(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(5, 3))
        labels = rng.integers(0, 3, size=5)
        a = adjusted_ce(logits, labels, lace_spec(stats_of([9, 3, 1]), tau=0.0))
        b = adjusted_ce(logits, labels, ce_spec(3))
        assert_allclose(a.loss, b.loss, rtol=0, atol=1e-12)
        assert_allclose(a.grad, b.grad, rtol=0, atol=1e-12)

    def test_ldam_margins(self):
        spec = ldam_spec(stats_of([16, 1]))
        assert spec.margin
        assert_allclose(spec.delta, [0.5, 1.0], rtol=0)
        assert_allclose(spec.alpha, [1 / 16, 1.0], rtol=0)

    def test_ldam_margin_lowers_true_logit(self):
        # a margin on the true class must increase the loss relative to CE
        logits = np.array([[2.0, 0.0]])
        labels = [0]
        with_margin = adjusted_ce(logits, labels, ldam_spec(stats_of([1, 1]))).loss
        without = adjusted_ce(logits, labels, balce_spec(stats_of([1, 1]))).loss
        assert with_margin > without

    def test_zero_count_rejected(self):
        with pytest.raises(ValidationError):
            balce_spec(stats_of([3, 0]))
        with pytest.raises(ValidationError):
            lace_spec(stats_of([0, 2]))

    def test_make_loss_spec_unknown_kind(self):
        with pytest.raises(ValidationError):
            make_loss_spec("focal", stats_of([1, 1]))

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            LossSpec(np.array([1.0, 0.0]), np.zeros(2))
        with pytest.raises(ValidationError):
            LossSpec(np.ones(2), np.array([0.0, np.inf]))
        with pytest.raises(ValidationError):
            LossSpec(np.ones(2), np.zeros(2), tau=-1.0)
        with pytest.raises(ValidationError):
            LossSpec(np.ones(2), np.zeros(2), epsilon=1.0)


class TestSmoothing:
    def test_targets_mix_onehot_and_uniform(self):
        t = smoothed_targets([1], 4, 0.1)
        assert_allclose(t, [[0.025, 0.925, 0.025, 0.025]], rtol=0, atol=1e-15)
        assert_allclose(t.sum(), 1.0, rtol=1e-15)

    def test_epsilon_zero_is_onehot(self):
        t = smoothed_targets([2, 0], 3, 0.0)
        assert_array_equal(t, [[0, 0, 1], [1, 0, 0]])


class TestReweight:
    def test_inv_sqrt(self):
        assert_allclose(reweight(stats_of([100, 4]), "inv_sqrt"), [0.1, 0.5], rtol=0)

    def test_inv_log(self):
        w = reweight(stats_of([100]), "inv_log")
        assert_allclose(w, [0.21714724095162588], rtol=1e-12)

    def test_inv_log_floors_singleton_counts(self):
        w = reweight(stats_of([1, 2]), "inv_log")
        assert_allclose(w, [1 / math.log(2)] * 2, rtol=1e-12)

    def test_none_scheme(self):
        assert_array_equal(reweight(stats_of([5, 9]), "none"), [1.0, 1.0])

    def test_unknown_scheme(self):
        with pytest.raises(ValidationError):
            reweight(stats_of([5]), "inverse")

    def test_reweight_composes_with_make_loss_spec(self):
        spec = make_loss_spec("lace", stats_of([100, 4]), reweight_scheme="inv_sqrt")
        assert_allclose(spec.alpha, [0.1, 0.5], rtol=0)
        assert spec.kind == "lace+inv_sqrt"


class TestMetrics:
    def test_perfect_predictions(self):
        assert balanced_error([0, 1, 2], [0, 1, 2], 3) == 0.0

    def test_constant_predictor_two_classes(self):
        preds = [0, 0, 0, 0]
        labels = [0, 0, 1, 1]
        assert balanced_error(preds, labels, 2) == pytest.approx(0.5)

    def test_complement_identity(self):
        rng = np.random.default_rng(8)
        labels = rng.integers(0, 4, size=60)
        preds = rng.integers(0, 4, size=60)
        acc = per_class_accuracy(preds, labels, 4)
        assert balanced_error(preds, labels, 4) == pytest.approx(1.0 - acc.mean())

    def test_invariant_to_class_duplication(self):
        labels = np.array([0, 0, 1, 1, 1])
        preds = np.array([0, 1, 1, 0, 1])
        base = balanced_error(preds, labels, 2)
        dup = balanced_error(
            np.concatenate([preds, preds[labels == 0]]),
            np.concatenate([labels, labels[labels == 0]]),
            2,
        )
        assert base == pytest.approx(dup)

    def test_missing_class_excluded_with_warning(self):
        with pytest.warns(UserWarning, match="without test samples"):
            err = balanced_error([0, 1], [0, 1], 3)
        assert err == 0.0

    def test_all_classes_missing_rejected(self):
        with pytest.raises(ValidationError):
            balanced_error(np.empty(0, dtype=int), np.empty(0, dtype=int), 2)

    def test_argmax_tie_break_is_lowest_index(self):
        preds = predictions_from_logits(np.array([[1.0, 1.0, 0.5]]))
        assert preds[0] == 0

    def test_topk_trivial_cases(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(size=(10, 5))
        labels = rng.integers(0, 5, size=10)
        assert topk_accuracy(logits, labels, k=5) == 1.0
        aligned = np.eye(5)[labels]
        assert topk_accuracy(aligned, labels, k=1) == 1.0

    def test_topk_matches_argmax_at_k1(self):
        rng = np.random.default_rng(10)
        logits = rng.normal(size=(40, 6))
        labels = rng.integers(0, 6, size=40)
        top1 = topk_accuracy(logits, labels, k=1)
        preds = predictions_from_logits(logits)
        assert top1 == pytest.approx(np.mean(preds == labels))

    def test_topk_bounds_checked(self):
        with pytest.raises(ValidationError):
            topk_accuracy(np.zeros((1, 3)), [0], k=4)
        with pytest.raises(ValidationError):
            topk_accuracy(np.zeros((1, 3)), [0], k=0)

    def test_bucket_means_match_brute_force(self):
        rng = np.random.default_rng(11)
        L = 12
        labels = rng.integers(0, L, size=400)
        preds = rng.integers(0, L, size=400)
        acc = per_class_accuracy(preds, labels, L)
        buckets = ["many"] * 4 + ["med"] * 4 + ["few"] * 4
        got = bucket_accuracy(acc, buckets)
        for name, lo, hi in (("many", 0, 4), ("med", 4, 8), ("few", 8, 12)):
            tally = [acc[c] for c in range(lo, hi) if not np.isnan(acc[c])]
            assert got[name] == pytest.approx(np.mean(tally))
        assert got["all"] == pytest.approx(np.nanmean(acc))

    def test_empty_bucket_absent(self):
        got = bucket_accuracy(np.array([1.0, 0.5]), ["many", "many"])
        assert "few" not in got and "med" not in got
        assert got["all"] == pytest.approx(0.75)

    def test_nan_classes_skipped_in_buckets(self):
        got = bucket_accuracy(np.array([1.0, np.nan]), ["many", "few"])
        assert "few" not in got
        assert got["many"] == 1.0
