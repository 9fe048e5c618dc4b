"""Full-batch loss and gradient oracle against independent references."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disco import (
    Counters,
    DomainError,
    FeatureBatch,
    ShapeError,
    clip_grad_full,
    clip_loss_full,
    finite_diff_grad,
    max_rel_error,
)


def unit_rows(rng, batch, dim):
    m = rng.standard_normal((batch, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def scalar_loop_loss(I, T, t):
    """Pure-Python reimplementation: scalar loops and math-module exp/log."""
    batch, dim = len(I), len(I[0])
    S = [
        [t * sum(I[i][k] * T[j][k] for k in range(dim)) for j in range(batch)]
        for i in range(batch)
    ]

    def ce(rows):
        total = 0.0
        for i, row in enumerate(rows):
            m = max(row)
            total += m + math.log(sum(math.exp(v - m) for v in row)) - row[i]
        return total / batch

    l1 = ce(S)
    l2 = ce([[S[j][i] for j in range(batch)] for i in range(batch)])
    return (l1 + l2) / 2.0, l1, l2


def formula_grads(I, T, t):
    """Dense closed form: G = (P1 - Y + (P2 - Y).T) / (2B), d = t * G @ features."""

    def softmax_rows(m):
        e = np.exp(m - m.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    batch = I.shape[0]
    S = t * (I @ T.T)
    Y = np.eye(batch)
    G = (softmax_rows(S) - Y + (softmax_rows(S.T) - Y).T) / (2.0 * batch)
    return t * (G @ T), t * (G.T @ I)


class TestFeatureBatch:
    def test_valid_construction(self):
        fb = FeatureBatch(unit_rows(np.random.default_rng(0), 3, 4), "image")
        assert fb.batch_size == 3
        assert fb.dim == 4
        assert fb.features.dtype == np.float64

    def test_unknown_role_rejected(self):
        with pytest.raises(DomainError, match="role"):
            FeatureBatch(np.eye(2), "audio")

    def test_non_unit_rows_rejected(self):
        with pytest.raises(DomainError, match="unit-norm"):
            FeatureBatch(np.full((2, 2), 0.9), "text")

    def test_empty_batch_rejected(self):
        with pytest.raises(ShapeError):
            FeatureBatch(np.empty((0, 3)), "image")

    def test_wrapped_and_raw_inputs_give_identical_losses(self):
        rng = np.random.default_rng(3)
        I, T = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
        wrapped = clip_loss_full(FeatureBatch(I, "image"), FeatureBatch(T, "text"), 7.0)
        raw = clip_loss_full(I, T, 7.0)
        assert wrapped.total == raw.total


class TestClipLossFull:
    def test_orthonormal_features(self):
        # S = t * eye: every row is [1, 0] up to ordering, so each direction
        # is log(1 + e^{-1}).
        eye = np.eye(2)
        loss = clip_loss_full(eye, eye, 1.0)
        expected = math.log(1.0 + math.exp(-1.0))
        assert abs(loss.image_to_text - expected) < 1e-14
        assert abs(loss.text_to_image - expected) < 1e-14
        assert abs(loss.total - expected) < 1e-14

    def test_identical_rows_give_log_batch(self):
        row = np.array([1.0, 0.0, 0.0])
        features = np.tile(row, (4, 1))
        loss = clip_loss_full(features, features, 10.0)
        assert abs(loss.total - math.log(4.0)) < 1e-14

    def test_matches_scalar_loop_reference(self):
        rng = np.random.default_rng(7)
        I, T = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
        total, l1, l2 = scalar_loop_loss(I.tolist(), T.tolist(), 10.0)
        loss = clip_loss_full(I, T, 10.0)
        assert abs(loss.total - total) < 1e-12
        assert abs(loss.image_to_text - l1) < 1e-12
        assert abs(loss.text_to_image - l2) < 1e-12

    def test_total_is_mean_of_directions(self):
        rng = np.random.default_rng(11)
        loss = clip_loss_full(unit_rows(rng, 5, 4), unit_rows(rng, 5, 4), 3.0)
        assert loss.total == (loss.image_to_text + loss.text_to_image) / 2.0
        assert loss.image_to_text != loss.text_to_image  # generic case is asymmetric

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            clip_loss_full(np.eye(3), np.eye(4), 1.0)

    def test_non_positive_temperature_rejected(self):
        for t in (0.0, -2.0):
            with pytest.raises(DomainError):
                clip_loss_full(np.eye(2), np.eye(2), t)


class TestClipGradFull:
    def test_single_pair_has_zero_gradient(self):
        # B=1: the softmax over one logit is [1] and equals the label.
        I = np.array([[1.0, 0.0]])
        T = np.array([[0.6, 0.8]])
        pair = clip_grad_full(I, T, 10.0)
        assert np.array_equal(pair.d_image, np.zeros((1, 2)))
        assert np.array_equal(pair.d_text, np.zeros((1, 2)))
        assert pair.loss.total == 0.0

    def test_matches_dense_closed_form(self):
        rng = np.random.default_rng(13)
        I, T = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
        pair = clip_grad_full(I, T, 10.0)
        d_image, d_text = formula_grads(I, T, 10.0)
        assert max_rel_error(pair.d_image, d_image) < 1e-13
        assert max_rel_error(pair.d_text, d_text) < 1e-13

    @pytest.mark.parametrize("temperature", [1.0, 10.0, 100.0])
    @pytest.mark.parametrize("batch,dim", [(2, 3), (5, 8), (8, 4), (8, 8)])
    def test_matches_finite_differences(self, batch, dim, temperature):
        rng = np.random.default_rng(batch * 100 + dim)
        I, T = unit_rows(rng, batch, dim), unit_rows(rng, batch, dim)
        pair = clip_grad_full(I, T, temperature)

        fd_image = finite_diff_grad(
            lambda m: clip_loss_full(m, T, temperature).total, I)
        fd_text = finite_diff_grad(
            lambda m: clip_loss_full(I, m, temperature).total, T)
        assert max_rel_error(pair.d_image, fd_image) < 1e-6
        assert max_rel_error(pair.d_text, fd_text) < 1e-6

    def test_loss_agrees_with_loss_oracle(self):
        rng = np.random.default_rng(17)
        I, T = unit_rows(rng, 7, 5), unit_rows(rng, 7, 5)
        by_grad = clip_grad_full(I, T, 10.0).loss
        by_loss = clip_loss_full(I, T, 10.0)
        assert abs(by_grad.total - by_loss.total) < 1e-12
        assert abs(by_grad.image_to_text - by_loss.image_to_text) < 1e-12
        assert abs(by_grad.text_to_image - by_loss.text_to_image) < 1e-12

    def test_identical_towers_give_identical_gradients(self):
        # I = T makes the combined logit gradient symmetric.
        rng = np.random.default_rng(19)
        F = unit_rows(rng, 6, 4)
        pair = clip_grad_full(F, F, 5.0)
        assert max_rel_error(pair.d_image, pair.d_text) < 1e-12

    def test_does_not_mutate_inputs(self):
        rng = np.random.default_rng(23)
        I, T = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
        before = I.tobytes(), T.tobytes()
        clip_grad_full(I, T, 10.0)
        assert (I.tobytes(), T.tobytes()) == before

    def test_output_shapes_match_inputs(self):
        rng = np.random.default_rng(29)
        pair = clip_grad_full(unit_rows(rng, 5, 3), unit_rows(rng, 5, 3), 2.0)
        assert pair.d_image.shape == (5, 3)
        assert pair.d_text.shape == (5, 3)

    def test_loss_scope_peak_is_exactly_one_similarity_buffer(self):
        batch, dim = 8, 4
        rng = np.random.default_rng(31)
        loss_counters, exchange_counters = Counters(), Counters()
        clip_grad_full(
            unit_rows(rng, batch, dim), unit_rows(rng, batch, dim), 10.0,
            loss_counters=loss_counters, exchange_counters=exchange_counters)
        assert loss_counters.peak_live_elements == batch * batch
        assert loss_counters.live_elements == 0
        assert loss_counters.flops == 2 * batch * batch * dim
        assert exchange_counters.peak_live_elements == 2 * batch * dim
        assert exchange_counters.flops == 4 * batch * batch * dim


class TestPermutationInvariance:
    @given(st.integers(2, 6), st.integers(2, 5), st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_joint_row_permutation_permutes_gradients(self, batch, dim, seed):
        rng = np.random.default_rng(seed)
        I, T = unit_rows(rng, batch, dim), unit_rows(rng, batch, dim)
        perm = rng.permutation(batch)
        base = clip_grad_full(I, T, 5.0)
        permuted = clip_grad_full(I[perm], T[perm], 5.0)
        assert abs(permuted.loss.total - base.loss.total) < 1e-12
        assert max_rel_error(permuted.d_image, base.d_image[perm]) < 1e-12
        assert max_rel_error(permuted.d_text, base.d_text[perm]) < 1e-12


class TestFiniteDiffGrad:
    def test_square(self):
        grad = finite_diff_grad(lambda x: float(x[0, 0] ** 2), np.array([[3.0]]))
        assert abs(grad[0, 0] - 6.0) < 1e-6

    def test_constant(self):
        grad = finite_diff_grad(lambda x: 1.5, np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert np.array_equal(grad, np.zeros((2, 2)))

    def test_sum_of_squares(self):
        point = np.array([[1.0, -2.0], [3.0, 0.5]])
        grad = finite_diff_grad(lambda x: float((x ** 2).sum()), point)
        assert max_rel_error(grad, 2.0 * point) < 1e-6

    def test_non_positive_step_rejected(self):
        for h in (0.0, -1e-6):
            with pytest.raises(DomainError):
                finite_diff_grad(lambda x: 0.0, np.array([[1.0]]), h=h)
