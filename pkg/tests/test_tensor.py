import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lattle import tensor as T
from lattle.errors import DimensionError, GraphError, LabelIndexError, NumericError
from lattle.tensor import Tensor

from conftest import numeric_grad, relative_error


def param(arr):
    return T.parameter(np.asarray(arr, dtype=np.float64), dtype=np.float64)


def check_grads(loss_fn, tensors, tol=1e-4):
    for t in tensors:
        t.grad = None
    T.backward(loss_fn())
    for t in tensors:
        with T.no_grad():
            n = numeric_grad(lambda: loss_fn().item(), t.data)
        assert relative_error(t.grad, n) < tol, t.name


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_annihilator(self):
        out = T.matmul(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), Tensor(np.zeros((2, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        out = T.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
            T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))

    def test_gradients_match_formula(self):
        rng = np.random.default_rng(1)
        a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
        T.backward(T.sum_(T.matmul(a, b)))
        g = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)

    def test_batched_broadcast_gradients(self):
        rng = np.random.default_rng(2)
        a, b = param(rng.normal(size=(2, 3, 4))), param(rng.normal(size=(4, 5)))
        c = param(rng.normal(size=(2, 5, 3)))
        w = rng.normal(size=(2, 3, 3))
        check_grads(lambda: T.sum_(T.mul(T.matmul(T.matmul(a, b), c), w)), [a, b, c])


class TestSoftmax:
    @pytest.mark.parametrize("c", [-50.0, 0.0, 3.5, 700.0])
    def test_equal_logits(self, c):
        out = T.softmax_last_dim(Tensor(np.full(3, c)))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-15)

    def test_ln2(self):
        out = T.softmax_last_dim(Tensor(np.array([0.0, math.log(2.0)])))
        np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], rtol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = T.softmax_last_dim(Tensor(np.array([1000.0, 0.0])))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-300)

    def test_nan_raises(self):
        with pytest.raises(NumericError):
            T.softmax_last_dim(Tensor(np.array([0.0, np.nan])))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
    def test_rows_are_distributions(self, xs):
        y = T.softmax_last_dim(Tensor(np.array(xs))).data
        assert (y >= 0).all()
        assert abs(y.sum() - 1.0) < 1e-6

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x = param(rng.normal(size=(2, 5)))
        w = rng.normal(size=(2, 5))
        check_grads(lambda: T.sum_(T.mul(T.softmax_last_dim(x), w)), [x])


class TestLayerNorm:
    def test_constant_slice_is_zero(self):
        out = T.layer_norm(Tensor(np.full((1, 4), 7.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_plus_minus_one(self):
        # direct formula: (x - 0) / sqrt(1 + eps), evaluated with the math module
        expected = 1.0 / math.sqrt(1.0 + 1e-5)
        out = T.layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [expected, -expected], rtol=1e-15)
        np.testing.assert_allclose(out.data, [0.9999950000374997, -0.9999950000374997], rtol=1e-15)

    def test_zero_gamma_gives_beta(self):
        beta = np.array([0.5, -2.0, 3.0])
        out = T.layer_norm(Tensor(np.random.default_rng(0).normal(size=(4, 3))),
                           Tensor(np.zeros(3)), Tensor(beta))
        np.testing.assert_array_equal(out.data, np.tile(beta, (4, 1)))

    def test_gradients(self):
        rng = np.random.default_rng(4)
        x, g, b = param(rng.normal(size=(3, 6))), param(rng.normal(size=6)), param(rng.normal(size=6))
        w = rng.normal(size=(3, 6))
        check_grads(lambda: T.sum_(T.mul(T.layer_norm(x, g, b), w)), [x, g, b])

    def test_shape_check(self):
        with pytest.raises(DimensionError):
            T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


class TestCrossEntropy:
    def test_confident_prediction_tends_to_zero(self):
        losses = [T.cross_entropy(Tensor(np.array([[m, 0.0]])), [0]).item() for m in (1.0, 10.0, 50.0)]
        assert losses[0] > losses[1] > losses[2]
        assert losses[2] < 1e-20

    @pytest.mark.parametrize("c", [2, 3, 7])
    def test_uniform_is_log_c(self, c):
        loss = T.cross_entropy(Tensor(np.zeros((5, c))), np.arange(5) % c)
        assert loss.item() == pytest.approx(math.log(c), rel=1e-15)

    def test_explicit_oracle(self):
        rng = np.random.default_rng(5)
        logits, labels = rng.normal(size=(4, 3)), np.array([2, 0, 1, 2])
        expected = 0.0
        for i in range(4):
            z = [math.exp(v) for v in logits[i]]
            p = [v / sum(z) for v in z]
            expected -= sum((1.0 if k == labels[i] else 0.0) * math.log(p[k]) for k in range(3))
        expected /= 4
        loss = T.cross_entropy(Tensor(logits), labels)
        assert abs(loss.item() - expected) < 1e-10

    def test_label_out_of_range(self):
        with pytest.raises(LabelIndexError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_gradient_with_row_weights(self):
        rng = np.random.default_rng(6)
        x = param(rng.normal(size=(5, 4)))
        labels, w = np.array([0, 3, 1, 1, 2]), np.array([1.0, 0.0, 1.0, 1.0, 0.0])
        check_grads(lambda: T.cross_entropy(x, labels, w), [x])


class TestBackward:
    def test_sum_of_squares(self):
        w = param([1.0, 2.0])
        T.backward(T.sum_(T.mul(w, w)))
        np.testing.assert_array_equal(w.grad, [2.0, 4.0])

    def test_non_scalar_loss(self):
        w = param([1.0, 2.0])
        with pytest.raises(DimensionError):
            T.backward(T.mul(w, w))

    def test_second_backward_raises(self):
        w = param([1.0, 2.0])
        loss = T.sum_(T.mul(w, w))
        T.backward(loss)
        with pytest.raises(GraphError):
            T.backward(loss)

    def test_frozen_tensor_receives_gradient(self):
        w = param([1.0, -1.0])
        w.frozen = True
        x = param([3.0, 4.0])
        T.backward(T.sum_(T.mul(T.mul(w, x), x)))
        np.testing.assert_array_equal(w.grad, [9.0, 16.0])
        np.testing.assert_array_equal(x.grad, [6.0, -8.0])

    def test_interior_nodes_hold_gradients(self):
        w = param([1.0, 2.0])
        h = T.mul(w, 3.0)
        T.backward(T.sum_(T.mul(h, h)))
        np.testing.assert_array_equal(h.grad, [6.0, 12.0])
        np.testing.assert_array_equal(w.grad, [18.0, 36.0])

    def test_shared_subexpression_visited_once(self):
        w = param([2.0])
        h = T.mul(w, w)
        T.backward(T.sum_(T.add(h, h)))
        np.testing.assert_array_equal(w.grad, [8.0])

    def test_gradients_accumulate(self):
        w = param([1.0, 2.0])
        T.backward(T.sum_(w))
        T.backward(T.sum_(T.mul(w, 2.0)))
        np.testing.assert_array_equal(w.grad, [3.0, 3.0])

    def test_no_grad_records_nothing(self):
        w = param([1.0])
        with T.no_grad():
            y = T.mul(w, w)
        assert not y.requires_grad


class TestElementwiseGradients:
    @pytest.mark.parametrize("op", [T.sigmoid, T.gelu, T.relu, lambda x: T.mul(x, x)])
    def test_unary(self, op):
        rng = np.random.default_rng(7)
        x = param(rng.normal(size=(3, 4)) + 0.05)   # keep clear of the ReLU kink
        w = rng.normal(size=(3, 4))
        check_grads(lambda: T.sum_(T.mul(op(x), w)), [x])

    def test_broadcast_add_sub(self):
        rng = np.random.default_rng(8)
        a, b = param(rng.normal(size=(2, 3, 4))), param(rng.normal(size=(4,)))
        c = param(rng.normal(size=(3, 1)))
        w = rng.normal(size=(2, 3, 4))
        check_grads(lambda: T.sum_(T.mul(T.sub(T.add(a, b), c), w)), [a, b, c])

    def test_sigmoid_extremes_finite(self):
        y = T.sigmoid(Tensor(np.array([-1e4, 0.0, 1e4]))).data
        np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])

    def test_shape_ops(self):
        rng = np.random.default_rng(9)
        x = param(rng.normal(size=(2, 3, 4)))
        w = rng.normal(size=(3, 2, 4))

        def loss():
            y = T.transpose(T.reshape(x, (2, 3, 4)), (1, 0, 2))
            z = T.concat([T.take(y, (slice(None), slice(0, 1))), T.take(y, (slice(None), slice(1, 2)))], axis=1)
            return T.add(T.sum_(T.mul(z, w)), T.mean(x))

        check_grads(loss, [x])

    def test_embedding_and_bag(self):
        rng = np.random.default_rng(10)
        table = param(rng.normal(size=(6, 3)))
        ids = np.array([[[1, 2], [2, 2]], [[5, 0], [4, 1]]])
        wts = rng.normal(size=ids.shape)
        w1, w2 = rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 2, 2, 3))
        check_grads(lambda: T.add(T.sum_(T.mul(T.embedding_bag(table, ids, wts), w1)),
                                  T.sum_(T.mul(T.embedding(table, ids), w2))), [table])

    def test_embedding_out_of_range(self):
        with pytest.raises(LabelIndexError):
            T.embedding(param(np.zeros((3, 2))), [0, 3])


class TestFusedOps:
    def test_linear_matches_matmul_add(self):
        rng = np.random.default_rng(11)
        x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
        out = T.linear(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, x @ w + b, rtol=1e-14)

    def test_linear_many_gradients(self):
        rng = np.random.default_rng(12)
        x = param(rng.normal(size=(2, 3, 4)))
        pairs = [(param(rng.normal(size=(4, k))), param(rng.normal(size=k))) for k in (4, 2, 3)]
        ws = [rng.normal(size=(2, 3, k)) for k in (4, 2, 3)]

        def loss():
            outs = T.linear_many(x, pairs)
            return T.sum_(T.concat([T.reshape(T.mul(o, w), (-1,)) for o, w in zip(outs, ws)]))

        check_grads(loss, [x] + [t for pair in pairs for t in pair])

    def test_attention_matches_unfused_composition(self):
        rng = np.random.default_rng(13)
        b, t, d, h = 2, 5, 6, 3
        q, k, v = (rng.normal(size=(b, t, d)) for _ in range(3))
        mask = np.where(np.triu(np.ones((t, t)), 1) > 0, -np.inf, 0.0)
        out = T.attention(Tensor(q), Tensor(k), Tensor(v), h, mask).data
        dk = d // h
        ref = np.zeros_like(out)
        for bi in range(b):
            for hi in range(h):
                sl = slice(hi * dk, (hi + 1) * dk)
                s = q[bi, :, sl] @ k[bi, :, sl].T / math.sqrt(dk) + mask
                a = np.exp(s - s.max(axis=1, keepdims=True))
                a /= a.sum(axis=1, keepdims=True)
                ref[bi, :, sl] = a @ v[bi, :, sl]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-14)

    def test_attention_gradients_with_dropout(self):
        rng = np.random.default_rng(14)
        q, k, v = (param(rng.normal(size=(2, 4, 6))) for _ in range(3))
        w = rng.normal(size=(2, 4, 6))
        mask = np.zeros((2, 1, 1, 4))
        mask[1, ..., 3] = -np.inf

        def loss():
            # same generator state on every call: a fixed dropout mask
            gen = np.random.default_rng(99)
            return T.sum_(T.mul(T.attention(q, k, v, 2, mask, dropout=0.3, rng=gen, training=True), w))

        check_grads(loss, [q, k, v])


class TestDropout:
    def test_identity_in_eval(self):
        x = Tensor(np.ones(10))
        assert T.dropout(x, 0.5, np.random.default_rng(0), training=False) is x

    def test_inverted_scaling_and_rate(self):
        x = Tensor(np.ones(200_000, dtype=np.float32))
        y = T.dropout(x, 0.25, np.random.default_rng(0), training=True).data
        kept = y != 0
        np.testing.assert_allclose(y[kept], 1 / 0.75, rtol=1e-6)
        assert abs(kept.mean() - 0.75) < 0.005

    def test_seeded_mask_is_reproducible(self):
        x = Tensor(np.ones(50))
        a = T.dropout(x, 0.5, np.random.default_rng(3), True).data
        b = T.dropout(x, 0.5, np.random.default_rng(3), True).data
        np.testing.assert_array_equal(a, b)
