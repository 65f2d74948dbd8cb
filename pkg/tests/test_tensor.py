import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ftlab import tensor as T
from ftlab.errors import ContractError, ShapeError


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def central_diff(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        g.flat[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).standard_normal((3, 3))
        out = T.matmul(T.Tensor(a), T.Tensor(np.eye(3)))
        np.testing.assert_array_equal(out.data, a)

    def test_zero_annihilates(self):
        b = np.random.default_rng(1).standard_normal((3, 4))
        out = T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(b))
        assert out.dims == [2, 4]
        assert not out.data.any()

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 2))
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        np.testing.assert_allclose(out.data, naive_matmul(a, b), rtol=0, atol=1e-12)

    def test_shape_error_names_dims(self):
        with pytest.raises(ShapeError, match=r"\[2, 3\].*\[4, 5\]"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 5))))

    def test_backward_rules(self):
        rng = np.random.default_rng(3)
        a = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        upstream = rng.standard_normal((3, 2))
        with T.Tape() as tape:
            loss = T.dot(T.matmul(a, b), T.Tensor(upstream))
        T.backward(loss, tape)
        np.testing.assert_allclose(a.grad, upstream @ b.data.T, atol=1e-14)
        np.testing.assert_allclose(b.grad, a.data.T @ upstream, atol=1e-14)

    @pytest.mark.parametrize("shared", [True, False])
    def test_batched_gradients(self, shared):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 5)) if shared else rng.standard_normal((2, 4, 5))
        w = rng.standard_normal((2, 3, 5))
        err = T.grad_check(lambda x, y: T.dot(T.matmul(x, y), T.Tensor(w)), [a, b])
        assert err <= 1e-8


class TestElementwise:
    def test_tanh_zero(self):
        assert T.tanh(T.Tensor(0.0)).item() == 0.0

    def test_add_zero(self):
        x = np.random.default_rng(0).standard_normal((2, 3))
        np.testing.assert_array_equal(T.elementwise("add", T.Tensor(x), 0.0).data, x)

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((3, 2))))

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            T.elementwise("relu", T.Tensor(1.0))

    def test_gelu_gradient_at_17_points(self):
        x = np.random.default_rng(17).standard_normal(17) * 2
        t = T.Tensor(x, requires_grad=True)
        with T.Tape() as tape:
            y = T.sum_all(T.gelu(t))
        T.backward(y, tape)
        fd = central_diff(lambda v: T.sum_all(T.gelu(T.Tensor(v))).item(), x)
        assert rel_err(t.grad, fd) <= 1e-6

    @pytest.mark.parametrize("op", ["add", "sub", "mul"])
    def test_binary_gradients(self, op):
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        w = rng.standard_normal((3, 2))
        assert T.grad_check(lambda x, y: T.dot(T.elementwise(op, x, y), T.Tensor(w)), [a, b]) <= 1e-8

    def test_scalar_broadcast_gradient(self):
        rng = np.random.default_rng(6)
        a, s = rng.standard_normal((3, 2)), np.array(1.7)
        w = rng.standard_normal((3, 2))
        assert T.grad_check(lambda x, y: T.dot(T.mul(x, y), T.Tensor(w)), [a, s]) <= 1e-8


class TestSoftmax:
    def test_equal_logits(self):
        np.testing.assert_array_equal(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_shift_invariance(self):
        x = np.random.default_rng(0).uniform(-5, 5, (4, 6))
        a = T.softmax(T.Tensor(x)).data
        b = T.softmax(T.Tensor(x + 123.25)).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_large_logits_closed_form(self):
        out = T.softmax(T.Tensor([1000.0, 1000.5])).data
        p0 = 1.0 / (1.0 + math.exp(0.5))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [p0, 1.0 - p0], rtol=0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-20, 20)))
    def test_rows_sum_to_one_and_log_consistent(self, x):
        s = T.softmax(T.Tensor(x), axis=-1).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
        ls = T.log_softmax(T.Tensor(x), axis=-1).data
        np.testing.assert_allclose(ls, np.log(s), atol=1e-10)

    @pytest.mark.parametrize("axis", [0, 1, -1])
    def test_gradients(self, axis):
        rng = np.random.default_rng(7)
        x, w = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        assert T.grad_check(lambda v: T.dot(T.softmax(v, axis), T.Tensor(w)), [x]) <= 1e-6
        assert T.grad_check(lambda v: T.dot(T.log_softmax(v, axis), T.Tensor(w)), [x]) <= 1e-6


class TestLayerNorm:
    def test_constant_row_gives_zero(self):
        out = T.layer_norm(T.Tensor(np.full((1, 4), 3.0)), T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_mean_and_std_follow_affine(self):
        x = np.random.default_rng(0).standard_normal((5, 64))
        out = T.layer_norm(T.Tensor(x), T.Tensor(np.full(64, 2.5)), T.Tensor(np.full(64, -1.0)), eps=0.0)
        np.testing.assert_allclose(out.data.mean(axis=-1), -1.0, atol=1e-12)
        np.testing.assert_allclose(out.data.std(axis=-1), 2.5, atol=1e-12)

    def test_hidden_mismatch(self):
        with pytest.raises(ShapeError):
            T.layer_norm(T.Tensor(np.zeros((2, 4))), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))

    def test_gradient(self):
        rng = np.random.default_rng(8)
        x, g, b = rng.standard_normal((2, 8)), rng.standard_normal(8), rng.standard_normal(8)
        w = rng.standard_normal((2, 8))
        err = T.grad_check(lambda *a: T.dot(T.layer_norm(*a), T.Tensor(w)), [x, g, b])
        assert err <= 1e-5


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.Tensor(np.random.default_rng(0).standard_normal((2, 3)), requires_grad=True)
        with T.Tape() as tape:
            y = T.sum_all(x)
        T.backward(y, tape)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_self_dot_gives_twice_x(self):
        x = T.Tensor(np.random.default_rng(1).standard_normal(5), requires_grad=True)
        with T.Tape() as tape:
            y = T.dot(x, x)
        T.backward(y, tape)
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=0)

    def test_unreached_leaf_gets_zero(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        unused = T.Tensor([[1.0]], requires_grad=True)
        with T.Tape() as tape:
            y = T.sum_all(x)
        grads = T.backward(y, tape, wrt={"x": x, "unused": unused})
        np.testing.assert_array_equal(grads["unused"], [[0.0]])
        np.testing.assert_array_equal(unused.grad, [[0.0]])

    def test_non_scalar_loss(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            y = T.scale(x, 2.0)
        with pytest.raises(ContractError):
            T.backward(y, tape)

    def test_fan_out_accumulates(self):
        x = T.Tensor([0.3, -0.4], requires_grad=True)
        with T.Tape() as tape:
            y = T.sum_all(T.add(T.tanh(x), T.mul(x, x)))
        T.backward(y, tape)
        np.testing.assert_allclose(x.grad, 1 - np.tanh(x.data) ** 2 + 2 * x.data, atol=1e-15)

    def test_tape_is_topological(self):
        x = T.Tensor(np.ones((2, 2)), requires_grad=True)
        with T.Tape() as tape:
            y = T.sum_all(T.tanh(T.matmul(x, x)))
        seen = {id(x)}
        for node in tape.nodes:
            assert all(id(i) in seen for i in node.inputs if i.requires_grad)
            seen.add(id(node.output))
        assert tape.nodes[-1].output is y

    def test_no_tape_no_recording(self):
        x = T.Tensor([1.0], requires_grad=True)
        y = T.tanh(x)
        assert y.requires_grad is False

    def test_forward_bit_identical(self):
        rng = np.random.default_rng(9)
        a, b = rng.standard_normal((4, 6)), rng.standard_normal((6, 3))

        def f():
            return T.log_softmax(T.gelu(T.matmul(T.Tensor(a), T.Tensor(b)))).data.tobytes()

        assert f() == f()


class TestGradCheck:
    def test_linear_is_exact(self):
        w = np.random.default_rng(0).standard_normal(6)
        err = T.grad_check(lambda x: T.dot(x, T.Tensor(w)), [np.random.default_rng(1).standard_normal(6)])
        assert err <= 1e-10

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(2)
        targets = np.array([0, 2, 1])

        def f(x):
            return T.scale(T.sum_all(T.pick(T.log_softmax(x), targets)), -1.0 / 3)

        assert T.grad_check(f, [rng.standard_normal((3, 4))]) <= 1e-6

    def test_detects_wrong_backward(self):
        def bad_square(x):
            # derivative should be 2x; this rule claims 3x
            return T.record_op(x.data**2, (x,), lambda g: (3.0 * g * x.data,))

        err = T.grad_check(lambda x: T.sum_all(bad_square(x)), [np.array([0.5, -1.5, 2.0])])
        assert err > 1e-2

    @pytest.mark.parametrize(
        "build",
        [
            lambda x: T.sum_all(T.mul(T.reshape(x, (3, 2)), T.Tensor(np.arange(6.0).reshape(3, 2)))),
            lambda x: T.sum_all(T.mul(T.transpose(x, (1, 0)), T.Tensor(np.arange(6.0).reshape(3, 2)))),
            lambda x: T.sum_all(T.tanh(T.take(x, 1, axis=1))),
            lambda x: T.sum_all(T.tanh(T.concat([x, T.scale(x, 2.0)], axis=-1))),
            lambda x: T.sum_all(T.tanh(T.embedding(x, np.array([[0, 1], [1, 1]])))),
            lambda x: T.sum_all(T.tanh(T.add_bias(T.Tensor(np.ones((4, 3))), T.take(x, 0, axis=0)))),
            lambda x: T.mean_all(T.tanh(T.add_constant(x, np.array([1.0, -2.0, 0.5])))),
        ],
        ids=["reshape", "transpose", "take", "concat", "embedding", "add_bias", "add_constant"],
    )
    def test_structural_ops(self, build):
        x = np.random.default_rng(3).standard_normal((2, 3))
        assert T.grad_check(build, [x]) <= 1e-6


class TestMasks:
    def test_dropout_zero_is_identity(self):
        x = T.Tensor([1.0, 2.0])
        assert T.dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_dropout_mask_gradient(self):
        x = np.random.default_rng(0).standard_normal((4, 5))
        err = T.grad_check(lambda v: T.sum_all(T.tanh(T.dropout(v, 0.4, np.random.default_rng(11)))), [x])
        assert err <= 1e-6

    def test_mixout_gradient_fixed_mask(self):
        rng = np.random.default_rng(1)
        w, w_pre = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        err = T.grad_check(lambda v: T.sum_all(T.tanh(T.mixout(v, w_pre, 0.6, np.random.default_rng(5)))), [w])
        assert err <= 1e-6

    def test_mixout_gradient_only_through_kept(self):
        rng = np.random.default_rng(2)
        w = T.Tensor(rng.standard_normal((20, 20)), requires_grad=True)
        w_pre = rng.standard_normal((20, 20))
        with T.Tape() as tape:
            out = T.mixout(w, w_pre, 0.7, np.random.default_rng(3))
            loss = T.sum_all(out)
        T.backward(loss, tape)
        replaced = out.data == w_pre
        np.testing.assert_allclose(np.unique(w.grad), [0.0, 1.0 / 0.3], rtol=1e-14)
        np.testing.assert_array_equal(w.grad == 0.0, replaced)
