"""Tape mechanics and per-op gradient checks against finite differences."""

import numpy as np
import pytest

from crossdense import tensor as T
from crossdense.errors import ShapeError
from crossdense.gradcheck import check_gradients, fd_gradient, max_rel_error
from crossdense.tensor import Tape, Tensor, backward

TOL = 1e-4


def rand(*shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).standard_normal(shape) * scale


class TestTapeMechanics:
    def test_sum_of_squares_gradient(self):
        x = Tensor(rand(5, seed=1), requires_grad=True)
        with Tape() as tape:
            y = T.sum_all(T.mul(x, x))
        backward(tape, y)
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)

    def test_constant_output_gives_zero_grad(self):
        x = Tensor(rand(4, seed=2), requires_grad=True)
        zero = Tensor(np.zeros(4))
        with Tape() as tape:
            y = T.sum_all(T.mul(x, zero))
        backward(tape, y)
        np.testing.assert_array_equal(x.grad, np.zeros(4))

    def test_fanout_accumulates(self):
        x1 = Tensor(rand(3, seed=3), requires_grad=True)
        x2 = Tensor(x1.data.copy(), requires_grad=True)
        with Tape() as tape:
            y = T.sum_all(T.add(x1, x1))
        backward(tape, y)
        with Tape() as tape2:
            y2 = T.sum_all(T.scale(x2, 2.0))
        backward(tape2, y2)
        np.testing.assert_array_equal(x1.grad, x2.grad)
        np.testing.assert_array_equal(x1.grad, np.full(3, 2.0))

    def test_grad_accumulates_across_backward_calls(self):
        x = Tensor(rand(3, seed=4), requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                y = T.sum_all(x)
            backward(tape, y)
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))

    def test_non_scalar_output_rejected(self):
        x = Tensor(rand(3), requires_grad=True)
        with Tape() as tape:
            y = T.relu(x)
        with pytest.raises(ShapeError):
            backward(tape, y)

    def test_tape_is_topologically_ordered(self):
        x = Tensor(rand(3), requires_grad=True)
        with Tape() as tape:
            y = T.sum_all(T.mul(T.relu(x), x))
        for nid, node in enumerate(tape.nodes):
            assert all(i < nid for i in node.inputs)

    def test_no_recording_without_tape(self):
        x = Tensor(rand(3), requires_grad=True)
        y = T.relu(x)
        assert y.requires_grad
        tape = Tape()
        assert tape.node_id(y) is None

    def test_ops_on_non_grad_inputs_not_recorded(self):
        x = Tensor(rand(3))
        with Tape() as tape:
            T.relu(x)
        assert tape.nodes == []


def _gradcheck_op(build_loss, params, tol=TOL):
    report = check_gradients(build_loss, params, tol=tol)
    assert report.passed, "\n".join(report.lines())


class TestOpGradients:
    def test_conv2d(self):
        x = Tensor(rand(2, 3, 6, 6, seed=10), requires_grad=True)
        w = Tensor(rand(4, 3, 3, 3, seed=11, scale=0.5), requires_grad=True)
        b = Tensor(rand(4, seed=12, scale=0.1), requires_grad=True)
        _gradcheck_op(
            lambda: T.sum_all(T.mul(c := T.conv2d(x, w, b, stride=2, padding=1), c)),
            [("x", x), ("w", w), ("b", b)])

    def test_conv2d_no_bias(self):
        x = Tensor(rand(1, 2, 5, 5, seed=13), requires_grad=True)
        w = Tensor(rand(3, 2, 3, 3, seed=14, scale=0.5), requires_grad=True)
        _gradcheck_op(
            lambda: T.sum_all(T.mul(c := T.conv2d(x, w, stride=1, padding=0), c)),
            [("x", x), ("w", w)])

    def test_maxpool2d(self):
        x = Tensor(rand(2, 2, 6, 6, seed=20), requires_grad=True)
        _gradcheck_op(
            lambda: T.sum_all(T.mul(p := T.maxpool2d(x, 3, 2, 1), p)),
            [("x", x)])

    def test_maxpool_tie_routes_to_first(self):
        x = Tensor(np.full((1, 1, 2, 2), 1.0), requires_grad=True)
        with Tape() as tape:
            y = T.sum_all(T.maxpool2d(x, 2, 2, 0))
        backward(tape, y)
        np.testing.assert_array_equal(
            x.grad.reshape(2, 2), [[1.0, 0.0], [0.0, 0.0]])

    def test_avgpool2d(self):
        x = Tensor(rand(2, 3, 6, 6, seed=21), requires_grad=True)
        _gradcheck_op(
            lambda: T.sum_all(T.mul(p := T.avgpool2d(x, 2, 2), p)),
            [("x", x)])

    def test_global_avg_pool(self):
        x = Tensor(rand(2, 4, 5, 5, seed=22), requires_grad=True)
        _gradcheck_op(
            lambda: T.sum_all(T.mul(p := T.global_avg_pool(x), p)),
            [("x", x)])

    def test_relu(self):
        # offset away from the kink so finite differences stay clean
        data = rand(40, seed=23)
        data[np.abs(data) < 1e-2] += 0.05
        x = Tensor(data, requires_grad=True)
        _gradcheck_op(lambda: T.sum_all(T.mul(r := T.relu(x), r)), [("x", x)])

    def test_linear(self):
        x = Tensor(rand(3, 5, seed=24), requires_grad=True)
        w = Tensor(rand(4, 5, seed=25, scale=0.5), requires_grad=True)
        b = Tensor(rand(4, seed=26, scale=0.1), requires_grad=True)
        _gradcheck_op(
            lambda: T.sum_all(T.mul(o := T.linear(x, w, b), o)),
            [("x", x), ("w", w), ("b", b)])

    def test_batchnorm_train(self):
        x = Tensor(rand(3, 2, 4, 4, seed=27), requires_grad=True)
        gamma = Tensor(1 + 0.1 * rand(2, seed=28), requires_grad=True)
        beta = Tensor(0.1 * rand(2, seed=29), requires_grad=True)

        def loss():
            # fresh buffers per call: the check must not drift running stats
            rm, rv = Tensor(np.zeros(2)), Tensor(np.ones(2))
            o = T.batchnorm2d(x, gamma, beta, rm, rv, "train")
            return T.sum_all(T.mul(o, o))

        _gradcheck_op(loss, [("x", x), ("gamma", gamma), ("beta", beta)])

    def test_batchnorm_eval(self):
        x = Tensor(rand(2, 3, 4, 4, seed=30), requires_grad=True)
        gamma = Tensor(1 + 0.1 * rand(3, seed=31), requires_grad=True)
        beta = Tensor(0.1 * rand(3, seed=32), requires_grad=True)
        rm = Tensor(0.3 * rand(3, seed=33))
        rv = Tensor(1 + 0.2 * np.abs(rand(3, seed=34)))
        _gradcheck_op(
            lambda: T.sum_all(T.mul(o := T.batchnorm2d(x, gamma, beta, rm, rv, "eval"), o)),
            [("x", x), ("gamma", gamma), ("beta", beta)])

    def test_concat_channels(self):
        a = Tensor(rand(2, 2, 3, 3, seed=35), requires_grad=True)
        b = Tensor(rand(2, 3, 3, 3, seed=36), requires_grad=True)
        _gradcheck_op(
            lambda: T.sum_all(T.mul(o := T.concat_channels([a, b]), o)),
            [("a", a), ("b", b)])

    def test_softmax(self):
        x = Tensor(rand(3, 5, seed=37), requires_grad=True)
        _gradcheck_op(lambda: T.sum_all(T.mul(p := T.softmax(x), p)), [("x", x)])

    def test_log(self):
        x = Tensor(np.abs(rand(10, seed=38)) + 0.5, requires_grad=True)
        _gradcheck_op(lambda: T.sum_all(T.mul(l := T.log(x), l)), [("x", x)])

    def test_normalize_channels(self):
        x = Tensor(rand(2, 3, 4, 4, seed=39), requires_grad=True)
        mean, std = np.array([0.1, 0.2, 0.3]), np.array([0.5, 1.0, 2.0])
        _gradcheck_op(
            lambda: T.sum_all(T.mul(o := T.normalize_channels(x, mean, std), o)),
            [("x", x)])

    def test_dropout_backward_respects_mask(self):
        x = Tensor(rand(50, seed=40), requires_grad=True)
        with Tape() as tape:
            out = T.dropout(x, 0.3, "train", np.random.default_rng(99))
            y = T.sum_all(out)
        backward(tape, y)
        survivors = out.data != 0
        np.testing.assert_allclose(x.grad[survivors], 1 / 0.7, rtol=1e-6)
        np.testing.assert_array_equal(x.grad[~survivors], 0.0)

    def test_softmax_cross_entropy_grad_closed_form(self):
        rng = np.random.default_rng(41)
        logits = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        labels = rng.integers(0, 6, size=4)
        with Tape() as tape:
            loss = T.softmax_cross_entropy(logits, labels)
        backward(tape, loss)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        p[np.arange(4), labels] -= 1
        np.testing.assert_allclose(logits.grad, p / 4, rtol=1e-10)

    def test_softmax_cross_entropy_vs_fd(self):
        rng = np.random.default_rng(42)
        logits = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        labels = rng.integers(0, 5, size=3)
        _gradcheck_op(lambda: T.softmax_cross_entropy(logits, labels),
                      [("logits", logits)])


class TestGradcheckHarness:
    def test_fd_gradient_on_quadratic(self):
        x = Tensor(rand(4, seed=50))
        g = fd_gradient(lambda: T.sum_all(T.mul(x, x)), x)
        np.testing.assert_allclose(g, 2 * x.data, rtol=1e-6)

    def test_max_rel_error_scale_invariance(self):
        a = np.array([1.0, 2.0])
        assert max_rel_error(a, a) == 0.0
        assert max_rel_error(1e3 * a, 1e3 * a * (1 + 1e-5)) == pytest.approx(1e-5, rel=0.1)

    def test_detects_broken_gradient(self):
        x = Tensor(rand(4, seed=51), requires_grad=True)

        def loss():
            return T.sum_all(T.mul(x, x))

        report = check_gradients(loss, [("x", x)])
        assert report.passed
        # corrupt the analytic side by scaling grads after the fact
        x.grad = None
        with Tape() as tape:
            l = loss()
        backward(tape, l)
        x.grad *= 1.5
        err = max_rel_error(x.grad, fd_gradient(loss, x))
        assert err > 0.2
