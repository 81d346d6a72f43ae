import threading

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ewpf import tensor as T
from ewpf.errors import ConfigError, ContractError, DimensionError
from ewpf.tensor import Tape, Tensor, finite_diff_check

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def param(shape, rng, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        m = np.arange(9.0).reshape(3, 3)
        out = T.matmul(Tensor(np.eye(3)), Tensor(m))
        np.testing.assert_array_equal(out.data, m)

    def test_hand_example(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_zero(self):
        out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).normal(size=(3, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_leading_dims_must_match(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((3, 4, 5))))

    def test_transpose_identity(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
        lhs = T.transpose(T.matmul(Tensor(a), Tensor(b))).data
        rhs = T.matmul(T.transpose(Tensor(b)), T.transpose(Tensor(a))).data
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)
        np.testing.assert_allclose(T.matmul(Tensor(np.eye(5)), Tensor(a)).data, a, atol=1e-12)

    def test_backward_rule(self):
        rng = np.random.default_rng(1)
        a, b = param((3, 4), rng), param((4, 2), rng)
        g = rng.normal(size=(3, 2))
        with Tape() as tape:
            loss = T.sum(T.mul(T.matmul(a, b), Tensor(g)))
        tape.backward(loss)
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_ln2(self):
        np.testing.assert_allclose(T.softmax_lastdim(Tensor([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)

    def test_large_logits_match_extended_precision(self):
        out = T.softmax_lastdim(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        mpmath.mp.dps = 50
        denom = mpmath.exp(1000) + mpmath.exp(0)
        oracle = [float(mpmath.exp(1000) / denom), float(mpmath.exp(0) / denom)]
        np.testing.assert_allclose(out, oracle, rtol=1e-15, atol=1e-300)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (4, 7), elements=finite), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        s = T.softmax_lastdim(Tensor(x)).data
        np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-9)
        shifted = T.softmax_lastdim(Tensor(x + c)).data
        np.testing.assert_allclose(shifted, s, atol=1e-9)


class TestLayerNorm:
    def ones(self, d):
        return Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True)

    def test_constant_slice(self):
        g, b = self.ones(4)
        out = T.layer_norm(Tensor([5.0, 5.0, 5.0, 5.0]), g, b, 1e-5)
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_two_element_hand_value(self):
        g, b = self.ones(2)
        out = T.layer_norm(Tensor([1.0, -1.0]), g, b, 1e-5)
        # mean 0, variance 1 -> x / sqrt(1 + eps)
        expected = np.array([1.0, -1.0]) / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)

    def test_zero_gain_gives_bias(self):
        bias = np.array([0.5, -1.0, 2.0])
        out = T.layer_norm(Tensor(np.random.default_rng(0).normal(size=(4, 3))), Tensor(np.zeros(3)), Tensor(bias))
        np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (4, 3)))

    def test_moments(self):
        x = np.random.default_rng(3).normal(3.0, 7.0, size=(6, 16))
        g, b = self.ones(16)
        y = T.layer_norm(Tensor(x), g, b, 1e-12).data
        np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-6)

    def test_wrong_gain_shape(self):
        with pytest.raises(DimensionError):
            T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(T.relu(Tensor([-3.0, -0.5])).data, [0.0, 0.0])

    def test_gradient_gate(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum(T.mul(T.relu(x), Tensor([1.0, 1.0])))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_subgradient_at_zero_is_zero(self):
        x = Tensor([0.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum(T.relu(x))
        tape.backward(loss)
        assert x.grad[0] == 0.0


class TestDropout:
    def test_identity_cases(self):
        x = Tensor(np.arange(10.0))
        rng = np.random.default_rng(0)
        assert T.dropout(x, 0.0, True, rng) is x
        assert T.dropout(x, 0.5, False, rng) is x

    def test_statistics(self):
        rng = np.random.default_rng(1234)
        x = Tensor(np.ones(100_000))
        out = T.dropout(x, 0.5, True, rng).data
        survivors = np.count_nonzero(out) / out.size
        assert abs(survivors - 0.5) <= 0.01
        assert abs(out.mean() - 1.0) <= 0.02
        assert set(np.unique(out)) <= {0.0, 2.0}

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_bad_probability(self, p):
        with pytest.raises(ConfigError):
            T.dropout(Tensor([1.0]), p, True, np.random.default_rng(0))


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_product_rule(self):
        x = Tensor([2.0], requires_grad=True)
        w = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum(T.mul(x, w))
        tape.backward(loss)
        assert w.grad.tolist() == [2.0]
        assert x.grad.tolist() == [3.0]

    def test_gradients_accumulate(self):
        x = Tensor([1.0, 1.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = T.sum(x)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = T.scale(x, 2.0)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_loss_off_tape_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        loss = T.sum(x)
        with pytest.raises(ContractError):
            T.backward(loss, Tape())

    def test_reused_node_visited_once(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
            loss = T.sum(T.add(y, y))
        assert len(tape) == 3
        tape.backward(loss)
        assert x.grad.tolist() == [12.0]

    def test_no_recording_without_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = T.scale(x, 2.0)
        assert not y.requires_grad


class TestFiniteDiffCheck:
    def test_quadratic(self):
        w = Tensor([3.0], requires_grad=True)
        err = finite_diff_check(lambda: T.sum(T.mul(w, w)), [w], eps=1e-5)
        assert err < 1e-8
        assert w.grad.tolist() == [6.0]

    def test_linear_is_exact(self):
        rng = np.random.default_rng(0)
        w = param((10,), rng)
        c = Tensor(rng.normal(size=10))
        err = finite_diff_check(lambda: T.sum(T.mul(w, c)), [w], eps=1e-5)
        assert err < 1e-9

    def test_eps_range(self):
        w = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            finite_diff_check(lambda: T.sum(w), [w], eps=1e-2)


def _fd(f, tensors):
    return finite_diff_check(f, tensors, eps=1e-5, n_samples=200)


class TestLayerGradients:
    """Each primitive against central differences (eps=1e-5, rel. error < 1e-4)."""

    rng = np.random.default_rng(11)

    def test_matmul_batched(self):
        a, b = param((2, 3, 4), self.rng), param((2, 4, 5), self.rng)
        c = Tensor(self.rng.normal(size=(2, 3, 5)))
        assert _fd(lambda: T.sum(T.mul(T.matmul(a, b), c)), [a, b]) < 1e-4

    def test_layer_norm(self):
        x, g, b = param((3, 6), self.rng), param((6,), self.rng), param((6,), self.rng)
        c = Tensor(self.rng.normal(size=(3, 6)))
        assert _fd(lambda: T.sum(T.mul(T.layer_norm(x, g, b), c)), [x, g, b]) < 1e-4

    def test_softmax(self):
        x = param((3, 5), self.rng)
        c = Tensor(self.rng.normal(size=(3, 5)))
        assert _fd(lambda: T.sum(T.mul(T.softmax_lastdim(x), c)), [x]) < 1e-4

    def test_relu(self):
        x = param((4, 5), self.rng)
        c = Tensor(self.rng.normal(size=(4, 5)))
        assert _fd(lambda: T.sum(T.mul(T.relu(x), c)), [x]) < 1e-4

    def test_sigmoid_tanh(self):
        x = param((4, 5), self.rng)
        c = Tensor(self.rng.normal(size=(4, 5)))
        assert _fd(lambda: T.sum(T.mul(T.mul(T.sigmoid(x), T.tanh(x)), c)), [x]) < 1e-4

    def test_shape_ops(self):
        x = param((2, 3, 4), self.rng)
        c = Tensor(self.rng.normal(size=(2, 4, 3)))

        def f():
            y = T.reshape(T.swapaxes(x, -1, -2), (2, 4, 3))
            z = T.concat([y[:, 2:, :], y[:, :2, :]], axis=1)
            return T.sum(T.mul(z, c))

        assert _fd(f, [x]) < 1e-4

    def test_bias_broadcast(self):
        x, b = param((3, 4), self.rng), param((4,), self.rng)
        c = Tensor(self.rng.normal(size=(3, 4)))
        assert _fd(lambda: T.sum(T.mul(T.mul(T.add(x, b), b), c)), [x, b]) < 1e-4

    def test_expand_stack(self):
        x = param((3,), self.rng)
        c = Tensor(self.rng.normal(size=(2, 2, 3)))
        assert _fd(lambda: T.sum(T.mul(T.stack([T.expand(x, (2,)), T.expand(x, (2,))], axis=0), c)), [x]) < 1e-4


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(7)
        a, b = param((4, 4), rng), param((4, 4), rng)
        with Tape() as tape:
            loss = T.sum(T.softmax_lastdim(T.dropout(T.matmul(a, b), 0.3, True, rng)))
        tape.backward(loss)
        return loss.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


def test_tapes_are_thread_confined():
    results = {}

    def worker(k):
        x = Tensor([float(k)], requires_grad=True)
        with Tape() as tape:
            loss = T.sum(T.mul(x, x))
        tape.backward(loss)
        results[k] = (len(tape), x.grad[0])

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {k: (2, 2.0 * k) for k in range(8)}
