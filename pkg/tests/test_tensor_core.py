import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfgnet.autograd import (
    NonFiniteError,
    TapeError,
    Tensor,
    backward,
    load_params,
    no_grad,
    ops,
    reset_tape,
    save_params,
)
from sfgnet.autograd.checkpoint import CheckpointError
from sfgnet.autograd.gradcheck import check_gradients, numerical_grad, relative_error

from oracles import OP_CASES, rand_input


def loop_conv(x, k, stride, pad):
    """Direct six-nested-loop cross-correlation."""
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def loop_conv_grads(x, k, g, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(k)
    Ho, Wo = g.shape[2], g.shape[3]
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                gk[o, c, u, v] += g[b, o, i, j] * xp[b, c, i * stride + u, j * stride + v]
                                gxp[b, c, i * stride + u, j * stride + v] += g[b, o, i, j] * k[o, c, u, v]
    return gxp[:, :, pad:pad + H, pad:pad + W], gk


class TestConv2d:
    def test_ones(self):
        out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        np.testing.assert_array_equal(out.data, [[[[9.0]]]])

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 1, 5, 4))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = ops.conv2d(Tensor(x), Tensor(k), padding=1)
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_matches_loop_nest(self, stride, pad):
        rng = np.random.default_rng(1)
        x = rng.uniform(-2, 2, size=(2, 2, 5, 5))
        k = rng.uniform(-2, 2, size=(3, 2, 3, 3))
        xt, kt = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
        out = ops.conv2d(xt, kt, stride=stride, padding=pad)
        np.testing.assert_allclose(out.data, loop_conv(x, k, stride, pad), atol=1e-10, rtol=0)
        g = rng.normal(size=out.shape)
        backward(ops.sum(out * Tensor(g)))
        gx, gk = loop_conv_grads(x, k, g, stride, pad)
        np.testing.assert_allclose(xt.grad, gx, atol=1e-10, rtol=0)
        np.testing.assert_allclose(kt.grad, gk, atol=1e-10, rtol=0)

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
            ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))

    def test_linear_over_input_channels(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(2, 2, 6, 6))
        b = rng.normal(size=(2, 3, 6, 6))
        k = rng.normal(size=(4, 5, 3, 3))
        whole = ops.conv2d(Tensor(np.concatenate([a, b], axis=1)), Tensor(k), padding=1).data
        parts = (ops.conv2d(Tensor(a), Tensor(k[:, :2]), padding=1).data
                 + ops.conv2d(Tensor(b), Tensor(k[:, 2:]), padding=1).data)
        np.testing.assert_allclose(whole, parts, atol=1e-12)


class TestPrelu:
    def test_definition(self):
        out = ops.prelu(Tensor([-2.0, 3.0]), Tensor([0.25]))
        np.testing.assert_array_equal(out.data, [-0.5, 3.0])

    def test_zero_slope_is_relu(self):
        x = np.linspace(-2, 2, 9).reshape(1, 1, 3, 3)
        out = ops.prelu(Tensor(x), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, np.maximum(x, 0))

    def test_slope_gradient_fd(self):
        a = Tensor([0.25], requires_grad=True)
        f = lambda: ops.prelu(Tensor([-2.0]), a).sum()  # noqa: E731
        num = numerical_grad(f, a)
        reset_tape()
        backward(f())
        assert a.grad[0] == pytest.approx(-2.0, abs=1e-12)
        assert num[0] == pytest.approx(-2.0, abs=1e-8)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            ops.prelu(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros(2)))


class TestBatchNorm:
    def test_constant_channel_gives_beta(self):
        x = Tensor(np.full((4, 2, 3, 3), 7.0))
        out = ops.batch_norm(x, Tensor([1.5, 2.0]), Tensor([0.3, -0.1]))
        np.testing.assert_allclose(out.data[:, 0], 0.3)
        np.testing.assert_allclose(out.data[:, 1], -0.1)

    def test_two_sample_symmetry(self):
        x = Tensor(np.array([[0.0, 0.0], [2.0, 2.0]]))
        out = ops.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
        expected = np.array([-1.0, 1.0]) / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data[:, 0], expected, atol=1e-15)

    def test_eval_mode_uses_batch_statistics(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(5, 3, 2, 2)))
        g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
        stats = ops.RunningStats.zeros(3)
        tr = ops.batch_norm(x, g, b, "train", stats)
        ev = ops.batch_norm(x, g, b, "eval", stats)
        np.testing.assert_array_equal(tr.data, ev.data)
        assert stats.count == 1

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.uniform(-2, 2, size=(3, 2, 2, 2)), requires_grad=True)
        g = Tensor(rng.uniform(0.5, 2, size=2), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, size=2), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 2, 2)))
        errs = check_gradients(lambda: ops.sum(ops.batch_norm(x, g, b) * w), [x, g, b])
        assert max(errs) < 1e-6

    def test_single_value_per_channel_errors(self):
        with pytest.raises(ValueError):
            ops.batch_norm(Tensor(np.zeros((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


class TestBackward:
    def test_quadratic(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        backward(ops.sum(w * w))
        np.testing.assert_array_equal(w.grad, [2.0, 4.0])

    def test_max_pooled_conv_fd(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(-2, 2, size=(2, 2, 6, 6)), requires_grad=True)
        k = Tensor(rng.uniform(-2, 2, size=(3, 2, 3, 3)), requires_grad=True)
        f = lambda: ops.sum(ops.max_pool2d(ops.conv2d(x, k, padding=1)) ** 2)  # noqa: E731
        assert max(check_gradients(f, [x, k])) < 1e-5

    def test_detached_gets_no_grad(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        d = w.detach()
        v = Tensor([3.0], requires_grad=True)
        backward(ops.sum(d * v))
        assert w.grad is None
        assert v.grad[0] == 3.0

    def test_second_backward_errors(self):
        w = Tensor([1.0], requires_grad=True)
        loss = ops.sum(w * w)
        backward(loss)
        with pytest.raises(TapeError):
            backward(loss)

    def test_non_scalar_errors(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            backward(w * w)

    def test_accumulates_until_zeroed(self):
        w = Tensor([3.0], requires_grad=True)
        backward(ops.sum(w * w))
        backward(ops.sum(w * w))
        assert w.grad[0] == 12.0
        w.zero_grad()
        backward(ops.sum(w * w))
        assert w.grad[0] == 6.0

    def test_tape_order_is_topological(self):
        reset_tape()
        w = Tensor([1.0, 2.0], requires_grad=True)
        y = ops.exp(w) * w
        loss = ops.sum(y)
        nodes = loss._node.tape.nodes
        seen = set()
        for n in nodes:
            for t in n.inputs:
                assert t._node is None or id(t._node) in seen
            seen.add(id(n))
        backward(loss)

    def test_no_grad_records_nothing(self):
        tape = reset_tape()
        w = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = w * w
        assert len(tape) == 0 and not y.requires_grad

    def test_nan_raises(self):
        with pytest.raises(NonFiniteError):
            ops.log(Tensor([0.0, 1.0]))
        with pytest.raises(NonFiniteError):
            ops.div(Tensor([1.0]), Tensor([0.0]))

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(6)
            x = Tensor(rng.normal(size=(2, 2, 6, 6)))
            k = Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)
            reset_tape()
            backward(ops.sum(ops.softmax(ops.global_avg_pool(ops.conv2d(x, k, padding=1)), axis=1) ** 3))
            return k.grad
        assert run().tobytes() == run().tobytes()


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_central_differences(name):
    fn, shapes = OP_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    inputs = [rand_input(rng, s) for s in shapes]
    weight = Tensor(rng.normal(size=fn(*inputs).shape))
    errs = check_gradients(lambda: ops.sum(fn(*inputs) * weight), inputs)
    assert max(errs) < 1e-4, dict(zip(range(len(errs)), errs))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_gradient_property(seed):
    rng = np.random.default_rng(seed)
    a = rand_input(rng, (2, 3))
    w = Tensor(rng.normal(size=(2, 3)))
    assert check_gradients(lambda: ops.sum(ops.softmax(a, axis=1) * w), [a])[0] < 1e-4


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-12])) < 1e-5


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        params = {"a.kernels": rng.normal(size=(3, 2, 3, 3)), "b": np.array([np.pi, -0.0, 1e-300]),
                  "scalar": np.array(2.5)}
        p = tmp_path / "x.ckpt"
        save_params(p, params)
        back = load_params(p)
        assert list(back) == list(params)
        for k in params:
            assert back[k].tobytes() == params[k].tobytes()
        save_params(tmp_path / "y.ckpt", back)
        assert p.read_bytes() == (tmp_path / "y.ckpt").read_bytes()

    def test_corrupt(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"not a zip")
        with pytest.raises(CheckpointError):
            load_params(p)
