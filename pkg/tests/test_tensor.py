import itertools

import numpy as np
import pytest

from wavediff import tensor as T
from wavediff.gradcheck import gradcheck
from wavediff.tensor import Tensor


def conv_loop_oracle(x, w, b, stride, pad):
    B, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n, o, i, j, c, u, v in itertools.product(range(B), range(Co), range(Ho), range(Wo), range(C),
                                                 range(kh), range(kw)):
        out[n, o, i, j] += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
    return out + b[None, :, None, None]


class TestConv2d:
    def test_constant_input_sum(self):
        y = T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.full((1, 1, 2, 2), 0.5)), stride=2)
        assert y.shape == (1, 1, 1, 1)
        assert y.item() == 2.0

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        w = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
    def test_loop_oracle(self, rng, stride, pad):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
        np.testing.assert_allclose(y.data, conv_loop_oracle(x, w, b, stride, pad), rtol=0, atol=1e-12)

    def test_reflect_padding(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(1, 2, 3, 3))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
        ref = T.conv2d(Tensor(xp), Tensor(w)).data
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), padding=1, pad_mode="reflect").data, ref,
                                   atol=1e-12)

    def test_output_extent(self):
        y = T.conv2d(Tensor(np.zeros((1, 1, 7, 6))), Tensor(np.zeros((2, 1, 3, 3))), stride=2, padding=1)
        assert y.shape == (1, 2, 4, 3)

    def test_low_memory_path_matches(self, rng, monkeypatch):
        x, w, b = rng.normal(size=(2, 3, 9, 9)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        ref = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1).data
        monkeypatch.setattr(T, "_COLS_BYTES_LIMIT", 0)
        with T.no_grad():
            y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1).data
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_nonpositive_stride(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


class TestDense:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(T.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)

    def test_zero_weight_gives_bias(self):
        b = np.array([1.0, -2.0, 3.0])
        y = T.dense(Tensor(np.ones((2, 5))), Tensor(np.zeros((3, 5))), Tensor(b)).data
        np.testing.assert_array_equal(y, np.tile(b, (2, 1)))

    def test_loop_oracle(self, rng):
        x, w, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=4)
        ref = np.array([[sum(x[i, k] * w[j, k] for k in range(3)) + b[j] for j in range(4)] for i in range(2)])
        np.testing.assert_allclose(T.dense(Tensor(x), Tensor(w), Tensor(b)).data, ref, atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestElementwise:
    def test_silu_zero(self):
        assert T.silu(Tensor(np.zeros(1))).data[0] == 0.0

    def test_leaky_relu_slope(self):
        assert T.leaky_relu(Tensor(np.array([-1.0]))).data[0] == pytest.approx(-0.2, abs=0)

    def test_add_negation(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        assert np.all(T.add(x, T.neg(x)).data == 0.0)

    def test_dispatch(self, rng):
        x = rng.normal(size=(2, 3))
        np.testing.assert_allclose(T.elementwise("tanh", Tensor(x)).data, np.tanh(x))
        np.testing.assert_allclose(T.elementwise("scale", Tensor(x), value=2.5).data, 2.5 * x)
        np.testing.assert_allclose(T.elementwise("mul", Tensor(x), Tensor(x)).data, x * x)

    def test_broadcast_size_one_axes(self, rng):
        a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 1, 1))
        np.testing.assert_allclose(T.add(Tensor(a), Tensor(b)).data, a + b)

    @pytest.mark.parametrize("shape", [(3, 4), (2, 3, 4, 5), (4, 4)])
    def test_shape_mismatch_rejected(self, shape):
        with pytest.raises(T.ShapeError):
            T.add(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros(shape)))

    def test_softplus_is_stable(self):
        y = T.softplus(Tensor(np.array([-800.0, 0.0, 800.0]))).data
        np.testing.assert_allclose(y, [0.0, np.log(2.0), 800.0])


class TestGroupNorm:
    def test_constant_input_gives_beta(self):
        beta = np.array([0.5, -1.0, 2.0, 3.0])
        y = T.group_norm(Tensor(np.full((2, 4, 3, 3), 7.0)), 2, Tensor(np.full(4, 3.0)), Tensor(beta)).data
        np.testing.assert_allclose(y, np.broadcast_to(beta[None, :, None, None], y.shape), atol=1e-12)

    def test_single_group_layer_norm_oracle(self, rng):
        x = rng.normal(size=(2, 4, 3, 3))
        mu = x.mean(axis=(1, 2, 3), keepdims=True)
        var = x.var(axis=(1, 2, 3), keepdims=True)
        np.testing.assert_allclose(T.group_norm(Tensor(x), 1).data, (x - mu) / np.sqrt(var + 1e-6), atol=1e-12)

    def test_group_statistics(self, rng):
        x = 3.0 + 2.0 * rng.normal(size=(2, 8, 5, 5))
        y = T.group_norm(Tensor(x), 4, Tensor(np.ones(8)), Tensor(np.zeros(8))).data.reshape(2, 4, -1)
        assert np.abs(y.mean(axis=2)).max() < 1e-10
        assert np.abs(y.var(axis=2) - 1.0).max() < 1e-6 * 4  # eps shifts the variance by ~eps/var

    def test_indivisible(self):
        with pytest.raises(T.ShapeError):
            T.group_norm(Tensor(np.zeros((1, 6, 2, 2))), 4)


def attention_oracle(x, wq, wk, wv, wo):
    B, C, H, W = x.shape
    tok = x.reshape(B, C, H * W).transpose(0, 2, 1)
    q, k, v = (tok @ w.reshape(C, C).T for w in (wq, wk, wv))
    logits = q @ k.transpose(0, 2, 1) / np.sqrt(C)
    a = np.exp(logits - logits.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    out = (a @ v) @ wo.reshape(C, C).T
    return x + out.transpose(0, 2, 1).reshape(B, C, H, W)


class TestAttention:
    def weights(self, rng, C):
        return [Tensor(rng.normal(size=(C, C, 1, 1))) for _ in range(4)]

    def test_single_token(self, rng):
        C = 3
        x = rng.normal(size=(2, C, 1, 1))
        wq, wk, wv, wo = self.weights(rng, C)
        y = T.self_attention(Tensor(x), wq, wk, wv, wo).data
        v = np.einsum("oc,bc->bo", wv.data[:, :, 0, 0], x[:, :, 0, 0])
        expect = x[:, :, 0, 0] + np.einsum("oc,bc->bo", wo.data[:, :, 0, 0], v)
        np.testing.assert_allclose(y[:, :, 0, 0], expect, atol=1e-12)

    def test_permutation_equivariance(self, rng):
        C = 4
        x = rng.normal(size=(1, C, 1, 6))
        w = self.weights(rng, C)
        perm = rng.permutation(6)
        y = T.self_attention(Tensor(x), *w).data
        yp = T.self_attention(Tensor(x[..., perm]), *w).data
        np.testing.assert_allclose(yp, y[..., perm], atol=1e-12)

    def test_softmax_oracle(self, rng):
        C = 3
        x = rng.normal(size=(2, C, 2, 2))
        w = self.weights(rng, C)
        np.testing.assert_allclose(T.self_attention(Tensor(x), *w).data,
                                   attention_oracle(x, *(t.data for t in w)), atol=1e-10)

    def test_nonfinite_rejected(self, rng):
        x = rng.normal(size=(1, 2, 2, 2))
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(FloatingPointError):
            T.self_attention(Tensor(x), *self.weights(rng, 2))

    def test_heads_must_divide(self, rng):
        with pytest.raises(T.ShapeError):
            T.self_attention(Tensor(np.zeros((1, 3, 2, 2))), *self.weights(rng, 3), heads=2)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        g = T.backward(T.sum_(x))
        np.testing.assert_array_equal(g[x], np.ones((3, 4)))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_half_square_gives_x(self, rng):
        x = Tensor(rng.normal(size=(5,)), requires_grad=True)
        T.backward(T.scale(T.sum_(T.mul(x, x)), 0.5))
        np.testing.assert_allclose(x.grad, x.data, atol=1e-15)

    def test_fanout_accumulates(self, rng):
        x = Tensor(rng.normal(size=(4,)), requires_grad=True)
        y = T.add(T.mul(x, x), T.scale(x, 3.0))
        (g,) = T.grad(T.sum_(y), [x])
        np.testing.assert_allclose(g, 2 * x.data + 3.0, atol=1e-14)

    def test_non_scalar_loss(self, rng):
        x = Tensor(rng.normal(size=(2,)), requires_grad=True)
        with pytest.raises(T.GraphError):
            T.backward(T.scale(x, 2.0))

    def test_detached_loss(self):
        with pytest.raises(T.GraphError):
            T.backward(T.sum_(Tensor(np.ones(3))))

    def test_no_grad_records_nothing(self, rng):
        x = Tensor(rng.normal(size=(2,)), requires_grad=True)
        with T.no_grad():
            y = T.sum_(T.mul(x, x))
        assert not y.requires_grad

    def test_composed_net_finite_differences(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 6, 6)))
        w1 = Tensor(0.4 * rng.normal(size=(4, 3, 3, 3)), requires_grad=True, name="w1")
        b1 = Tensor(rng.normal(size=4), requires_grad=True, name="b1")
        g = Tensor(1 + 0.1 * rng.normal(size=4), requires_grad=True, name="gamma")
        w2 = Tensor(0.3 * rng.normal(size=(5, 4 * 9)), requires_grad=True, name="w2")

        def f():
            h = T.silu(T.group_norm(T.conv2d(x, w1, b1, 1, 1), 2, g))
            h = T.avg_pool2(h)
            h = T.dense(T.reshape(h, (2, 4 * 9)), w2)
            return T.sum_(T.tanh(h))

        rep = gradcheck(f, [w1, b1, g, w2], 1e-4, n_coords=None)
        assert sum(rep.coords_checked.values()) >= 100
        assert rep.passed, rep.summary()

    @pytest.mark.parametrize("op", ["conv2d", "dense", "dwt"])
    def test_linear_backward_is_input_independent(self, rng, op):
        from wavediff.wavelet import dwt_packed
        w = Tensor(rng.normal(size=(3, 2, 3, 3) if op == "conv2d" else (3, 4)))
        shape = {"conv2d": (1, 2, 4, 4), "dense": (2, 4), "dwt": (1, 2, 4, 4)}[op]
        fn = {"conv2d": lambda x: T.conv2d(x, w, padding=1), "dense": lambda x: T.dense(x, w),
              "dwt": dwt_packed}[op]
        seed_out = None
        grads = []
        for _ in range(2):
            x = Tensor(rng.normal(size=shape), requires_grad=True)
            y = fn(x)
            seed_out = rng.normal(size=y.shape) if seed_out is None else seed_out
            grads.append(T.grad(y, [x], seed_out)[0])
        np.testing.assert_array_equal(grads[0], grads[1])


def test_determinism(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    a = T.group_norm(T.conv2d(Tensor(x), Tensor(w), padding=1), 2).data
    b = T.group_norm(T.conv2d(Tensor(x), Tensor(w), padding=1), 2).data
    assert a.tobytes() == b.tobytes()


def test_flop_counter():
    with T.count_flops() as c:
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), padding=1)
        T.dense(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 3))))
    assert c.by_op == {"conv2d": 288, "dense": 12}
