import numpy as np
import pytest

from brushrl import autodiff as ad
from brushrl.autodiff import Tensor


def check_grad(fn, x, rel=1e-4, h=1e-5):
    t = Tensor(x.astype(np.float64), requires_grad=True)
    out = ad.tsum(fn(t))
    out.backward()
    num = ad.numeric_gradient(lambda v: float(ad.tsum(fn(Tensor(v))).data), x.astype(np.float64), h=h)
    assert ad.rel_error(t.grad, num) < rel


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestElementwise:
    def test_add_mul_chain(self, rng):
        x = rng.standard_normal((3, 4))
        check_grad(lambda t: ad.mul(ad.add(t, 2.0), t), x)

    def test_div(self, rng):
        x = rng.standard_normal((3, 4)) + 3.0
        check_grad(lambda t: ad.div(Tensor(np.ones((3, 4))), t), x)

    def test_activations(self, rng):
        x = rng.standard_normal((5, 5))
        for fn in (ad.tanh, ad.sigmoid, ad.exp):
            check_grad(fn, x)

    def test_log_sqrt(self, rng):
        x = rng.random((4, 4)) + 0.5
        check_grad(ad.log, x)
        check_grad(ad.sqrt, x)

    def test_relu_masks_negative(self):
        t = Tensor(np.array([-1.0, 0.5]), requires_grad=True)
        ad.tsum(ad.relu(t)).backward()
        assert t.grad.tolist() == [0.0, 1.0]


class TestShapes:
    def test_reshape_transpose(self, rng):
        x = rng.standard_normal((2, 3, 4))
        check_grad(lambda t: ad.transpose(ad.reshape(t, (4, 6)), (1, 0)), x)

    def test_concat_take(self, rng):
        x = rng.standard_normal((3, 4))
        check_grad(lambda t: ad.take(ad.concat([t, t], axis=1), 1, 2, 6), x)

    def test_broadcast_add(self, rng):
        x = rng.standard_normal((4,))
        base = Tensor(np.zeros((3, 4)))
        check_grad(lambda t: ad.add(base, t), x)

    def test_sum_axis(self, rng):
        x = rng.standard_normal((2, 3, 4))
        check_grad(lambda t: ad.tsum(t, axis=(0, 2)), x)


class TestMatmul:
    def test_gradcheck(self, rng):
        a = rng.standard_normal((4, 6))
        b = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
        check_grad(lambda t: ad.matmul(t, b), a)

    def test_inner_dim_error(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestFc:
    def test_identity_weight(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        out = ad.fc(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_weight_gives_bias(self):
        b = np.array([1.0, -2.0])
        out = ad.fc(Tensor(np.ones((4, 3))), Tensor(np.zeros((3, 2))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (4, 1)))

    def test_gradcheck(self, rng):
        x = rng.standard_normal((4, 6))
        w = rng.standard_normal((6, 3))
        b = rng.standard_normal(3)
        tw = Tensor(w, requires_grad=True)
        check_grad(lambda t: ad.fc(t, tw, Tensor(b)), x)
        tx = Tensor(x, requires_grad=True)
        check_grad(lambda t: ad.fc(tx, t, Tensor(b)), w)


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        k = Tensor(np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(ad.conv2d(x, k).data, x.data)

    def test_ones_kernel_center(self):
        x = Tensor(np.ones((1, 1, 4, 4)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, k, stride=1)
        assert out.shape == (1, 1, 4, 4)
        assert out.data[0, 0, 1, 1] == 9.0

    def test_stride2_halves(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        k = Tensor(rng.standard_normal((5, 3, 4, 4)))
        assert ad.conv2d(x, k, stride=2).shape == (2, 5, 4, 4)

    def test_gradcheck_input(self, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        k = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        check_grad(lambda t: ad.conv2d(t, k, stride=1), x)

    def test_gradcheck_kernel(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 6, 6)))
        k = rng.standard_normal((3, 2, 4, 4))
        check_grad(lambda t: ad.conv2d(x, t, stride=2), k)

    def test_transpose_upsamples(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 4, 4)))
        k = Tensor(rng.standard_normal((4, 2, 4, 4)))
        assert ad.conv2d(x, k, stride=2, transpose_op=True).shape == (1, 2, 8, 8)

    def test_transpose_gradcheck(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        k = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
        check_grad(lambda t: ad.conv2d(t, k, stride=2, transpose_op=True), x)
        tx = Tensor(x, requires_grad=True)
        check_grad(lambda t: ad.conv2d(tx, t, stride=2, transpose_op=True),
                   np.asarray(k.data, dtype=np.float64))

    def test_transpose_is_adjoint(self, rng):
        # <conv(x), y> == <x, conv_T(y)> for matching geometry
        x = Tensor(rng.standard_normal((1, 3, 8, 8)))
        k = Tensor(rng.standard_normal((5, 3, 4, 4)))
        y = Tensor(rng.standard_normal((1, 5, 4, 4)))
        lhs = float((ad.conv2d(x, k, stride=2).data * y.data).sum())
        kt = Tensor(np.transpose(k.data, (0, 1, 2, 3)))
        back = ad.conv2d(y, Tensor(np.moveaxis(k.data, 0, 0)), stride=2, transpose_op=True)
        rhs = float((back.data * x.data).sum())
        assert abs(lhs - rhs) < 1e-8

    def test_channel_error_names_shapes(self):
        with pytest.raises(ad.ShapeError, match="mismatch"):
            ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


class TestLstm:
    @staticmethod
    def make_params(d, h, rng=None, zero=False):
        keys_x = ["wxi", "wxf", "wxg", "wxo"]
        keys_h = ["whi", "whf", "whg", "who"]
        p = {}
        for k in keys_x:
            p[k] = Tensor(np.zeros((d, h)) if zero else rng.standard_normal((d, h)) * 0.3)
        for k in keys_h:
            p[k] = Tensor(np.zeros((h, h)) if zero else rng.standard_normal((h, h)) * 0.3)
        for k in ["bi", "bf", "bg", "bo"]:
            p[k] = Tensor(np.zeros(h))
        return p

    def test_zero_params_zero_state(self):
        p = self.make_params(3, 4, zero=True)
        h = Tensor(np.zeros((2, 4)))
        c = Tensor(np.zeros((2, 4)))
        h2, _ = ad.lstm_step(Tensor(np.ones((2, 3))), (h, c), p)
        np.testing.assert_array_equal(h2.data, np.zeros((2, 4)))

    def test_deterministic(self, rng):
        p = self.make_params(3, 4, rng)
        x = Tensor(rng.standard_normal((2, 3)))
        st = (Tensor(rng.standard_normal((2, 4))), Tensor(rng.standard_normal((2, 4))))
        a = ad.lstm_step(x, st, p)[0].data
        b = ad.lstm_step(x, st, p)[0].data
        np.testing.assert_array_equal(a, b)

    def test_h_bounded(self, rng):
        p = self.make_params(3, 4, rng)
        x = Tensor(rng.standard_normal((2, 3)) * 10)
        st = (Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))
        h2, _ = ad.lstm_step(x, st, p)
        assert np.all(np.abs(h2.data) < 1.0)

    @pytest.mark.parametrize("key", ["wxi", "whi", "wxf", "whf", "wxg", "whg", "wxo", "who"])
    def test_gradcheck_all_weights(self, rng, key):
        p = self.make_params(3, 4, rng)
        x = Tensor(rng.standard_normal((2, 3)))
        st = (Tensor(rng.standard_normal((2, 4)) * 0.1), Tensor(rng.standard_normal((2, 4)) * 0.1))

        def fn(t):
            q = dict(p)
            q[key] = t
            h2, c2 = ad.lstm_step(x, st, q)
            return ad.add(h2, c2)

        check_grad(fn, np.asarray(p[key].data, np.float64))


class TestSoftmaxCategorical:
    def test_uniform_probs(self, rng):
        logits = Tensor(np.zeros((2, 5)))
        probs, _, _ = ad.softmax_categorical(logits, rng)
        np.testing.assert_allclose(probs.data, 0.2, atol=1e-6)

    def test_rows_sum_to_one(self, rng):
        logits = Tensor(rng.standard_normal((8, 7)))
        probs, _, _ = ad.softmax_categorical(logits, rng)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)

    def test_saturated_logits(self, rng):
        logits = Tensor(np.tile([1000.0, 0.0, 0.0], (1000, 1)))
        _, samples, _ = ad.softmax_categorical(logits, rng)
        assert (samples == 0).all()

    def test_analytic_frequency(self):
        rng = np.random.default_rng(7)
        logits = Tensor(np.tile(np.log([1.0, 3.0]), (10_000, 1)))
        _, samples, _ = ad.softmax_categorical(logits, rng)
        assert abs(samples.mean() - 0.75) < 0.03

    def test_log_prob_consistency(self, rng):
        logits = Tensor(rng.standard_normal((16, 5)))
        probs, samples, lp = ad.softmax_categorical(logits, rng)
        expect = np.log(probs.data[np.arange(16), samples])
        np.testing.assert_allclose(lp.data, expect, atol=1e-9)

    def test_nonfinite_logits_raise(self, rng):
        with pytest.raises(ValueError, match="non-finite"):
            ad.softmax_categorical(Tensor(np.array([[np.nan, 0.0]])), rng)


class TestComposition:
    def test_fc_relu_fc_matches_monolithic_fd(self, rng):
        w1 = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
        w2 = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        x = rng.standard_normal((3, 5))
        check_grad(lambda t: ad.fc(ad.relu(ad.fc(t, w1)), w2), x)


class TestHigherOrder:
    def test_input_gradient_in_graph(self, rng):
        # d/dw of || dD/dx || flows through create_graph gradients
        w = Tensor(rng.standard_normal((4, 1)), requires_grad=True)
        x = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
        out = ad.tsum(ad.tanh(ad.fc(x, w)))
        (gx,) = ad.grad(out, [x], create_graph=True)
        norm = ad.sqrt(ad.tsum(ad.mul(gx, gx)))
        norm.backward()
        assert w.grad is not None

        def f(wv):
            tw = Tensor(wv)
            tx = Tensor(x.data.astype(np.float64), requires_grad=True)
            o = ad.tsum(ad.tanh(ad.fc(tx, tw)))
            (g,) = ad.grad(o, [tx])
            return float(np.sqrt((g.data**2).sum()))

        num = ad.numeric_gradient(f, np.asarray(w.data, np.float64))
        assert ad.rel_error(w.grad, num) < 1e-4

    def test_linear_critic_penalty_grad(self, rng):
        # D(x) = sum(x * w): grad wrt x is w, norm ||w||; d norm/dw = w/||w||
        w = Tensor(rng.standard_normal((6,)), requires_grad=True)
        x = Tensor(rng.standard_normal((6,)), requires_grad=True)
        out = ad.tsum(ad.mul(x, w))
        (gx,) = ad.grad(out, [x], create_graph=True)
        norm = ad.sqrt(ad.tsum(ad.mul(gx, gx)))
        norm.backward()
        expect = w.data / np.sqrt((w.data**2).sum())
        np.testing.assert_allclose(w.grad, expect, atol=1e-6)
