"""Gradient and algebra checks for the autodiff kernel.

Every layer type is checked against central finite differences; linear ops
are checked for additivity/homogeneity; hypothesis covers the resampling
identities on random shapes.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latdyn import autodiff as ad


def finite_diff(f, x, step=1e-6):
    """Central finite-difference gradient of a scalar function of an array."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f(x)
        flat[i] = old - step
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * step)
    return g


def check_param_grad(build_loss, arrays, rtol=1e-5, step=1e-6):
    """Compare reverse-mode grads of every input array with finite differences."""
    params = [ad.Tensor(a.copy(), is_param=True) for a in arrays]
    for p in params:
        p.grad = np.zeros_like(p.data)
    loss = build_loss(*params)
    ad.backward(loss)

    for j, a in enumerate(arrays):
        def f(x, j=j):
            probe = [ad.Tensor(arrays[i] if i != j else x) for i in range(len(arrays))]
            return float(build_loss(*probe).data)

        fd = finite_diff(f, a.copy(), step=step)
        scale = max(np.abs(fd).max(), 1e-8)
        assert np.abs(params[j].grad - fd).max() <= rtol * scale, f"input {j}"


rng = np.random.default_rng(7)


class TestElementwise:
    def test_elu_origin_and_asymptote(self):
        x = ad.tensor(np.array([0.0, -50.0, 2.0]))
        y = ad.elu(x)
        assert y.data[0] == 0.0
        assert y.data[1] == pytest.approx(-1.0, abs=1e-12)
        assert y.data[2] == 2.0

    def test_tanh_range(self):
        x = ad.tensor(np.array([0.0, 100.0, -100.0, 3.0]))
        y = ad.tanh(x)
        assert y.data[0] == 0.0
        assert np.all(np.abs(y.data) <= 1.0)
        # strictly inside (-1, 1) wherever float64 can resolve the gap
        assert np.abs(y.data[3]) < 1.0

    @pytest.mark.parametrize("point", [-2.0, -0.1, 0.1, 3.0])
    def test_derivatives_vs_finite_differences(self, point):
        for op in (ad.elu, ad.tanh):
            x = np.array([point])
            check_param_grad(lambda t: ad.sum_(op(t)), [x], rtol=1e-7, step=1e-7)


class TestLinear:
    def test_identity(self):
        x = ad.tensor(np.array([[1.0, 2.0, 3.0]]))
        w = ad.tensor(np.eye(3))
        b = ad.tensor(np.zeros(3))
        assert np.array_equal(ad.linear(x, w, b).data, x.data)

    def test_hand_example(self):
        out = ad.linear(
            ad.tensor(np.array([[2.0, 3.0]])),
            ad.tensor(np.array([[1.0, 1.0]])),
            ad.tensor(np.array([1.0])),
        )
        assert out.data.item() == pytest.approx(6.0)

    def test_gradients(self):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((2, 4))
        b = rng.standard_normal(2)
        check_param_grad(
            lambda xt, wt, bt: ad.sum_squares(ad.linear(xt, wt, bt)), [x, w, b], rtol=1e-7
        )

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeMismatch):
            ad.linear(ad.tensor(np.ones((1, 3))), ad.tensor(np.ones((2, 4))))


class TestConv:
    def test_identity_kernel(self):
        x = rng.standard_normal((2, 3, 8))
        k = np.zeros((3, 3, 3))
        for c in range(3):
            k[c, c, 1] = 1.0
        out = ad.conv(ad.tensor(x), ad.tensor(k))
        assert np.allclose(out.data, x, atol=1e-14)

    def test_all_ones_kernel_hand_example(self):
        x = ad.tensor(np.array([[[1.0, 2.0, 3.0]]]))
        k = ad.tensor(np.ones((1, 1, 3)))
        out = ad.conv(x, k, ad.tensor(np.zeros(1)))
        assert out.data.tolist() == [[[3.0, 6.0, 5.0]]]

    def test_identity_kernel_2d(self):
        x = rng.standard_normal((1, 2, 4, 6))
        k = np.zeros((2, 2, 3, 3))
        for c in range(2):
            k[c, c, 1, 1] = 1.0
        out = ad.conv(ad.tensor(x), ad.tensor(k))
        assert np.allclose(out.data, x, atol=1e-14)

    def test_kernel_gradient_1d(self):
        x = rng.standard_normal((1, 1, 8))
        k = rng.standard_normal((2, 1, 3))
        b = rng.standard_normal(2)
        check_param_grad(lambda xt, kt, bt: ad.sum_squares(ad.conv(xt, kt, bt)), [x, k, b], rtol=1e-6)

    def test_kernel_gradient_2d(self):
        x = rng.standard_normal((2, 2, 4, 4))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        check_param_grad(lambda xt, kt, bt: ad.sum_squares(ad.conv(xt, kt, bt)), [x, k, b], rtol=1e-6)

    def test_linearity_in_data(self):
        k = ad.tensor(rng.standard_normal((2, 1, 3)))
        a = rng.standard_normal((1, 1, 6))
        b = rng.standard_normal((1, 1, 6))
        sum_out = ad.conv(ad.tensor(a + 2.5 * b), k).data
        parts = ad.conv(ad.tensor(a), k).data + 2.5 * ad.conv(ad.tensor(b), k).data
        assert np.allclose(sum_out, parts, atol=1e-13)

    def test_channel_mismatch(self):
        with pytest.raises(ad.ShapeMismatch):
            ad.conv(ad.tensor(np.ones((1, 2, 8))), ad.tensor(np.ones((1, 3, 3))))


class TestModulate:
    def test_identity_at_zero(self):
        h = rng.standard_normal((2, 3, 5))
        out = ad.modulate(ad.tensor(h), ad.tensor(np.zeros((2, 6))))
        assert np.array_equal(out.data, h)

    def test_gradients(self):
        h = rng.standard_normal((2, 3, 5))
        gb = 0.3 * rng.standard_normal((2, 6))
        check_param_grad(lambda ht, gt: ad.sum_squares(ad.modulate(ht, gt)), [h, gb], rtol=1e-6)


class TestResample:
    def test_down_hand_example(self):
        x = ad.tensor(np.array([[[0.0, 1.0, 2.0, 3.0]]]))
        assert ad.resample_down(x).data.tolist() == [[[0.5, 2.5]]]

    def test_constant_preserved(self):
        for shape in [(1, 1, 8), (1, 2, 4, 6)]:
            x = ad.tensor(np.full(shape, 3.7))
            assert np.allclose(ad.resample_down(x).data, 3.7, atol=1e-15)
            assert np.allclose(ad.resample_up(x).data, 3.7, atol=1e-15)

    def test_up_down_ramp_interior(self):
        ramp = np.arange(16.0).reshape(1, 1, 16)
        out = ad.resample_up(ad.resample_down(ad.tensor(ramp))).data
        assert np.allclose(out[0, 0, 1:-1], ramp[0, 0, 1:-1], atol=1e-12)

    def test_odd_extent_rejected(self):
        with pytest.raises(ad.OddExtent):
            ad.resample_down(ad.tensor(np.ones((1, 1, 5))))

    def test_gradients(self):
        x = rng.standard_normal((1, 2, 8))
        check_param_grad(lambda t: ad.sum_squares(ad.resample_up(t)), [x], rtol=1e-7)
        check_param_grad(lambda t: ad.sum_squares(ad.resample_down(t)), [x], rtol=1e-7)
        x2 = rng.standard_normal((1, 1, 4, 4))
        check_param_grad(lambda t: ad.sum_squares(ad.resample_up(t)), [x2], rtol=1e-7)
        check_param_grad(lambda t: ad.sum_squares(ad.resample_down(t)), [x2], rtol=1e-7)

    @settings(max_examples=25, deadline=None)
    @given(m=st.integers(2, 32), c=st.integers(1, 3), seed=st.integers(0, 2**31))
    def test_up_is_linear(self, m, c, seed):
        r = np.random.default_rng(seed)
        a = r.standard_normal((1, c, m))
        b = r.standard_normal((1, c, m))
        lhs = ad.resample_up(ad.tensor(2.0 * a - b)).data
        rhs = 2.0 * ad.resample_up(ad.tensor(a)).data - ad.resample_up(ad.tensor(b)).data
        assert np.allclose(lhs, rhs, atol=1e-12)


class TestBackward:
    def test_sum_gradient_all_ones(self):
        x = ad.Tensor(rng.standard_normal((3, 4)), is_param=True)
        x.grad = np.zeros_like(x.data)
        ad.backward(ad.sum_(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_fanout_accumulates(self):
        x = ad.Tensor(np.array([2.0]), is_param=True)
        x.grad = np.zeros_like(x.data)
        y = ad.add(x, x)  # dy/dx = 2
        ad.backward(ad.sum_(y))
        assert x.grad[0] == 2.0

    def test_tanh_quadratic_loss(self):
        w = rng.standard_normal((4, 4))
        x = rng.standard_normal((1, 4))
        check_param_grad(
            lambda wt: ad.sum_squares(ad.tanh(ad.linear(ad.tensor(x), wt))),
            [w],
            rtol=1e-5,
            step=1e-5,
        )

    def test_unrolled_rk2_rollout_gradient(self):
        # 50 explicit RK2 steps on a learnable linear latent field.
        a = 0.1 * rng.standard_normal((4, 4))
        u0 = rng.standard_normal((1, 4))
        dt = 0.05

        def rollout(at):
            u = ad.tensor(u0)
            for _ in range(50):
                k1 = ad.linear(u, at)
                k2 = ad.linear(ad.add(u, ad.smul(k1, 2 * dt / 3)), at)
                u = ad.add(u, ad.add(ad.smul(k1, dt / 4), ad.smul(k2, 3 * dt / 4)))
            return ad.sum_squares(u)

        check_param_grad(rollout, [a], rtol=1e-4, step=1e-6)

    def test_random_deep_compositions(self):
        # Depth-6 random stacks of every layer type vs finite differences.
        for seed in range(3):
            r = np.random.default_rng(seed)
            x = r.standard_normal((1, 2, 8))
            k1 = r.standard_normal((2, 2, 3)) * 0.7
            k2 = r.standard_normal((2, 2, 3)) * 0.7
            gb = 0.2 * r.standard_normal((1, 4))

            def net(xt, k1t, k2t, gbt):
                h = ad.tanh(ad.conv(xt, k1t))
                h = ad.resample_down(h)
                h = ad.modulate(h, gbt)
                h = ad.elu(ad.conv(h, k2t))
                h = ad.resample_up(h)
                return ad.sum_squares(h)

            check_param_grad(net, [x, k1, k2, gb], rtol=1e-5, step=1e-6)

    def test_concat_and_rows(self):
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((4, 3))
        check_param_grad(
            lambda at, bt: ad.sum_squares(ad.rows(ad.concat([at, bt], axis=0), 1, 5)),
            [a, b],
            rtol=1e-7,
        )

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ad.ShapeMismatch):
            ad.backward(ad.tensor(np.ones(3)))

    def test_determinism(self):
        def run():
            r = np.random.default_rng(123)
            x = ad.Tensor(r.standard_normal((2, 2, 8)), is_param=True)
            x.grad = np.zeros_like(x.data)
            k = ad.Tensor(r.standard_normal((2, 2, 3)), is_param=True)
            k.grad = np.zeros_like(k.data)
            loss = ad.sum_squares(ad.tanh(ad.conv(x, k)))
            ad.backward(loss)
            return loss.data.copy(), x.grad.copy(), k.grad.copy()

        l1, gx1, gk1 = run()
        l2, gx2, gk2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gk1, gk2)

    def test_no_grad_skips_recording(self):
        with ad.no_grad():
            y = ad.tanh(ad.tensor(np.ones(3)))
        assert y._parents == () and y._backward is None


class TestAdam:
    def test_zero_gradient_no_motion(self):
        store = ad.ParamStore()
        p = store.add("w", np.array([1.0, -2.0]))
        ad.adam_step(store, lr=0.1)
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_hand_computed(self):
        # After one step with gradient g: m_hat=g, v_hat=g^2, so the update is
        # -lr * g / (|g| + eps), i.e. a sign step of magnitude ~lr.
        store = ad.ParamStore()
        g = np.array([0.3, -1.7])
        p = store.add("w", np.zeros(2))
        p.grad[...] = g
        lr = 5e-4
        ad.adam_step(store, lr=lr, betas=(0.9, 0.999), eps=1e-8)
        expected = -lr * g / (np.abs(g) + 1e-8)
        assert np.allclose(p.data, expected, rtol=1e-12)
        assert store.step_count == 1

    def test_decoupled_weight_decay(self):
        store = ad.ParamStore()
        p = store.add("w", np.array([2.0]))
        ad.adam_step(store, lr=0.1, weight_decay=0.5)  # zero grad: pure decay
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))

    def test_duplicate_name_rejected(self):
        store = ad.ParamStore()
        store.add("w", np.zeros(1))
        with pytest.raises(ValueError):
            store.add("w", np.zeros(1))

    def test_save_load_roundtrip(self):
        store = ad.ParamStore()
        store.add("a", rng.standard_normal(3))
        vals = store.copy_values()
        store["a"].data[...] = 0.0
        store.load_values(vals)
        assert np.array_equal(store["a"].data, vals["a"])
