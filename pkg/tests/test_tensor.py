import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchmoe import tensor as T
from patchmoe.nn import BatchNorm, Conv1x1, DWConv3x3, GroupNorm
from patchmoe.tensor import ConfigurationError, ContractError, DimensionError, Param, Tensor

from oracles import (
    batch_norm_two_pass,
    conv1x1_loops,
    dwconv3x3_loops,
    group_norm_two_pass,
    resize_nearest_loops,
)


def _leaf(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestTensorBasics:
    def test_tensor4_rejects_rank_and_nan(self):
        with pytest.raises(DimensionError, match="rank-4"):
            T.tensor4(np.zeros((2, 3, 4)))
        with pytest.raises(ContractError):
            T.tensor4(np.full((1, 1, 2, 2), np.nan))

    def test_precision_switch(self):
        T.set_precision("f32")
        assert Tensor(np.ones(3)).data.dtype == np.float32
        T.set_precision("f64")
        assert Tensor(np.ones(3)).data.dtype == np.float64
        with pytest.raises(ConfigurationError):
            T.set_precision("f16")

    def test_precision_context_restores(self):
        with T.precision("f32"):
            assert T.get_dtype() == np.float32
        assert T.get_dtype() == np.float64

    def test_backward_needs_scalar(self, rng):
        x = _leaf(rng, (1, 2, 2, 2))
        with pytest.raises(ContractError, match="scalar"):
            T.backward(T.relu(x))

    def test_gradient_accumulates_over_shared_use(self, rng):
        x = _leaf(rng, (1, 1, 2, 2))
        T.backward(T.sum_all(T.add(x, x)))
        np.testing.assert_array_equal(x.grad, np.full(x.shape, 2.0))

    def test_no_grad_records_nothing(self, rng):
        x = _leaf(rng, (1, 1, 2, 2))
        with T.no_grad():
            y = T.relu(x)
        assert not y.requires_grad and y.is_leaf()

    def test_scale_by_tensor_gradient(self, rng):
        x = _leaf(rng, (1, 2, 2, 2))
        s = Param(np.array([0.7]))
        T.backward(T.sum_all(T.scale(x, s)))
        np.testing.assert_allclose(s.grad, [x.data.sum()], rtol=1e-12)
        np.testing.assert_allclose(x.grad, np.full(x.shape, 0.7))


class TestConv:
    def test_conv1x1_matches_per_pixel_matmul(self, rng):
        x = rng.standard_normal((2, 5, 3, 4))
        m = Conv1x1(5, 3, rng)
        m.bias.data[:] = rng.standard_normal(3)
        out = m(Tensor(x)).data
        np.testing.assert_allclose(out, conv1x1_loops(x, m.weight.data, m.bias.data), atol=1e-12)

    def test_conv1x1_param_count(self, rng):
        assert Conv1x1(7, 4, rng).num_parameters() == 4 * 7 + 4

    def test_conv1x1_channel_error_names_axis(self, rng):
        m = Conv1x1(5, 3, rng)
        with pytest.raises(DimensionError, match="channel axis"):
            m(Tensor(np.zeros((1, 4, 2, 2))))

    def test_dwconv_matches_stencil(self, rng):
        x = rng.standard_normal((2, 3, 5, 4))
        m = DWConv3x3(3, rng)
        m.bias.data[:] = rng.standard_normal(3)
        np.testing.assert_allclose(m(Tensor(x)).data, dwconv3x3_loops(x, m.weight.data, m.bias.data), atol=1e-12)

    def test_dwconv_constant_input_border(self, rng):
        # Interior of a constant map sees the full kernel sum; borders lose the padded taps.
        m = DWConv3x3(1, rng)
        out = m(Tensor(np.ones((1, 1, 5, 5)))).data[0, 0]
        k = m.weight.data[0]
        assert out[2, 2] == pytest.approx(k.sum(), abs=1e-12)
        assert out[0, 2] == pytest.approx(k[1:].sum(), abs=1e-12)
        assert out[0, 0] == pytest.approx(k[1:, 1:].sum(), abs=1e-12)


class TestNormalization:
    def test_default_groups(self):
        assert [T.default_groups(c) for c in (1, 3, 4, 6, 8, 12)] == [1, 1, 4, 1, 4, 4]

    def test_group_norm_matches_two_pass(self, rng):
        x = rng.standard_normal((2, 8, 3, 3)) * 3 + 1
        m = GroupNorm(8)
        m.gamma.data[:] = rng.uniform(0.5, 2, 8)
        m.beta.data[:] = rng.standard_normal(8)
        ref = group_norm_two_pass(x, 4, m.gamma.data, m.beta.data)
        np.testing.assert_allclose(m(Tensor(x)).data, ref, atol=1e-10)

    def test_group_norm_constant_input_is_exactly_zero(self):
        out = GroupNorm(4)(Tensor(np.full((2, 4, 3, 3), 3.7))).data
        assert np.all(out == 0.0)

    def test_group_norm_bad_groups(self):
        with pytest.raises(ConfigurationError):
            GroupNorm(6, groups=4)

    def test_batch_norm_train_matches_two_pass_and_updates_stats(self, rng):
        x = rng.standard_normal((3, 4, 2, 2)) * 2 + 0.5
        m = BatchNorm(4)
        out = m(Tensor(x)).data
        np.testing.assert_allclose(out, batch_norm_two_pass(x, m.gamma.data, m.beta.data), atol=1e-10)
        n = 3 * 2 * 2
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3)) * n / (n - 1)
        np.testing.assert_allclose(m.state.running_mean, 0.1 * mean, atol=1e-12)
        np.testing.assert_allclose(m.state.running_var, 0.9 + 0.1 * var, atol=1e-12)

    def test_batch_norm_eval_uses_running_stats(self, rng):
        m = BatchNorm(2).eval()
        m.state.running_mean = np.array([1.0, -1.0])
        m.state.running_var = np.array([4.0, 0.25])
        out = m(Tensor(np.ones((1, 2, 1, 1)))).data.ravel()
        np.testing.assert_allclose(out, [0.0, 2.0 / np.sqrt(0.25 + 1e-5)], atol=1e-12)

    def test_batch_norm_needs_two_values(self):
        with pytest.raises(ContractError):
            BatchNorm(2)(Tensor(np.ones((1, 2, 1, 1))))


class TestSpatial:
    def test_softmax_all_equal_logits(self):
        w = T.softmax_over_channels(Tensor(np.zeros((1, 5, 2, 2)))).data
        np.testing.assert_array_equal(w, np.full((1, 5, 2, 2), 0.2))

    def test_softmax_masked_tail(self, rng):
        w = T.softmax_over_channels(Tensor(rng.standard_normal((2, 5, 3, 3))), active=4).data
        assert np.all(w[:, 4] == 0.0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 3), st.integers(2, 6), st.integers(0, 2 ** 31 - 1), st.floats(0.1, 30))
    def test_softmax_simplex(self, b, c, seed, spread):
        logits = np.random.default_rng(seed).standard_normal((b, c, 2, 3)) * spread
        w = T.softmax_over_channels(Tensor(logits)).data
        assert np.all(w > 0)
        assert np.max(np.abs(w.sum(axis=1) - 1.0)) <= 1e-12

    @pytest.mark.parametrize("src,dst", [((4, 4), (8, 8)), ((2, 3), (8, 9)), ((5, 7), (8, 3)), ((8, 8), (8, 8))])
    def test_resize_nearest(self, rng, src, dst):
        x = rng.standard_normal((1, 2) + src)
        out = T.resize_nearest(Tensor(x), *dst).data
        np.testing.assert_array_equal(out, resize_nearest_loops(x, *dst))

    def test_resize_nearest_gradient_sums_copies(self, rng):
        x = _leaf(rng, (1, 1, 2, 2))
        T.backward(T.sum_all(T.resize_nearest(x, 6, 4)))
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 6.0))

    def test_avg_pool_and_gap(self, rng):
        x = rng.standard_normal((1, 2, 4, 6))
        pooled = T.avg_pool2x2(Tensor(x)).data
        assert pooled[0, 1, 1, 2] == pytest.approx(x[0, 1, 2:4, 4:6].mean(), abs=1e-14)
        np.testing.assert_allclose(T.gap(Tensor(x)).data[:, :, 0, 0], x.mean(axis=(2, 3)), atol=1e-14)
        with pytest.raises(DimensionError):
            T.avg_pool2x2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_broadcast_spatial(self, rng):
        x = rng.standard_normal((2, 3, 1, 1))
        out = T.broadcast_spatial(Tensor(x), 4, 5).data
        assert out.shape == (2, 3, 4, 5) and np.all(out == x)

    def test_weighted_experts_rejects_nonzero_extra_weight(self, rng):
        experts = [Tensor(rng.standard_normal((1, 2, 2, 2))) for _ in range(4)]
        w = T.softmax_over_channels(Tensor(rng.standard_normal((1, 5, 2, 2))))
        with pytest.raises(ContractError):
            T.weighted_experts(w, experts)


class TestLosses:
    def test_bce_matches_direct_formula(self, rng):
        z = rng.standard_normal((1, 1, 4, 4))
        t = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
        p = 1 / (1 + np.exp(-z))
        ref = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
        assert float(T.bce_with_logits(Tensor(z), t).data) == pytest.approx(ref, rel=1e-12)

    def test_soft_dice_perfect_prediction_is_near_zero(self):
        t = np.zeros((1, 1, 4, 4))
        t[..., :2, :] = 1
        z = np.where(t > 0, 40.0, -40.0)
        assert float(T.soft_dice_loss(Tensor(z), t).data) == pytest.approx(0.0, abs=1e-12)
