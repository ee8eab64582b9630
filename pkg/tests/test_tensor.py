import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prnet import tensor as tn
from prnet.tensor import Tensor
from prnet.testing import gradcheck, naive_conv2d


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


class TestConv2d:
    def test_box_sum_of_padded_ones(self):
        out = tn.conv2d(tn.ones((1, 1, 3, 3)), tn.ones((1, 1, 3, 3)), tn.zeros((1,)), 1, 1)
        assert out.shape == (1, 1, 3, 3)
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0

    def test_degenerate_1x1(self):
        out = tn.conv2d(Tensor([[[[2.5]]]]), Tensor([[[[-3.0]]]]), Tensor([0.5]), 1, 0)
        assert out.data.item() == pytest.approx(2.5 * -3.0 + 0.5)

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 4, 8, 8))
        w = rng.standard_normal((6, 4, 3, 3))
        b = rng.standard_normal(6)
        out = tn.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, 1, 1), atol=1e-5)

    @settings(max_examples=100, deadline=None)
    @given(n=st.integers(1, 2), c=st.integers(1, 4), co=st.integers(1, 5),
           h=st.integers(1, 9), w=st.integers(1, 9), k=st.sampled_from([1, 2, 3, 5]),
           stride=st.integers(1, 3), padding=st.integers(0, 2), seed=st.integers(0, 2**16))
    def test_random_geometries(self, n, c, co, h, w, k, stride, padding, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (n, c, h, w)).astype(np.float32)
        wt = rng.uniform(-1, 1, (co, c, k, k)).astype(np.float32)
        b = rng.uniform(-1, 1, co).astype(np.float32)
        span_h, span_w = h + 2 * padding - k, w + 2 * padding - k
        if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
            with pytest.raises(tn.GeometryError):
                tn.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, padding)
            return
        out = tn.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, padding)
        np.testing.assert_allclose(out.data, naive_conv2d(x, wt, b, stride, padding), atol=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(tn.DimensionError):
            tn.conv2d(tn.ones((1, 3, 4, 4)), tn.ones((2, 4, 3, 3)), None, 1, 1)

    def test_non_integer_extent(self):
        with pytest.raises(tn.GeometryError):
            tn.conv2d(tn.ones((1, 1, 6, 6)), tn.ones((1, 1, 3, 3)), None, 2, 0)


class TestInstanceNorm:
    def test_constant_plane_is_zero(self):
        out = tn.instance_norm(Tensor(np.full((1, 1, 4, 4), 5.0)), tn.ones((1,)), tn.zeros((1,)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_already_standard(self):
        x = t64([[[[-1.0, 1.0]]]], grad=False)
        out = tn.instance_norm(x, t64([1.0]), t64([0.0]), eps=1e-12)
        np.testing.assert_allclose(out.data, [[[[-1.0, 1.0]]]], atol=1e-9)

    def test_plane_statistics(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 3, 5, 5)) * 4 + 2)
        out = tn.instance_norm(x, tn.ones((3,)), tn.zeros((3,))).data.astype(np.float64)
        assert np.abs(out.mean(axis=(2, 3))).max() < 1e-6
        assert np.abs(out.var(axis=(2, 3)) - 1).max() < 1e-4

    def test_scale_shape_checked(self):
        with pytest.raises(tn.DimensionError):
            tn.instance_norm(tn.ones((1, 3, 2, 2)), tn.ones((2,)), tn.zeros((2,)))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(tn.relu(Tensor([-2.0, 0.0, 3.0])).data, [0, 0, 3])

    def test_sigmoid_tanh_at_zero(self):
        assert tn.sigmoid(Tensor([0.0])).data[0] == 0.5
        assert tn.tanh_op(Tensor([0.0])).data[0] == 0.0

    # beyond |x| ~ 9 both saturate to the float32 bounds
    @given(st.lists(st.floats(-8, 8), min_size=1, max_size=50))
    def test_activation_ranges(self, xs):
        x = Tensor(xs)
        s = tn.sigmoid(x).data
        t = tn.tanh(x).data
        assert ((s > 0) & (s < 1)).all()
        assert ((t > -1) & (t < 1)).all()

    def test_sigmoid_no_overflow(self):
        s = tn.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert s[0] == 0.0 and s[1] == 1.0

    def test_concat_layout(self):
        a = Tensor(np.zeros((1, 2, 2, 2)))
        b = Tensor(np.ones((1, 3, 2, 2)))
        out = tn.concat_channels([a, b])
        assert out.shape == (1, 5, 2, 2)
        np.testing.assert_array_equal(out.data[:, :2], 0)
        np.testing.assert_array_equal(out.data[:, 2:], 1)

    def test_mul_by_zeros(self):
        x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 3)))
        np.testing.assert_array_equal(tn.mul(x, tn.zeros(x.shape)).data, 0)

    def test_saturated_gate_blend(self):
        rng = np.random.default_rng(1)
        h = Tensor(rng.standard_normal((1, 4, 3, 3)))
        cand = Tensor(rng.standard_normal((1, 4, 3, 3)))
        z = tn.ones(h.shape)
        out = tn.add(tn.mul(1.0 - z, h), tn.mul(z, cand))
        np.testing.assert_array_equal(out.data, cand.data)

    def test_shape_mismatch(self):
        with pytest.raises(tn.DimensionError):
            tn.add(tn.ones((1, 1, 2, 2)), tn.ones((1, 1, 2, 3)))
        with pytest.raises(tn.DimensionError):
            tn.concat_channels([tn.ones((1, 1, 2, 2)), tn.ones((1, 1, 3, 2))])

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_non_finite_is_an_error(self):
        with pytest.raises(tn.NonFiniteError):
            tn.scalar_mul(Tensor([1e30]), 1e30)

    def test_float32_default(self):
        assert Tensor(np.zeros(3)).dtype == np.float32


class TestL1Loss:
    def test_identical(self):
        x = Tensor(np.random.default_rng(0).random((1, 3, 4, 4)))
        assert tn.l1_loss(x, x).item() == 0.0

    def test_constant_offset(self):
        x = Tensor(np.random.default_rng(0).random((1, 3, 4, 4)), dtype=np.float64)
        assert tn.l1_loss(x, x - 0.25).item() == pytest.approx(0.25, abs=1e-12)

    def test_matches_loop(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((2, 3, 4, 5)), rng.random((2, 3, 4, 5))
        total = 0.0
        for idx in np.ndindex(a.shape):
            total += abs(a[idx] - b[idx])
        got = tn.l1_loss(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).item()
        assert got == pytest.approx(total / a.size, abs=1e-6)


class TestBackward:
    def test_weighted_sum(self):
        rng = np.random.default_rng(0)
        w = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        with tn.Tape() as tape:
            grads = tn.backward(tape, tn.sum_all(tn.mul(w, x)))
        np.testing.assert_array_equal(grads[w], x.data)

    def test_conv_l1_finite_differences(self):
        rng = np.random.default_rng(1)
        x = t64(rng.standard_normal((2, 3, 6, 6)), grad=False)
        w = t64(rng.standard_normal((4, 3, 3, 3)) * 0.3)
        b = t64(rng.standard_normal(4))
        t = t64(rng.standard_normal((2, 4, 6, 6)), grad=False)
        err = gradcheck(lambda x, w, b, t: tn.l1_loss(tn.conv2d(x, w, b, 1, 1), t), [x, w, b, t])
        assert err < 1e-3

    def test_unused_leaf_gets_zero(self):
        a = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        unused = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with tn.Tape() as tape:
            grads = tn.backward(tape, tn.sum_all(a))
        np.testing.assert_array_equal(grads[unused], 0.0)
        assert unused not in grads

    def test_two_passes_accumulate(self):
        rng = np.random.default_rng(2)
        w = Tensor(rng.standard_normal((1, 2, 2, 2)), requires_grad=True)
        x1 = Tensor(rng.standard_normal((1, 2, 2, 2)))
        x2 = Tensor(rng.standard_normal((1, 2, 2, 2)))
        with tn.Tape() as tape:
            l1 = tn.sum_all(tn.mul(w, x1))
            l2 = tn.sum_all(tn.mul(w, x2))
            grads = tn.backward(tape, tn.add(l1, l2))
        np.testing.assert_allclose(grads[w], x1.data + x2.data, rtol=1e-6)

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with tn.Tape() as tape:
            y = tn.scalar_mul(w, 2.0)
            with pytest.raises(tn.ContractError):
                tn.backward(tape, y)

    def test_loss_from_other_tape_rejected(self):
        w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with tn.Tape():
            loss = tn.sum_all(w)
        with tn.Tape() as other:
            with pytest.raises(tn.ContractError):
                tn.backward(other, loss)

    def test_no_recording_without_tape(self):
        w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        out = tn.sum_all(w)
        assert out.grad_id is None

    def test_tape_cleared(self):
        w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with tn.Tape() as tape:
            tn.backward(tape, tn.sum_all(tn.relu(w)))
        assert len(tape) == 0


def _weighted(op, shape_out, rng):
    r = Tensor(rng.standard_normal(shape_out), dtype=np.float64)
    return lambda *xs: tn.sum_all(tn.mul(op(*xs), r))


class TestGradients:
    """Central differences (step 1e-3, float64) for every differentiable op."""

    rng = np.random.default_rng(11)

    def check(self, op, inputs, out_shape):
        fn = _weighted(op, out_shape, self.rng)
        assert gradcheck(fn, inputs) < 1e-3

    @pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 4), (1, 0, 1), (1, 3, 7), (2, 0, 2)])
    def test_conv2d(self, stride, padding, k):
        x = t64(self.rng.standard_normal((2, 3, 6, 6)))
        w = t64(self.rng.standard_normal((4, 3, k, k)) * 0.5)
        b = t64(self.rng.standard_normal(4))
        out = tn.conv2d(x, w, b, stride, padding)
        self.check(lambda x, w, b: tn.conv2d(x, w, b, stride, padding), [x, w, b], out.shape)

    def test_instance_norm(self):
        x = t64(self.rng.standard_normal((2, 4, 6, 6)))
        s = t64(self.rng.standard_normal(4))
        b = t64(self.rng.standard_normal(4))
        self.check(lambda x, s, b: tn.instance_norm(x, s, b), [x, s, b], x.shape)

    @pytest.mark.parametrize("op", [tn.relu, tn.sigmoid, tn.tanh])
    def test_activation(self, op):
        x = self.rng.standard_normal((2, 4, 6, 6))
        x[np.abs(x) < 0.01] = 0.5  # keep relu away from its kink
        x = t64(x)
        self.check(op, [x], x.shape)

    @pytest.mark.parametrize("op", [tn.add, tn.sub, tn.mul])
    def test_binary(self, op):
        a = t64(self.rng.standard_normal((2, 4, 6, 6)))
        b = t64(self.rng.standard_normal((2, 4, 6, 6)))
        self.check(op, [a, b], a.shape)

    def test_scalar_ops(self):
        a = t64(self.rng.standard_normal((1, 2, 3, 3)))
        self.check(lambda a: tn.scalar_add(tn.scalar_mul(a, -0.7), 1.0), [a], a.shape)

    def test_concat(self):
        a = t64(self.rng.standard_normal((2, 1, 6, 6)))
        b = t64(self.rng.standard_normal((2, 3, 6, 6)))
        self.check(lambda a, b: tn.concat_channels([a, b]), [a, b], (2, 4, 6, 6))

    def test_l1_and_means(self):
        a = self.rng.standard_normal((2, 4, 6, 6))
        # every difference at least 0.05 away from the |.| kink
        gap = self.rng.uniform(0.05, 1.0, a.shape) * self.rng.choice([-1, 1], a.shape)
        a, b = t64(a), t64(a + gap)
        assert gradcheck(lambda a, b: tn.scalar_mul(tn.l1_loss(a, b), 100.0), [a, b]) < 1e-3
        assert gradcheck(lambda a: tn.scalar_mul(tn.mean_all(tn.mul(a, a)), 10.0), [a]) < 1e-3
