import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labelbank import tensorcore as tc
from labelbank.tensorcore import Tensor

import gradsuite


def P(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


class TestSigmoidLogit:
    def test_sigmoid_values(self):
        out = tc.sigmoid(Tensor([0.0, math.log(3.0), 2.0])).data
        assert out[0] == 0.5
        assert out[1] == pytest.approx(0.75, abs=1e-15)
        assert out[2] == pytest.approx(0.880797, abs=1e-6)

    def test_sigmoid_extremes_are_finite(self):
        out = tc.sigmoid(Tensor([-800.0, 800.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[1] == 1.0

    def test_logit_values(self):
        assert tc.logit(Tensor([0.5])).data[0] == 0.0
        assert tc.logit(Tensor([0.75])).data[0] == pytest.approx(1.098612, abs=1e-6)
        assert tc.logit(Tensor([0.0]), eps=1e-7).data[0] == pytest.approx(-16.118095, abs=1e-6)

    def test_logit_domain(self):
        with pytest.raises(tc.DomainError):
            tc.logit(Tensor([1.5]))
        with pytest.raises(tc.DomainError):
            tc.logit(Tensor([-0.1]))
        with pytest.raises(tc.ConfigError):
            tc.logit(Tensor([0.5]), eps=0.5)

    @given(st.floats(-10, 10))
    def test_logit_inverts_sigmoid(self, x):
        y = tc.logit(tc.sigmoid(Tensor([x]))).data[0]
        assert abs(y - x) < 1e-9

    def test_clamped_region_has_zero_gradient(self):
        x = P([0.0, 1.0, 0.5])
        tc.backward(tc.total(tc.logit(x)))
        assert x.grad[0] == 0.0 and x.grad[1] == 0.0 and x.grad[2] == pytest.approx(4.0)

    def test_backward_sigmoid_at_zero(self):
        x = P([0.0])
        tc.backward(tc.reshape(tc.sigmoid(x), ()))
        assert x.grad[0] == pytest.approx(0.25)


class TestMulBroadcast:
    def test_identity(self):
        b = np.random.default_rng(0).normal(size=(2, 1, 1))
        np.testing.assert_array_equal(tc.mul_broadcast(Tensor([1.0, 1.0]), Tensor(b)).data, b)

    def test_scalar(self):
        assert tc.mul_broadcast(Tensor([0.5]), Tensor([[[0.8]]])).data[0, 0, 0] == pytest.approx(0.4)

    def test_by_hand(self):
        out = tc.mul_broadcast(Tensor([2.0, 3.0]), Tensor(np.ones((2, 1, 2)))).data
        np.testing.assert_array_equal(out, [[[2, 2]], [[3, 3]]])

    def test_shape_error(self):
        with pytest.raises(tc.ShapeError):
            tc.mul_broadcast(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones((2, 2, 2))))

    def test_gradient_of_sum(self):
        a = P([1.0, -2.0])
        b = P(np.arange(8.0).reshape(2, 2, 2))
        tc.backward(tc.total(tc.mul_broadcast(a, b)))
        np.testing.assert_allclose(a.grad, b.data.sum(axis=(1, 2)))


class TestConv2d:
    def test_all_ones_same_padding(self):
        out = tc.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0])).data
        assert out[0, 1, 1] == 9.0
        assert out[0, 0, 0] == 4.0

    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(1, 4, 5))
        out = tc.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0])).data
        np.testing.assert_array_equal(out, x)

    def test_dilation_two(self):
        out = tc.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), dilation=2).data
        assert out.shape == (1, 5, 5)
        assert out[0, 2, 2] == 9.0
        assert out[0, 0, 0] == 4.0

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.normal(size=(2, 6, 7)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        d = 2
        out = tc.conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=d).data
        xp = np.pad(x, ((0, 0), (2, 2), (2, 2)))
        ref = np.zeros((3, 6, 7))
        for o in range(3):
            for i in range(6):
                for j in range(7):
                    acc = b[o]
                    for c in range(2):
                        for u in range(3):
                            for v in range(3):
                                acc += w[o, c, u, v] * xp[c, i + u * d, j + v * d]
                    ref[o, i, j] = acc
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(tc.ConfigError):
            tc.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]))

    @pytest.mark.parametrize("k,d", [(3, 1), (3, 2), (3, 3), (5, 2)])
    def test_receptive_field_from_impulse(self, k, d):
        n = 21
        x = np.zeros((1, n, n))
        x[0, n // 2, n // 2] = 1.0
        out = tc.conv2d(Tensor(x), Tensor(np.ones((1, 1, k, k))), Tensor([0.0]), dilation=d).data[0]
        rows = np.flatnonzero(out.any(axis=1))
        assert rows.max() - rows.min() + 1 == k + (k - 1) * (d - 1)


class TestPooling:
    def test_spp_example(self):
        out = tc.spp_pool(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), (1, 2)).data
        np.testing.assert_array_equal(out, [4, 1, 2, 3, 4])

    def test_spp_constant(self):
        out = tc.spp_pool(Tensor(np.full((2, 5, 5), 3.5)), (1, 2, 4)).data
        assert np.all(out == 3.5) and out.size == 2 * (1 + 4 + 16)

    def test_spp_three_by_three_against_enumeration(self):
        x = np.arange(9.0).reshape(1, 3, 3)[:, ::-1, :].copy()
        out = tc.spp_pool(Tensor(x), (2,)).data
        # cells floor(i*3/2) .. ceil((i+1)*3/2): rows {0,1} and {1,2}
        cells = [((0, 2), (0, 2)), ((0, 2), (1, 3)), ((1, 3), (0, 2)), ((1, 3), (1, 3))]
        ref = [x[0, r0:r1, c0:c1].max() for (r0, r1), (c0, c1) in cells]
        np.testing.assert_array_equal(out, ref)

    def test_spp_level_one_is_global_max(self):
        x = np.random.default_rng(3).normal(size=(4, 6, 5))
        np.testing.assert_array_equal(tc.spp_pool(Tensor(x), (1,)).data, x.max(axis=(1, 2)))

    def test_spp_level_too_large(self):
        with pytest.raises(tc.ConfigError):
            tc.spp_pool(Tensor(np.ones((1, 3, 3))), (4,))

    def test_window_max(self):
        np.testing.assert_array_equal(tc.window_max(Tensor([[0.2, -1.0], [-0.5, 0.7]])).data, [0.2, 0.7])
        np.testing.assert_array_equal(tc.window_max(Tensor([[1.0, 2.0]])).data, [1.0, 2.0])

    def test_window_max_tie_goes_to_first_row(self):
        x = P([[1.0, 0.0], [1.0, 2.0]])
        tc.backward(tc.total(tc.window_max(x)))
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0], [0.0, 1.0]])

    @given(st.permutations(range(5)))
    def test_window_max_permutation_invariant(self, perm):
        x = np.random.default_rng(4).normal(size=(5, 3))
        a = tc.window_max(Tensor(x)).data
        b = tc.window_max(Tensor(x[list(perm)])).data
        np.testing.assert_array_equal(a, b)

    def test_max_pool_tie_goes_to_first_cell(self):
        x = P(np.ones((1, 2, 2)))
        tc.backward(tc.total(tc.max_pool2x2(x)))
        np.testing.assert_array_equal(x.grad[0], [[1.0, 0.0], [0.0, 0.0]])


class TestLosses:
    def test_softmax_ce_uniform(self):
        loss = tc.softmax_ce(Tensor(np.zeros((2, 1, 1))), np.array([[0]]))
        assert loss.item() == pytest.approx(math.log(2))

    def test_softmax_ce_confident(self):
        logits = np.zeros((3, 1, 1))
        logits[1] = 50.0
        assert tc.softmax_ce(Tensor(logits), np.array([[1]])).item() < 1e-12

    def test_softmax_ce_two_pixels(self):
        logits = np.array([[[1.0, 0.0]], [[0.0, 2.0]]])
        assert tc.softmax_ce(Tensor(logits), np.array([[0, 0]])).item() == pytest.approx(1.2200948492805979, abs=1e-12)

    def test_softmax_ce_ignores_sentinel(self):
        logits = np.array([[[1.0, 9.0]], [[0.0, -9.0]]])
        a = tc.softmax_ce(Tensor(logits), np.array([[0, tc.IGNORE]])).item()
        b = tc.softmax_ce(Tensor(logits[:, :, :1]), np.array([[0]])).item()
        assert a == b

    def test_sigmoid_ce_values(self):
        assert tc.sigmoid_ce(Tensor([0.0]), [1]).item() == pytest.approx(math.log(2))
        assert tc.sigmoid_ce(Tensor([20.0]), [1]).item() < 1e-8
        assert tc.sigmoid_ce(Tensor([1.0]), [0]).item() == pytest.approx(1.313262, abs=1e-6)


class TestUpsample:
    def test_midpoint(self):
        out = tc.bilinear_upsample(Tensor([[[0.0, 2.0]]]), 1, 3).data
        np.testing.assert_allclose(out[0, 0], [0.0, 1.0, 2.0])

    def test_same_size_identity(self):
        x = np.random.default_rng(5).normal(size=(2, 3, 4))
        np.testing.assert_array_equal(tc.bilinear_upsample(Tensor(x), 3, 4).data, x)

    def test_center(self):
        out = tc.bilinear_upsample(Tensor([[[0.0, 2.0], [4.0, 6.0]]]), 3, 3).data
        assert out[0, 1, 1] == pytest.approx(3.0)
        np.testing.assert_allclose(out[0, [0, 0, 2, 2], [0, 2, 0, 2]], [0, 2, 4, 6])


class TestGraph:
    def test_non_scalar_loss_rejected(self):
        with pytest.raises(tc.ShapeError):
            tc.backward(tc.sigmoid(P([1.0, 2.0])))

    def test_fan_out_accumulates(self):
        x = P([1.5])
        y = tc.add(tc.scale(x, 2.0), tc.scale(x, 3.0))
        tc.backward(tc.reshape(y, ()))
        assert x.grad[0] == pytest.approx(5.0)

    def test_nodes_visited_in_topological_order(self):
        x = P([0.3, -0.2])
        y = tc.sigmoid(x)
        z = tc.add(y, tc.relu(y))
        g = tc.Graph.from_output(tc.total(z))
        pos = {id(n): i for i, n in enumerate(g.nodes)}
        for n in g.nodes:
            for p in n.parents:
                assert pos[id(p)] < pos[id(n)]
        assert len(pos) == len(g.nodes)

    def test_relu(self):
        np.testing.assert_array_equal(tc.relu(Tensor([-1.0, 3.0])).data, [0.0, 3.0])
        x = P([-1.0, 2.0])
        tc.backward(tc.total(tc.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_linear(self):
        out = tc.linear(Tensor([3.0]), Tensor([[2.0]]), Tensor([1.0])).data
        assert out[0] == 7.0
        out = tc.linear(Tensor([1.0, 2.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([0.5, -0.5])).data
        np.testing.assert_array_equal(out, [5.5, 10.5])


@pytest.mark.parametrize("name", sorted(gradsuite.PRIMITIVE_CASES))
def test_primitive_gradients(name):
    worst = max(gradsuite.run_case(name, s) for s in range(5))
    assert worst < gradsuite.TOL
