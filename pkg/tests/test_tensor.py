import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from streamevo import tensor as tn
from streamevo.tensor import Tensor

from gradcases import CASES
from oracles import conv2d_loops, dilated_conv_loops, gated_sum_loops, smoothed_cross_entropy


# ---------------------------------------------------------------- dilated temporal conv

finite = st.floats(-4, 4, allow_nan=False, allow_infinity=False, width=64)


@st.composite
def signal_and_filter(draw, channels=1):
    T = draw(st.integers(1, 12))
    taps = draw(st.sampled_from([3, 5]))
    r = draw(st.sampled_from([1, 2, 4, 8]))
    F = draw(arrays(np.float64, (1, T, 1, 1, channels), elements=finite))
    k = draw(arrays(np.float64, (taps, channels, channels), elements=finite))
    return F, k, r


@given(signal_and_filter())
def test_dilated_conv_equals_eq1_loops_exactly(case):
    F, k, r = case
    got = tn.temporal_conv1d_dilated(Tensor(F), Tensor(k), r).data
    np.testing.assert_array_equal(got, dilated_conv_loops(F, k, r))


@given(signal_and_filter())
def test_dilated_conv_equals_inflated_filter_conv_bitwise(case):
    F, k, r = case
    dilated = tn.temporal_conv1d_dilated(Tensor(F), Tensor(k), r).data
    inflated = tn.temporal_conv1d(Tensor(F), Tensor(tn.inflate_filter(k, r))).data
    assert np.array_equal(dilated, inflated)


@given(signal_and_filter(channels=3))
def test_dilated_conv_multichannel_matches_loops(case):
    F, k, r = case
    got = tn.temporal_conv1d_dilated(Tensor(F), Tensor(k), r).data
    np.testing.assert_allclose(got, dilated_conv_loops(F, k, r), rtol=1e-12, atol=1e-12)


def test_dilated_conv_worked_example():
    F = np.arange(1.0, 6.0).reshape(1, 5, 1, 1, 1)
    k = np.array([1.0, 0.0, -1.0]).reshape(3, 1, 1)
    out = tn.temporal_conv1d_dilated(Tensor(F), Tensor(k), 2).data.reshape(-1)
    assert out[2] == 4.0


def test_identity_filter_is_identity():
    F = np.random.default_rng(3).standard_normal((2, 7, 2, 2, 1))
    out = tn.temporal_conv1d_dilated(Tensor(F), Tensor(np.ones((1, 1, 1))), 1).data
    np.testing.assert_array_equal(out, F)


@pytest.mark.parametrize("r", [0, -1, 1.5])
def test_dilated_conv_rejects_bad_dilation(r):
    with pytest.raises(ValueError):
        tn.temporal_conv1d_dilated(Tensor(np.zeros((1, 3, 1, 1, 1))), Tensor(np.zeros((3, 1, 1))), r)


def test_dilated_conv_rejects_even_filter():
    with pytest.raises(ValueError, match="odd"):
        tn.temporal_conv1d_dilated(Tensor(np.zeros((1, 3, 1, 1, 1))), Tensor(np.zeros((2, 1, 1))), 1)


@pytest.mark.parametrize("k, r, expected", [
    ([1, 2, 3], 2, [1, 0, 2, 0, 3]),
    ([5], 4, [5]),
    ([1, 2, 3], 1, [1, 2, 3]),
    ([1, -1], 3, [1, 0, 0, -1]),
])
def test_inflate_filter(k, r, expected):
    np.testing.assert_array_equal(tn.inflate_filter(np.array(k), r), expected)


@given(st.lists(finite, min_size=1, max_size=6), st.integers(1, 8))
def test_inflate_filter_structure(k, r):
    out = tn.inflate_filter(np.array(k), r)
    assert len(out) == r * (len(k) - 1) + 1
    np.testing.assert_array_equal(out[::r], k)
    mask = np.ones(len(out), bool)
    mask[::r] = False
    assert not out[mask].any()


@given(st.integers(1, 12), st.sampled_from([1, 2, 4, 8]))
def test_temporal_conv_preserves_time_and_batch(T, r):
    x = Tensor(np.ones((3, T, 2, 2, 2)))
    y = tn.temporal_conv1d_dilated(x, Tensor(np.ones((3, 2, 5))), r)
    assert y.shape == (3, T, 2, 2, 5)


# ---------------------------------------------------------------- spatial ops


def test_conv2d_stencil_interior_value():
    x = Tensor(np.ones((1, 1, 4, 4, 1)))
    y = tn.conv2d(x, Tensor(np.ones((3, 3, 1, 1))), 1).data[0, 0, :, :, 0]
    assert y[1, 1] == y[2, 2] == 9.0
    assert y[0, 0] == 4.0 and y[0, 1] == 6.0


@given(st.integers(1, 7), st.integers(1, 7), st.sampled_from([1, 3, 5]), st.sampled_from([1, 2, 4]),
       st.integers(0, 2**16))
def test_conv2d_matches_stencil_loops(H, W, k, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 1, H, W, 2))
    w = rng.standard_normal((k, k, 2, 3))
    got = tn.conv2d(Tensor(x), Tensor(w), stride).data[0, 0]
    assert got.shape == (math.ceil(H / stride), math.ceil(W / stride), 3)
    np.testing.assert_allclose(got, conv2d_loops(x[0, 0], w, stride), rtol=1e-12, atol=1e-12)


def test_conv1x1_identity_weight():
    x = np.random.default_rng(4).standard_normal((2, 3, 4, 4, 5))
    np.testing.assert_array_equal(tn.conv1x1(Tensor(x), Tensor(np.eye(5))).data, x)


def test_conv1x1_grouped_is_block_diagonal():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 2, 2, 6))
    wg = rng.standard_normal((3, 2, 4))
    dense = np.zeros((6, 12))
    for g in range(3):
        dense[2 * g:2 * g + 2, 4 * g:4 * g + 4] = wg[g]
    np.testing.assert_allclose(tn.conv1x1(Tensor(x), Tensor(wg), groups=3).data,
                               tn.conv1x1(Tensor(x), Tensor(dense)).data, rtol=1e-13)


def test_relu_of_negative_is_zero():
    x = np.random.default_rng(6).uniform(0.1, 5, size=(4, 3))
    assert not tn.relu(Tensor(-x)).data.any()


def test_max_pool_spatial_shape_and_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4, 1)
    y = tn.max_pool_spatial(Tensor(x), 3, 2).data[0, 0, :, :, 0]
    assert y.shape == (2, 2)
    # same padding of 1 on the far side: windows cover rows/cols {0,1,2} and {2,3}
    np.testing.assert_array_equal(y, [[10, 11], [14, 15]])


def test_avg_pool_and_temporal_max():
    x = np.random.default_rng(7).standard_normal((2, 5, 3, 3, 4))
    np.testing.assert_allclose(tn.avg_pool(Tensor(x), (2, 3)).data, x.mean(axis=(2, 3)))
    np.testing.assert_array_equal(tn.max_pool(Tensor(x), 1).data, x.max(axis=1))


# ---------------------------------------------------------------- batch norm


def test_batch_norm_training_statistics():
    x = np.random.default_rng(8).normal(3.0, 2.0, size=(8, 2, 3, 3, 4))
    y = tn.batch_norm(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 1, 2, 3)), 1, atol=1e-4)


def test_batch_norm_requires_batch_of_eight():
    with pytest.raises(ValueError, match="batch"):
        tn.batch_norm(Tensor(np.zeros((7, 1, 1, 1, 2))))


def test_batch_norm_eval_uses_bias_corrected_running_average():
    rng = np.random.default_rng(9)
    stats = tn.RunningStats(3)
    x = rng.normal(2.0, 3.0, size=(8, 1, 1, 1, 3))
    tn.batch_norm(Tensor(x), running=stats)
    # after one step the corrected average equals that batch's statistics
    np.testing.assert_allclose(stats.mean, x.reshape(-1, 3).mean(0), rtol=1e-12)
    np.testing.assert_allclose(stats.var, x.reshape(-1, 3).var(0), rtol=1e-12)
    y = tn.batch_norm(Tensor(x), training=False, running=stats).data
    np.testing.assert_allclose(y, tn.batch_norm(Tensor(x)).data, rtol=1e-10, atol=1e-12)


def test_batch_norm_fused_relu_equals_separate_relu():
    rng = np.random.default_rng(10)
    x, s, b = rng.standard_normal((8, 2, 2, 2, 3)), rng.standard_normal(3), rng.standard_normal(3)
    fused = tn.batch_norm(Tensor(x), Tensor(s), Tensor(b), relu=True).data
    split = tn.relu(tn.batch_norm(Tensor(x), Tensor(s), Tensor(b))).data
    np.testing.assert_array_equal(fused, split)


# ---------------------------------------------------------------- aggregation


def test_gated_sum_single_input_zero_logit_halves():
    F = np.random.default_rng(11).standard_normal((2, 3, 4))
    np.testing.assert_array_equal(tn.gated_weighted_sum([Tensor(F)], [0.0]).data, 0.5 * F)


def test_gated_sum_saturated_gates():
    F = np.random.default_rng(12).standard_normal((2, 3, 4))
    out = tn.gated_weighted_sum([Tensor(F), Tensor(F)], [20.0, -20.0]).data
    np.testing.assert_allclose(out, F, atol=1e-8, rtol=0)


@given(st.integers(1, 5), st.integers(0, 2**16))
def test_gated_sum_matches_scalar_loop(n, seed):
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal((2, 3, 2)) for _ in range(n)]
    ws = list(rng.normal(scale=3, size=n))
    got = tn.gated_weighted_sum([Tensor(x) for x in xs], ws).data
    np.testing.assert_allclose(got, gated_sum_loops(xs, ws), rtol=1e-13, atol=1e-13)


@given(st.permutations(range(4)), st.integers(0, 2**16))
def test_gated_sum_permutation_equivariant(perm, seed):
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal((3, 2)) for _ in range(4)]
    ws = list(rng.normal(size=4))
    a = tn.gated_weighted_sum([Tensor(x) for x in xs], ws).data
    b = tn.gated_weighted_sum([Tensor(xs[i]) for i in perm], [ws[i] for i in perm]).data
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-14)


def test_gated_sum_errors():
    with pytest.raises(ValueError):
        tn.gated_weighted_sum([], [])
    with pytest.raises(ValueError, match="shape"):
        tn.gated_weighted_sum([Tensor(np.zeros(3)), Tensor(np.zeros(4))], [0.0, 0.0])
    with pytest.raises(ValueError):
        tn.gated_weighted_sum([Tensor(np.zeros(3))], [0.0, 1.0])


# ---------------------------------------------------------------- loss


def test_cross_entropy_uniform_logits_is_log_k():
    for K in (2, 6, 12):
        loss = tn.softmax_cross_entropy(Tensor(np.zeros((5, K))), np.arange(5) % K).data
        assert loss == pytest.approx(math.log(K), rel=1e-14)


def test_cross_entropy_confident_is_zero():
    z = np.full((3, 4), -1e3)
    z[np.arange(3), [0, 2, 3]] = 1e3
    assert tn.softmax_cross_entropy(Tensor(z), [0, 2, 3]).data == pytest.approx(0, abs=1e-12)


@given(st.integers(0, 2**16), st.sampled_from([0.0, 0.1, 0.2, 0.5]))
def test_cross_entropy_matches_formula(seed, eps):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=3, size=(6, 7))
    y = rng.integers(0, 7, size=6)
    got = float(tn.softmax_cross_entropy(Tensor(z), y, eps).data)
    assert got == pytest.approx(smoothed_cross_entropy(z, y, eps), rel=1e-12)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError, match="range"):
        tn.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------- autograd engine


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_trips():
    with pytest.raises(tn.NonFiniteError):
        tn.mul(Tensor(np.array([np.inf])), Tensor(np.array([0.0])))


def test_gradients_accumulate_over_shared_subgraphs():
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    y = tn.total(tn.add(tn.mul(x, x), x))
    y.backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)


def test_float32_mode_keeps_dtype():
    with tn.default_dtype(np.float32):
        x = Tensor(np.ones((2, 3)))
        assert x.data.dtype == np.float32
        assert tn.relu(x).data.dtype == np.float32


@pytest.mark.parametrize("case", range(len(CASES)), ids=[c[0] + f"-{i}" for i, c in enumerate(CASES)])
def test_grad_check(case):
    name, op, inputs = CASES[case]
    assert tn.grad_check(op, inputs) < 1e-4, name


def test_grad_check_named_examples():
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((2, 6, 1, 1, 2)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 2)), requires_grad=True)
    assert tn.grad_check(lambda a, b: tn.temporal_conv1d_dilated(a, b, 4), [x, w]) < 1e-4
    xs = [Tensor(rng.standard_normal((3, 2)), requires_grad=True) for _ in range(2)]
    ws = [Tensor(np.asarray(v), requires_grad=True) for v in rng.normal(size=2)]
    assert tn.grad_check(lambda *a: tn.gated_weighted_sum(list(a[:2]), list(a[2:])), xs + ws) < 1e-4
    a = Tensor(rng.standard_normal((1, 2, 3, 3, 4)), requires_grad=True)
    m = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    assert tn.grad_check(tn.conv1x1, [a, m]) < 1e-6


def test_grad_check_detects_a_wrong_gradient():
    def broken(x):
        out = tn.relu(x)
        out._backward = lambda: tn._accumulate(x, 2 * out.grad)
        return out

    x = Tensor(np.random.default_rng(14).uniform(0.5, 1.0, size=5), requires_grad=True)
    assert tn.grad_check(broken, [x]) > 0.4
