import numpy as np
import pytest
from hypothesis import given, strategies as st

from runet import functional as F
from runet.errors import InvalidConfigError, InvalidDataError, InvalidShapeError
from runet.gradcheck import finite_diff_grad, relative_error
from runet.tensor import Parameter, Tensor, backward, no_grad, wide_precision


def direct_conv(x, w, b, stride, pad):
    """Nested-loop cross-correlation."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def check_primitive(fn, arrays, seed=0, tol=1e-4):
    """Autodiff vs central differences for every input of ``fn``, on a random projection."""
    with wide_precision():
        params = [Parameter(a) for a in arrays]
        out_shape = fn(*params).shape
        proj = np.random.default_rng([seed, 99]).standard_normal(out_shape)

        def loss():
            return (fn(*params) * proj).sum()

        backward(loss())
        for p in params:
            with no_grad():
                num = finite_diff_grad(lambda: loss().item(), p)
            assert relative_error(p.grad, num) < tol


# -- conv2d ------------------------------------------------------------------

def test_conv_all_ones_center_and_corner():
    x = Tensor(np.ones((1, 1, 3, 3)))
    out = F.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0


def test_conv_delta_kernel_is_identity(rng):
    x = rng.standard_normal((2, 1, 5, 5)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3), dtype=np.float32)
    k[0, 0, 1, 1] = 1
    out = F.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1, np.float32)), padding=1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
def test_conv_matches_direct_loop(rng, stride, pad):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    with wide_precision():
        got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    ref = direct_conv(x, w, b, stride, pad)
    np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(InvalidShapeError):
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3]),
       st.integers(3, 6), st.integers(0, 100))
def test_conv_gradients(b, cin, cout, k, hw, seed):
    r = np.random.default_rng(seed)
    check_primitive(lambda x, w, bias: F.conv2d(x, w, bias, padding=k // 2),
                    [r.standard_normal((b, cin, hw, hw)), r.standard_normal((cout, cin, k, k)),
                     r.standard_normal(cout)], seed)


# -- transposed conv -----------------------------------------------------------

def test_transpose_single_site_scatter():
    out = F.conv_transpose2d(Tensor(np.full((1, 1, 1, 1), 2.5)), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.5))


def test_transpose_zero_input_gives_bias():
    out = F.conv_transpose2d(Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.ones((3, 2, 2, 2))),
                             Tensor(np.array([1.5, -2.0])))
    assert out.shape == (2, 2, 8, 8)
    np.testing.assert_array_equal(out.data[:, 0], 1.5)
    np.testing.assert_array_equal(out.data[:, 1], -2.0)


def test_transpose_is_adjoint_of_strided_conv(rng):
    """conv_transpose2d(y, w) equals the input-gradient of conv2d(x, w, stride 2) at grad y."""
    with wide_precision():
        w = rng.standard_normal((3, 2, 2, 2))  # (Cin of transpose, Cout of transpose, k, k)
        y = rng.standard_normal((1, 3, 4, 4))
        got = F.conv_transpose2d(Tensor(y), Tensor(w)).data
        x = Parameter(np.zeros((1, 2, 8, 8)))
        out = F.conv2d(x, Tensor(w), stride=2)  # conv weight layout (Cout=3, Cin=2, k, k)
        backward((out * y).sum())
    np.testing.assert_allclose(got, x.grad, rtol=1e-12, atol=1e-12)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 100))
def test_transpose_gradients(cin, cout, hw, seed):
    r = np.random.default_rng(seed)
    check_primitive(F.conv_transpose2d,
                    [r.standard_normal((2, cin, hw, hw)), r.standard_normal((cin, cout, 2, 2)),
                     r.standard_normal(cout)], seed)


# -- pooling -------------------------------------------------------------------

def test_pool_block_max():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert F.max_pool2d(x).data.item() == 4.0


def test_pool_tie_goes_to_first_in_row_major_order():
    x = Parameter(np.full((1, 1, 4, 4), 7.0))
    out = F.max_pool2d(x)
    np.testing.assert_array_equal(out.data, 7.0)
    backward(out.sum())
    expected = np.zeros((4, 4))
    expected[0::2, 0::2] = 1
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_pool_matches_windowed_max(rng):
    x = rng.standard_normal((1, 3, 8, 8))
    ref = np.array([[[[x[0, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(4)]
                      for i in range(4)] for c in range(3)]])
    np.testing.assert_array_equal(F.max_pool2d(Tensor(x)).data, ref)


def test_pool_odd_size_rejected():
    with pytest.raises(InvalidShapeError):
        F.max_pool2d(Tensor(np.ones((1, 1, 5, 4))))


@given(st.integers(0, 200))
def test_pool_gradients(seed):
    # distinct values spaced well beyond eps keep every window's argmax stable
    r = np.random.default_rng(seed)
    x = r.permutation(32).reshape(1, 2, 4, 4) * 0.1
    check_primitive(F.max_pool2d, [x], seed)


# -- normalization -------------------------------------------------------------

def _affine(c, gamma=1.0, beta=0.0):
    return Tensor(np.full(c, gamma)), Tensor(np.full(c, beta))


def test_group_norm_constant_input_is_zero():
    g, b = _affine(8)
    out = F.group_norm(Tensor(np.full((2, 8, 4, 4), 3.0)), 4, g, b, 1e-5)
    assert np.abs(out.data).max() <= np.sqrt(1e-5)


def test_group_norm_beta_shift():
    g, b = _affine(4, beta=5.0)
    out = F.group_norm(Tensor(np.full((1, 4, 4, 4), -2.0)), 4, g, b)
    np.testing.assert_allclose(out.data, 5.0, atol=1e-6)


@given(st.integers(0, 500), st.sampled_from([(4, 4), (8, 4), (6, 3), (2, 2)]))
def test_group_norm_moments(seed, cg):
    c, groups = cg
    x = np.random.default_rng(seed).standard_normal((2, c, 4, 4)) * 3 + 1
    g, b = _affine(c)
    with wide_precision():
        out = F.group_norm(Tensor(x), groups, g, b, 1e-5).data.reshape(2, groups, -1)
    assert np.abs(out.mean(axis=2)).max() <= 1e-5
    assert np.abs(out.var(axis=2) - 1).max() <= 1e-4


def test_group_norm_indivisible():
    g, b = _affine(6)
    with pytest.raises(InvalidConfigError):
        F.group_norm(Tensor(np.ones((1, 6, 2, 2))), 4, g, b)


@given(st.integers(0, 100))
def test_group_norm_gradients(seed):
    r = np.random.default_rng(seed)
    check_primitive(lambda x, g, b: F.group_norm(x, 2, g, b),
                    [r.standard_normal((2, 4, 3, 3)), r.standard_normal(4), r.standard_normal(4)], seed)


def test_batch_norm_identical_images_give_beta():
    g, b = _affine(3, beta=0.7)
    x = np.repeat(np.full((1, 3, 4, 4), 2.0), 4, axis=0)
    out = F.batch_norm(Tensor(x), g, b, F.RunningStats(3), training=True)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-6)


def test_batch_norm_eval_with_unit_stats_is_affine(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    g, b = Tensor(np.array([2.0, 1.0, 0.5])), Tensor(np.array([0.0, 1.0, -1.0]))
    with wide_precision():
        out = F.batch_norm(Tensor(x), g, b, F.RunningStats(3, np.float64), training=False, eps=0.0)
    np.testing.assert_allclose(out.data, x * g.data[:, None, None] + b.data[:, None, None])


def test_batch_norm_training_moments_and_running_update(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 2 + 3
    g, b = _affine(3)
    stats = F.RunningStats(3, np.float64)
    with wide_precision():
        out = F.batch_norm(Tensor(x), g, b, stats, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


@given(st.integers(0, 100), st.booleans())
def test_batch_norm_gradients(seed, training):
    r = np.random.default_rng(seed)
    check_primitive(lambda x, g, b: F.batch_norm(x, g, b, F.RunningStats(3, np.float64), training),
                    [r.standard_normal((2, 3, 3, 3)), r.standard_normal(3), r.standard_normal(3)], seed)


# -- activations ---------------------------------------------------------------

def test_activation_values_at_zero():
    z = Tensor(np.zeros(1))
    assert F.activation(z, "sigmoid").item() == 0.5
    assert F.activation(z, "tanh").item() == 0.0
    assert F.activation(z, "relu").item() == 0.0
    with pytest.raises(InvalidConfigError):
        F.activation(z, "gelu")


def test_relu_gradient_by_sign():
    x = np.array([-2.0, -0.5, 0.5, 3.0])
    with wide_precision():
        p = Parameter(x)
        backward(F.relu(p).sum())
        num = finite_diff_grad(lambda: float(np.maximum(p.data, 0).sum()), p)
    np.testing.assert_array_equal(p.grad, [0, 0, 1, 1])
    np.testing.assert_allclose(num, [0, 0, 1, 1], atol=1e-9)


@given(st.integers(0, 100), st.sampled_from(["sigmoid", "tanh"]))
def test_smooth_activation_gradients(seed, kind):
    x = np.random.default_rng(seed).standard_normal((3, 4)) * 3
    check_primitive(lambda t: F.activation(t, kind), [x], seed)


# -- channel plumbing ----------------------------------------------------------

def test_concat_shapes_and_order(rng):
    a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 1, 4, 4))
    out = F.concat_channels(Tensor(a), Tensor(b)).data
    assert out.shape == (2, 4, 4, 4)
    np.testing.assert_array_equal(out[:, :3], a)
    np.testing.assert_array_equal(out[:, 3:], b)


def test_concat_with_empty_is_identity(rng):
    a = rng.standard_normal((1, 3, 2, 2))
    out = F.concat_channels(Tensor(a), Tensor(np.zeros((1, 0, 2, 2)))).data
    np.testing.assert_array_equal(out, a)


def test_concat_spatial_mismatch():
    with pytest.raises(InvalidShapeError):
        F.concat_channels(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 4))))


def test_concat_sum_backward_routes_ones(rng):
    check_primitive(F.concat_channels, [rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 1, 3, 3))])
    with wide_precision():
        a, b = Parameter(np.zeros((1, 2, 3, 3))), Parameter(np.zeros((1, 1, 3, 3)))
        backward(F.concat_channels(a, b).sum())
    np.testing.assert_array_equal(a.grad, 1.0)
    np.testing.assert_array_equal(b.grad, 1.0)


# -- head and loss -------------------------------------------------------------

def test_softmax_foreground_matches_two_way_softmax(rng):
    z = rng.standard_normal((2, 2, 3, 3)) * 4
    e = np.exp(z)
    with wide_precision():
        got = F.softmax_foreground(Tensor(z)).data
    np.testing.assert_allclose(got[:, 0], e[:, 1] / e.sum(axis=1), rtol=1e-12, atol=1e-15)


def test_cross_entropy_matches_scalar_loop(rng):
    z = rng.standard_normal((2, 2, 3, 3))
    t = (rng.random((2, 1, 3, 3)) < 0.5).astype(np.float64)
    total = 0.0
    for n in range(2):
        for i in range(3):
            for j in range(3):
                c = int(t[n, 0, i, j])
                total -= z[n, c, i, j] - np.log(np.exp(z[n, 0, i, j]) + np.exp(z[n, 1, i, j]))
    with wide_precision():
        got = F.cross_entropy(Tensor(z), t).item()
    assert got == pytest.approx(total / 18, rel=1e-12)


def test_cross_entropy_gradients(rng):
    t = (rng.random((2, 1, 3, 3)) < 0.5).astype(np.float64)
    check_primitive(lambda z: F.cross_entropy(z, t), [rng.standard_normal((2, 2, 3, 3))])


def test_cross_entropy_rejects_non_binary_target():
    with pytest.raises(InvalidDataError):
        F.cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 1, 2, 2), 0.5))


def test_branch_log_detects_relu_flip():
    log = []
    F.record_branches(log)
    try:
        F.relu(Tensor(np.array([1.0, -1.0])))
        F.relu(Tensor(np.array([1.0, 1.0])))
    finally:
        F.record_branches(None)
    assert len(log) == 2 and log[0] != log[1]
