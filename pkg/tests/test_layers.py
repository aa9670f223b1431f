import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from t2vreg.errors import ShapeError
from t2vreg.layers import (BatchNorm, Conv2D, Dense, Flatten, ReLU, Sequential, _patches,
                           col2im, conv2d_direct, conv2d_gemm, grad_check, im2col, relu,
                           reshape_kernel, unreshape_kernel)
from t2vreg.tensor import Rng


def quad_conv(x, k, stride=(1, 1)):
    """Quadruple-sum oracle for a single [W, H, C] input."""
    W, H, C = x.shape
    L, _, _, S = k.shape
    Wo, Ho = (W - L) // stride[0] + 1, (H - L) // stride[1] + 1
    y = np.zeros((Wo, Ho, S))
    for a in range(Wo):
        for b in range(Ho):
            for s in range(S):
                for i in range(L):
                    for j in range(L):
                        for c in range(C):
                            y[a, b, s] += k[i, j, c, s] * x[a * stride[0] + i, b * stride[1] + j, c]
    return y


# --- convolution -----------------------------------------------------------------

def test_identity_kernel():
    x = Rng(0).normal((4, 5, 1))
    np.testing.assert_array_equal(conv2d_direct(x, np.ones((1, 1, 1, 1))), x)


def test_ones_example():
    y = conv2d_direct(np.ones((3, 3, 1)), np.ones((2, 2, 1, 1)))
    assert y.shape == (2, 2, 1)
    assert np.all(y == 4)


def test_output_shape_full_scale_input():
    conv = Conv2D(5, 1, 2)
    assert conv.output_shape((17, 257, 1)) == (13, 253, 2)


def test_direct_matches_quadruple_sum_with_stride():
    rng = Rng(1)
    x, k = rng.normal((7, 6, 2)), rng.normal((3, 3, 2, 3))
    for stride in [(1, 1), (2, 1), (1, 2), (2, 3)]:
        np.testing.assert_allclose(conv2d_direct(x, k, stride), quad_conv(x, k, stride),
                                   atol=1e-12)


def test_im2col_degenerate_patch():
    x = Rng(2).normal((3, 4, 2))
    cols = im2col(x, 1)
    # row index x + W*y, column c
    for a in range(3):
        for b in range(4):
            np.testing.assert_array_equal(cols[a + 3 * b], x[a, b])


def test_im2col_patch_enumeration():
    x = np.arange(1.0, 10.0).reshape(3, 3, 1)
    cols = im2col(x, 2)
    assert cols.shape == (4, 4)
    # column i + 2*j holds X[a + i, b + j]; row a + 2*b
    expected = []
    for b in range(2):
        for a in range(2):
            expected.append([x[a + i, b + j, 0] for j in range(2) for i in range(2)])
    np.testing.assert_array_equal(cols, expected)


def test_im2col_column_index_map():
    rng = Rng(3)
    x = rng.normal((5, 4, 3))
    L = 2
    cols = im2col(x, L)
    Wo = 4
    for (a, b, i, j, c) in [(0, 0, 0, 0, 0), (3, 2, 1, 0, 2), (1, 1, 0, 1, 1), (2, 0, 1, 1, 0)]:
        assert cols[a + Wo * b, i + L * j + L * L * c] == x[a + i, b + j, c]


def test_gemm_equals_direct_example():
    rng = Rng(4)
    x, k = rng.normal((6, 6, 3)), rng.normal((3, 3, 3, 4))
    y = im2col(x, 3) @ reshape_kernel(k)
    direct = conv2d_direct(x, k)
    np.testing.assert_allclose(y.reshape(4, 4, 4).transpose(1, 0, 2), direct, atol=1e-12)
    np.testing.assert_allclose(conv2d_gemm(x, k), direct, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 6),
       st.integers(0, 6), st.sampled_from([(1, 1), (1, 2), (2, 1), (2, 2)]),
       st.integers(0, 2**31))
def test_gemm_equals_direct_property(L, C, S, dw, dh, stride, seed):
    rng = Rng(seed)
    x = rng.normal((2, L + dw, L + dh, C))
    k = rng.normal((L, L, C, S))
    np.testing.assert_allclose(conv2d_gemm(x, k, stride), conv2d_direct(x, k, stride),
                               atol=1e-12)


def test_reshape_kernel_cases():
    k = np.array([[[[2.5]]]])
    assert reshape_kernel(k).tolist() == [[2.5]]
    k = Rng(5).normal((2, 2, 2, 3))
    km = reshape_kernel(k)
    assert unreshape_kernel(km, 2, 2).tobytes() == k.tobytes()
    for (i, j, c, s) in [(0, 0, 0, 0), (1, 0, 1, 2), (0, 1, 1, 1), (1, 1, 0, 0), (1, 1, 1, 2)]:
        assert km[i + 2 * j + 4 * c, s] == k[i, j, c, s]


def test_col2im_is_adjoint_of_im2col():
    rng = Rng(6)
    shape = (2, 7, 6, 3)
    for stride in [(1, 1), (2, 1), (1, 2)]:
        x = rng.normal(shape)
        cols = im2col(x, 3, stride)
        c = rng.normal(cols.shape)
        lhs = np.sum(cols * c)
        rhs = np.sum(x * col2im(c, shape, 3, stride))
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_layer_patch_layout_is_a_column_permutation_of_im2col():
    rng = Rng(7)
    x = rng.normal((2, 6, 5, 3))
    L = 3
    p = _patches(x, L, (1, 1)).reshape(-1, L * L * 3)
    ref = im2col(x, L)
    # layer rows run (n, x, y), im2col rows run (n, y, x); columns (i, j, c) vs (i + L j + L^2 c)
    p = p.reshape(2, 4, 3, L, L, 3).transpose(0, 2, 1, 5, 4, 3).reshape(-1, L * L * 3)
    np.testing.assert_array_equal(p, ref)


def test_conv_layer_matches_direct():
    rng = Rng(8)
    x = rng.normal((3, 9, 8, 2))
    layer = Conv2D(3, 2, 4, stride=(2, 1), rng=rng)
    layer.params["bias"] = rng.normal(4)
    y = layer.forward(x)
    ref = conv2d_direct(x, layer.params["kernel"], (2, 1)) + layer.params["bias"]
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_conv_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        Conv2D(3, 2, 4).forward(np.zeros((1, 5, 5, 3)))


# --- dense, relu, batch norm -------------------------------------------------------

def test_dense_cases():
    layer = Dense(3, 3, weight=np.eye(3))
    assert not np.any(Dense(3, 2, weight=np.zeros((3, 2))).forward(np.zeros((4, 3))))
    x = Rng(0).normal((2, 3))
    np.testing.assert_array_equal(layer.forward(x), x)
    rng = Rng(1)
    x, w = rng.normal((3, 5)), rng.normal((5, 2))
    y = Dense(5, 2, weight=w).forward(x)
    ref = np.array([[sum(x[i, k] * w[k, j] for k in range(5)) for j in range(2)]
                    for i in range(3)])
    np.testing.assert_allclose(y, ref, atol=1e-13)
    assert Dense(4, 2).param_count() == 10


def test_relu_cases():
    assert not np.any(relu(-np.ones(4)))
    np.testing.assert_array_equal(ReLU().forward(np.array([1.0, 2.0])), [1.0, 2.0])
    np.testing.assert_array_equal(ReLU().forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])


def test_batchnorm_fixed_point():
    x = Rng(0).normal((200, 3))
    x = (x - x.mean(0)) / x.std(0)
    y = BatchNorm(3).forward(x, train=True)
    # the only change is the epsilon shrink 1/sqrt(1 + eps)
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), atol=1e-12)
    assert np.max(np.abs(y - x) / np.abs(x)) <= 5e-6 + 1e-12


def test_batchnorm_moments_in_train_mode():
    x = Rng(1).normal((8, 5, 4, 3)) * 5 + 7
    y = BatchNorm(3).forward(x, train=True).reshape(-1, 3)
    assert np.max(np.abs(y.mean(0))) <= 1e-10
    assert np.max(np.abs(y.var(0) - 1)) < 1e-6


def test_batchnorm_zero_gamma_gives_beta():
    bn = BatchNorm(2)
    bn.params["gamma"] = np.zeros(2)
    bn.params["beta"] = np.array([0.5, -1.0])
    y = bn.forward(Rng(2).normal((6, 2)), train=True)
    np.testing.assert_array_equal(y, np.tile([0.5, -1.0], (6, 1)))


def test_batchnorm_running_stats_update():
    bn = BatchNorm(2)
    x = Rng(3).normal((50, 2)) + [1.0, -2.0]
    bn.forward(x, train=True)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(0))
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(0))
    y = bn.forward(x, train=False)
    ref = (x - bn.buffers["running_mean"]) / np.sqrt(bn.buffers["running_var"] + 1e-5)
    np.testing.assert_allclose(y, ref)


def test_batchnorm_needs_two_samples_in_train_mode():
    with pytest.raises(ValueError):
        BatchNorm(2).forward(np.zeros((1, 2)), train=True)


# --- gradient checks -----------------------------------------------------------------

def test_grad_dense_example():
    rng = Rng(0)
    grad_check(Dense(4, 3, rng=rng), rng.normal((2, 4)), tolerance=1e-6, rng=rng).assert_ok()


def test_grad_conv_example():
    rng = Rng(1)
    grad_check(Conv2D(3, 2, 2, rng=rng), rng.normal((1, 6, 6, 2)), tolerance=1e-6,
               rng=rng).assert_ok()


def test_grad_linear_layer_quadratic_loss_is_near_exact():
    rng = Rng(2)
    rep = grad_check(Dense(3, 2, rng=rng), rng.normal((4, 3)), loss="quadratic", rng=rng)
    assert rep.max_rel_error <= 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_grad_layer_types(seed):
    rng = Rng(seed)
    cases = [
        (Conv2D(2, 2, 3, stride=(2, 1), rng=rng), rng.normal((2, 5, 4, 2))),
        (BatchNorm(3), rng.normal((4, 3, 2, 3))),
        (Sequential([Dense(5, 4, rng=rng), ReLU(), Dense(4, 2, rng=rng)]), rng.normal((3, 5))),
        (Sequential([Conv2D(2, 1, 2, rng=rng), ReLU(), BatchNorm(2), Flatten(),
                     Dense(18, 2, rng=rng)]), rng.normal((3, 4, 4, 1))),
    ]
    for layer, x in cases:
        grad_check(layer, x, rng=rng).assert_ok()


def test_batchnorm_eval_mode_gradient():
    rng = Rng(9)
    bn = BatchNorm(3)
    bn.buffers["running_mean"] = rng.normal(3)
    bn.buffers["running_var"] = rng.uniform(0.5, 2.0, 3)
    grad_check(bn, rng.normal((4, 3)), rng=rng, train=False).assert_ok()


def test_grad_check_detects_wrong_gradient():
    class Broken(Dense):
        def backward(self, dy):
            dx = super().backward(dy)
            self.grads["weight"] = self.grads["weight"] * 1.01
            return dx

    rng = Rng(0)
    rep = grad_check(Broken(3, 2, rng=rng), rng.normal((2, 3)), rng=rng)
    assert not rep.passed
    with pytest.raises(AssertionError, match="weight"):
        rep.assert_ok()


def test_skip_input_grad_returns_none_but_keeps_param_grads():
    rng = Rng(1)
    layer = Conv2D(2, 1, 2, rng=rng)
    x = rng.normal((2, 4, 4, 1))
    layer.forward(x, train=True)
    dy = rng.normal((2, 3, 3, 2))
    full = layer.backward(dy)
    g = {k: v.copy() for k, v in layer.grads.items()}
    layer.skip_input_grad = True
    assert layer.backward(dy) is None and full is not None
    for k in g:
        np.testing.assert_array_equal(layer.grads[k], g[k])


def test_sequential_names_and_shapes():
    seq = Sequential([Dense(4, 3), ReLU(), BatchNorm(3)])
    assert set(seq.params) == {"layer0.weight", "layer0.bias", "layer2.gamma", "layer2.beta"}
    assert set(seq.buffers) == {"layer2.running_mean", "layer2.running_var"}
    assert seq.output_shape((4,)) == (3,)
    seq.set_param("layer0.bias", np.ones(3))
    assert np.array_equal(seq.layers[0].params["bias"], np.ones(3))


def test_infer_forward_is_idempotent_and_pure():
    rng = Rng(4)
    seq = Sequential([Conv2D(2, 1, 2, rng=rng), ReLU(), BatchNorm(2), Flatten(), Dense(18, 3, rng=rng)])
    x = rng.normal((3, 4, 4, 1))
    seq.forward(x, train=True)
    before = {k: v.copy() for k, v in seq.buffers.items()}
    a = seq.forward(x, train=False)
    b = seq.forward(x, train=False)
    assert a.tobytes() == b.tobytes()
    for k, v in seq.buffers.items():
        assert v.tobytes() == before[k].tobytes()


def test_conv_linearity():
    rng = Rng(5)
    x1, x2, k = rng.normal((2, 6, 5, 2)), rng.normal((2, 6, 5, 2)), rng.normal((3, 3, 2, 3))
    lhs = conv2d_gemm(2.5 * x1 - 0.7 * x2, k)
    rhs = 2.5 * conv2d_gemm(x1, k) - 0.7 * conv2d_gemm(x2, k)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10
