import numpy as np
import pytest

from t2vreg.errors import ConfigError, ShapeError
from t2vreg.layers import conv2d_direct, grad_check
from t2vreg.tensor import Rng
from t2vreg.tucker import (TuckerConv2D, TuckerKernel, hosvd_decompose, tucker_conv_forward,
                           tucker_param_count)


def orthonormal(rng, rows, cols):
    q, _ = np.linalg.qr(rng.normal((rows, cols)))
    return q


def test_full_rank_is_exact_and_orthonormal():
    k = Rng(0).normal((3, 3, 4, 5))
    tk = hosvd_decompose(k, 4, 5)
    assert np.max(np.abs(tk.reconstruct() - k)) <= 1e-10
    for f in (tk.input_factor, tk.output_factor):
        np.testing.assert_allclose(f.T @ f, np.eye(f.shape[1]), atol=1e-8)


def test_recovers_constructed_low_rank_kernel():
    rng = Rng(1)
    core = rng.normal((3, 3, 2, 5))
    k = TuckerKernel(core, orthonormal(rng, 4, 2), orthonormal(rng, 5, 5)).reconstruct()
    tk = hosvd_decompose(k, 2, 5)
    assert tk.ranks == (2, 5)
    assert np.max(np.abs(tk.reconstruct() - k)) <= 1e-9


def test_rank_bounds():
    k = np.zeros((3, 3, 4, 5))
    for ranks in [(0, 2), (5, 2), (2, 6), (2, 0)]:
        with pytest.raises(ConfigError):
            hosvd_decompose(k, *ranks)
    with pytest.raises(ShapeError):
        hosvd_decompose(np.zeros((3, 3, 4)), 1, 1)


def test_error_monotone_in_each_rank_and_within_bound():
    k = Rng(2).normal((3, 3, 6, 7))
    for rs in range(1, 8):
        errs = [hosvd_decompose(k, rc, rs).error for rc in range(1, 7)]
        assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))
    for rc in range(1, 7):
        errs = [hosvd_decompose(k, rc, rs).error for rs in range(1, 8)]
        assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))
        tk = hosvd_decompose(k, rc, 3)
        assert tk.error <= tk.error_bound + 1e-12


def test_param_counts():
    assert tucker_param_count(3, 64, 128, 16, 16) == 5376
    assert 3 * 3 * 64 * 128 == 73728
    # overhead case: factoring a 1x1 single-channel kernel costs 3 weights instead of 1
    assert tucker_param_count(1, 1, 1, 1, 1) == 3


def test_staged_forward_full_rank_equals_direct():
    rng = Rng(3)
    k = rng.normal((3, 3, 4, 5))
    x = rng.normal((7, 6, 4))
    y = tucker_conv_forward(hosvd_decompose(k, 4, 5), x)
    assert np.max(np.abs(y - conv2d_direct(x, k))) <= 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_staged_forward_equals_reconstructed_kernel(seed):
    rng = Rng(seed)
    C, S = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    L = int(rng.integers(1, 4))
    rc, rs = int(rng.integers(1, C + 1)), int(rng.integers(1, S + 1))
    tk = TuckerKernel(rng.normal((L, L, rc, rs)), rng.normal((C, rc)), rng.normal((S, rs)))
    x = rng.normal((2, L + 4, L + 3, C))
    for stride in [(1, 1), (2, 1)]:
        y = tucker_conv_forward(tk, x, stride)
        ref = np.stack([conv2d_direct(xi, tk.reconstruct(), stride) for xi in x])
        assert np.max(np.abs(y - ref)) <= 1e-10


def test_zero_input_and_channel_mismatch():
    tk = hosvd_decompose(Rng(4).normal((3, 3, 2, 3)), 1, 2)
    assert not np.any(tucker_conv_forward(tk, np.zeros((5, 5, 2))))
    with pytest.raises(ShapeError):
        tucker_conv_forward(tk, np.zeros((5, 5, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_layer_grad_check(seed):
    rng = Rng(seed)
    layer = TuckerConv2D.random(3, 3, 4, 2, 3, stride=(1, 2), rng=rng, train_factors=True)
    layer.params["bias"] = rng.normal(4)
    grad_check(layer, rng.normal((2, 5, 6, 3)), tolerance=1e-5, rng=rng).assert_ok()


def test_frozen_factors_are_not_trained():
    rng = Rng(5)
    tk = hosvd_decompose(rng.normal((3, 3, 3, 4)), 2, 2)
    layer = TuckerConv2D(tk)
    layer.forward(rng.normal((2, 5, 5, 3)), train=True)
    layer.backward(rng.normal((2, 3, 3, 4)))
    assert set(layer.grads) == {"core", "bias"}
    grad_check(layer, rng.normal((2, 5, 5, 3)), rng=rng).assert_ok()
