"""Tucker factorization of convolution kernels along the channel modes.

A kernel ``K[L, L, C, S]`` is approximated as

    K[i, j, c, s] = sum_{a,b} core[i, j, a, b] * U_in[c, a] * U_out[s, b]

so a convolution becomes a 1x1 projection to ``R_c`` channels, an LxL
convolution with the core, and a 1x1 expansion to ``S`` channels.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .layers import Layer, col2im, im2col, reshape_kernel, unreshape_kernel, _out_extent
from .tensor import Rng


@dataclass
class TuckerKernel:
    core: np.ndarray           # [L, L, R_c, R_s]
    input_factor: np.ndarray   # [C, R_c]
    output_factor: np.ndarray  # [S, R_s]
    error_bound: float = 0.0
    error: float = 0.0

    @property
    def ranks(self):
        return self.core.shape[2], self.core.shape[3]

    def reconstruct(self):
        return np.einsum("ijab,ca,sb->ijcs", self.core, self.input_factor,
                         self.output_factor, optimize=True)

    def named(self):
        return {"tucker.core": self.core,
                "tucker.input_factor": self.input_factor,
                "tucker.output_factor": self.output_factor}


def _leading_vectors(unfolding, rank):
    try:
        u, s, _ = np.linalg.svd(unfolding, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed: {exc}") from exc
    return u[:, :rank], float((s[rank:] ** 2).sum())


def hosvd_decompose(kernel, rank_in, rank_out):
    """Truncated HOSVD on the input- and output-channel modes.

    The factors are the leading left singular vectors of the mode-3 and
    mode-4 unfoldings; ``error_bound`` is the root of the total discarded
    squared singular mass over both modes, ``error`` the measured Frobenius
    error.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be [L, L, C, S], got {list(kernel.shape)}")
    L, _, C, S = kernel.shape
    if not (1 <= rank_in <= C) or not (1 <= rank_out <= S):
        raise ConfigError(f"Tucker ranks ({rank_in}, {rank_out}) out of bounds for C={C}, S={S}")
    unfold_in = np.moveaxis(kernel, 2, 0).reshape(C, -1)
    unfold_out = np.moveaxis(kernel, 3, 0).reshape(S, -1)
    u_in, d_in = _leading_vectors(unfold_in, rank_in)
    u_out, d_out = _leading_vectors(unfold_out, rank_out)
    core = np.einsum("ijcs,ca,sb->ijab", kernel, u_in, u_out, optimize=True)
    tk = TuckerKernel(np.ascontiguousarray(core), np.ascontiguousarray(u_in),
                      np.ascontiguousarray(u_out))
    tk.error_bound = float(np.sqrt(d_in + d_out))
    tk.error = float(np.linalg.norm(tk.reconstruct() - kernel))
    return tk


def tucker_param_count(L, C, S, rank_in, rank_out):
    """Weights in a Tucker-factored kernel (bias excluded)."""
    return L * L * rank_in * rank_out + C * rank_in + S * rank_out


def tucker_conv_forward(tk, x, stride=(1, 1)):
    """Staged convolution: project channels, convolve with the core, expand."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[3] != tk.input_factor.shape[0]:
        raise ShapeError(f"input has {x.shape[3]} channels, Tucker kernel expects "
                         f"{tk.input_factor.shape[0]}")
    layer = TuckerConv2D(tk, stride=stride, bias=np.zeros(tk.output_factor.shape[0]))
    y = layer.forward(x)
    return y[0] if single else y


class TuckerConv2D(Layer):
    """Convolution with a Tucker-factored kernel.

    By default the two factor matrices are frozen and only the core and bias
    train; ``train_factors=True`` makes every tensor trainable.
    """

    def __init__(self, tk, stride=(1, 1), bias=None, train_factors=False):
        super().__init__()
        self.stride = tuple(int(s) for s in stride)
        self.L = tk.core.shape[0]
        self.c_in = tk.input_factor.shape[0]
        self.c_out = tk.output_factor.shape[0]
        self.params = {
            "core": np.asarray(tk.core, dtype=np.float64),
            "input_factor": np.asarray(tk.input_factor, dtype=np.float64),
            "output_factor": np.asarray(tk.output_factor, dtype=np.float64),
            "bias": np.zeros(self.c_out) if bias is None else np.asarray(bias, dtype=np.float64),
        }
        if not train_factors:
            self.frozen = {"input_factor", "output_factor"}

    @classmethod
    def random(cls, L, c_in, c_out, rank_in, rank_out, stride=(1, 1), rng=None,
               train_factors=True):
        """Fresh layer: orthonormal random factors, Gaussian core."""
        rng = rng or Rng(0)
        u_in, _ = np.linalg.qr(rng.normal((c_in, rank_in)))
        u_out, _ = np.linalg.qr(rng.normal((c_out, rank_out)))
        std = np.sqrt(2.0 / (L * L * (c_in + c_out)))
        core = rng.normal((L, L, rank_in, rank_out), std)
        return cls(TuckerKernel(core, u_in, u_out), stride=stride, train_factors=train_factors)

    @property
    def kernel(self):
        return TuckerKernel(self.params["core"], self.params["input_factor"],
                            self.params["output_factor"])

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise ShapeError(f"TuckerConv2D expects [N, W, H, {self.c_in}], got {list(x.shape)}")
        p = self.params
        N, W, H, _ = x.shape
        Wo = _out_extent(W, self.L, self.stride[0])
        Ho = _out_extent(H, self.L, self.stride[1])
        self._x = x
        z = x @ p["input_factor"]                       # [N, W, H, R_c]
        self._z_shape = z.shape
        self._cols = im2col(z, self.L, self.stride)     # [N*H'*W', L*L*R_c]
        v = self._cols @ reshape_kernel(p["core"])      # [N*H'*W', R_s]
        self._v = v
        y = v @ p["output_factor"].T + p["bias"]
        return np.ascontiguousarray(y.reshape(N, Ho, Wo, self.c_out).transpose(0, 2, 1, 3))

    def backward(self, dy):
        p = self.params
        N, Wo, Ho, S = dy.shape
        dmat = np.ascontiguousarray(dy.transpose(0, 2, 1, 3)).reshape(N * Ho * Wo, S)
        grads = {"bias": dmat.sum(axis=0), "output_factor": dmat.T @ self._v}
        dv = dmat @ p["output_factor"]
        grads["core"] = unreshape_kernel(self._cols.T @ dv, self.L, p["core"].shape[2])
        if self.skip_input_grad and "input_factor" in self.frozen:
            self.grads = {k: v for k, v in grads.items() if k not in self.frozen}
            return None
        dz = col2im(dv @ reshape_kernel(p["core"]).T, self._z_shape, self.L, self.stride)
        x = self._x
        grads["input_factor"] = x.reshape(-1, self.c_in).T @ dz.reshape(-1, dz.shape[-1])
        self.grads = {k: v for k, v in grads.items() if k not in self.frozen}
        if self.skip_input_grad:
            return None
        return dz @ p["input_factor"].T

    def output_shape(self, in_shape):
        W, H, C = in_shape
        if C != self.c_in:
            raise ShapeError(f"TuckerConv2D expects {self.c_in} channels, got {C}")
        return (_out_extent(W, self.L, self.stride[0]),
                _out_extent(H, self.L, self.stride[1]), self.c_out)

    def describe(self):
        rc, rs = self.params["core"].shape[2:]
        return (f"TuckerConv2D({self.L}x{self.L}, {self.c_in}->{self.c_out}, "
                f"ranks=({rc},{rs}), stride={self.stride})")
