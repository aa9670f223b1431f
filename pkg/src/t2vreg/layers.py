"""Layers with hand-written backward passes.

Every layer follows the same contract:

    y = layer.forward(x, train)    # caches what backward needs
    dx = layer.backward(dy)        # fills layer.grads, returns input grad

Conv layers take batched input laid out ``[N, W, H, C]`` (width, height,
channels); dense layers take ``[N, D]``.  Convolutions are "valid" (no
padding) with an optional stride per spatial axis.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Rng


class Layer:
    """Base class; subclasses fill ``params`` and optionally ``buffers``."""

    def __init__(self):
        self.params = {}
        self.buffers = {}
        self.grads = {}
        self.frozen = set()
        # set on the first layer of a model: the data gradient is never used
        self.skip_input_grad = False

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def trainable(self):
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def param_count(self):
        return sum(int(p.size) for p in self.params.values())

    def kink_distance(self, x):
        """Distance of any non-differentiable point from ``x`` (inf if smooth)."""
        return np.inf

    def output_shape(self, in_shape):
        """Per-sample output shape (without batch axis)."""
        return in_shape

    def describe(self):
        return type(self).__name__


# --- convolution primitives ---------------------------------------------------

def _out_extent(n, L, stride):
    if L > n:
        raise ShapeError(f"kernel width {L} exceeds input extent {n}")
    return (n - L) // stride + 1


def conv2d_direct(x, kernel, stride=(1, 1)):
    """Direct evaluation of the convolution sum.

    ``Y[x, y, s] = sum_{i,j,c} K[i, j, c, s] * X[x + i, y + j, c]`` (0-based),
    with ``x`` and ``y`` stepping by ``stride``.  Accepts ``[W, H, C]`` or a
    batch ``[N, W, H, C]``.  Kept as the reference the GEMM path is tested
    against.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects [N,W,H,C] input and [L,L,C,S] kernel, "
                         f"got {list(x.shape)} and {list(kernel.shape)}")
    L, L2, C, S = kernel.shape
    if L != L2:
        raise ShapeError(f"kernel must be square, got {list(kernel.shape)}")
    if x.shape[3] != C:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {C}")
    sw, sh = stride
    Wo = _out_extent(x.shape[1], L, sw)
    Ho = _out_extent(x.shape[2], L, sh)
    y = np.zeros((x.shape[0], Wo, Ho, S))
    for i in range(L):
        for j in range(L):
            patch = x[:, i:i + sw * (Wo - 1) + 1:sw, j:j + sh * (Ho - 1) + 1:sh, :]
            y += patch @ kernel[i, j]
    return y[0] if single else y


def im2col(x, L, stride=(1, 1)):
    """Patch matrix of a ``[W, H, C]`` input (or ``[N, W, H, C]`` batch).

    0-based index map: row ``x + W'*y`` holds the patch feeding output
    position (x, y); column ``i + L*j + L*L*c`` holds input element
    ``X[x + i, y + j, c]``.  For a batch the rows of sample n follow those of
    sample n - 1.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    N, W, H, C = x.shape
    sw, sh = stride
    Wo = _out_extent(W, L, sw)
    Ho = _out_extent(H, L, sh)
    win = sliding_window_view(x, (L, L), axis=(1, 2))[:, ::sw, ::sh]
    # win: [N, W', H', C, i, j] -> [N, H', W', C, j, i]
    cols = win.transpose(0, 2, 1, 3, 5, 4).reshape(N * Ho * Wo, C * L * L)
    return np.ascontiguousarray(cols)


def col2im(cols, in_shape, L, stride=(1, 1)):
    """Adjoint of :func:`im2col`: scatter-add patch rows back to ``[N,W,H,C]``."""
    N, W, H, C = in_shape
    sw, sh = stride
    Wo = _out_extent(W, L, sw)
    Ho = _out_extent(H, L, sh)
    c6 = cols.reshape(N, Ho, Wo, C, L, L)
    dx = np.zeros(in_shape)
    for i in range(L):
        for j in range(L):
            dx[:, i:i + sw * (Wo - 1) + 1:sw, j:j + sh * (Ho - 1) + 1:sh, :] += \
                c6[:, :, :, :, j, i].transpose(0, 2, 1, 3)
    return dx


def reshape_kernel(kernel):
    """``[L, L, C, S]`` kernel to the ``[L*L*C, S]`` matrix matching im2col."""
    L, _, C, S = kernel.shape
    return np.ascontiguousarray(kernel.transpose(2, 1, 0, 3)).reshape(L * L * C, S)


def unreshape_kernel(kmat, L, C):
    S = kmat.shape[1]
    return np.ascontiguousarray(kmat.reshape(C, L, L, S).transpose(2, 1, 0, 3))


def conv2d_gemm(x, kernel, stride=(1, 1)):
    """Convolution as ``im2col(x) @ reshape_kernel(kernel)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    L, _, C, S = kernel.shape
    if x.shape[3] != C:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {C}")
    N, W, H, _ = x.shape
    Wo = _out_extent(W, L, stride[0])
    Ho = _out_extent(H, L, stride[1])
    y = im2col(x, L, stride) @ reshape_kernel(kernel)
    y = y.reshape(N, Ho, Wo, S).transpose(0, 2, 1, 3)
    y = np.ascontiguousarray(y)
    return y[0] if single else y


def _patches(x, L, stride):
    """Patch tensor ``[N, W', H', L, L, C]`` in natural (i, j, c) column order.

    A column permutation of :func:`im2col` that keeps channel runs contiguous,
    so the copy is cheap and the kernel needs no transpose.
    """
    sw, sh = stride
    win = sliding_window_view(x, (L, L), axis=(1, 2))[:, ::sw, ::sh]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _patches_adjoint(dp, in_shape, stride):
    N, Wo, Ho, L, _, C = dp.shape
    sw, sh = stride
    dx = np.zeros(in_shape)
    for i in range(L):
        for j in range(L):
            dx[:, i:i + sw * (Wo - 1) + 1:sw, j:j + sh * (Ho - 1) + 1:sh, :] += dp[:, :, :, i, j, :]
    return dx


# --- layers -------------------------------------------------------------------

def glorot_std(fan_in, fan_out):
    return float(np.sqrt(2.0 / (fan_in + fan_out)))


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None, weight=None, bias=None):
        super().__init__()
        self.n_in, self.n_out = int(n_in), int(n_out)
        if weight is None:
            rng = rng or Rng(0)
            weight = rng.normal((self.n_in, self.n_out), glorot_std(self.n_in, self.n_out))
        if bias is None:
            bias = np.zeros(self.n_out)
        weight = np.asarray(weight, dtype=np.float64)
        if weight.shape != (self.n_in, self.n_out):
            raise ShapeError(f"weight shape {list(weight.shape)} != [{n_in}, {n_out}]")
        self.params = {"weight": weight, "bias": np.asarray(bias, dtype=np.float64)}

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"Dense expects [N, {self.n_in}] input, got {list(x.shape)}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dy):
        self.grads = {"weight": self._x.T @ dy, "bias": np.ones(len(dy)) @ dy}
        return dy @ self.params["weight"].T

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ShapeError(f"Dense expects width {self.n_in}, got {list(in_shape)}")
        return (self.n_out,)

    def describe(self):
        return f"Dense({self.n_in}->{self.n_out})"


def fc_forward(layer, x):
    return layer.forward(x)


class Conv2D(Layer):
    """Valid 2-D convolution computed through im2col + GEMM."""

    def __init__(self, L, c_in, c_out, stride=(1, 1), rng=None, kernel=None, bias=None):
        super().__init__()
        self.L, self.c_in, self.c_out = int(L), int(c_in), int(c_out)
        self.stride = tuple(int(s) for s in stride)
        if kernel is None:
            rng = rng or Rng(0)
            fan_in, fan_out = self.L ** 2 * self.c_in, self.L ** 2 * self.c_out
            kernel = rng.normal((self.L, self.L, self.c_in, self.c_out),
                                glorot_std(fan_in, fan_out))
        if bias is None:
            bias = np.zeros(self.c_out)
        self.params = {"kernel": np.asarray(kernel, dtype=np.float64),
                       "bias": np.asarray(bias, dtype=np.float64)}

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise ShapeError(f"Conv2D expects [N, W, H, {self.c_in}], got {list(x.shape)}")
        N, W, H, _ = x.shape
        Wo = _out_extent(W, self.L, self.stride[0])
        Ho = _out_extent(H, self.L, self.stride[1])
        self._in_shape = x.shape
        L, C, S = self.L, self.c_in, self.c_out
        self._cols = _patches(x, L, self.stride).reshape(N * Wo * Ho, L * L * C)
        y = self._cols @ self.params["kernel"].reshape(L * L * C, S)
        y += self.params["bias"]
        return y.reshape(N, Wo, Ho, S)

    def backward(self, dy):
        N, Wo, Ho, S = dy.shape
        L, C = self.L, self.c_in
        dmat = dy.reshape(N * Wo * Ho, S)
        self.grads = {"kernel": (self._cols.T @ dmat).reshape(L, L, C, S),
                      "bias": np.ones(len(dmat)) @ dmat}
        if self.skip_input_grad:
            return None
        dp = dmat @ self.params["kernel"].reshape(L * L * C, S).T
        return _patches_adjoint(dp.reshape(N, Wo, Ho, L, L, C), self._in_shape, self.stride)

    def output_shape(self, in_shape):
        W, H, C = in_shape
        if C != self.c_in:
            raise ShapeError(f"Conv2D expects {self.c_in} channels, got {C}")
        return (_out_extent(W, self.L, self.stride[0]),
                _out_extent(H, self.L, self.stride[1]), self.c_out)

    def describe(self):
        return f"Conv2D({self.L}x{self.L}, {self.c_in}->{self.c_out}, stride={self.stride})"


class ReLU(Layer):
    """max(0, x); the subgradient at exactly 0 is taken as 0."""

    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask

    def kink_distance(self, x):
        return float(np.min(np.abs(x)))


def relu(x):
    return np.maximum(x, 0.0)


class BatchNorm(Layer):
    """Per-channel normalization over every axis but the last."""

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.channels = int(channels)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.params = {"gamma": np.ones(self.channels), "beta": np.zeros(self.channels)}
        self.buffers = {"running_mean": np.zeros(self.channels),
                        "running_var": np.ones(self.channels)}

    def forward(self, x, train=False):
        if x.shape[-1] != self.channels:
            raise ShapeError(f"BatchNorm expects {self.channels} channels, got {x.shape[-1]}")
        x2 = x.reshape(-1, self.channels)
        if train:
            if x.shape[0] < 2:
                raise ValueError("BatchNorm needs a batch of at least 2 in train mode")
            # column sums through BLAS are much faster than reductions over a tall array
            ones = np.ones(len(x2))
            mean = (ones @ x2) / len(x2)
            var = np.maximum((ones @ (x2 * x2)) / len(x2) - mean * mean, 0.0)
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        scale = self.params["gamma"] * inv_std
        self._cache = (x2, mean, inv_std, x.shape, train)
        out = x2 * scale
        out += self.params["beta"] - mean * scale
        return out.reshape(x.shape)

    def backward(self, dy):
        x2, mean, inv_std, shape, train = self._cache
        dy2 = dy.reshape(-1, self.channels)
        gamma = self.params["gamma"]
        ones = np.ones(len(dy2))
        dbeta = ones @ dy2
        dgamma = (ones @ (dy2 * x2) - mean * dbeta) * inv_std
        self.grads = {"gamma": dgamma, "beta": dbeta}
        a = gamma * inv_std
        if not train:
            return (dy2 * a).reshape(shape)
        count = len(dy2)
        # d/dx of gamma * xhat with batch statistics, expanded as dy*a + x*b + c
        b = -a * inv_std * dgamma / count
        c = -a * dbeta / count - mean * b
        dx = dy2 * a
        dx += x2 * b
        dx += c
        return dx.reshape(shape)

    def describe(self):
        return f"BatchNorm({self.channels})"


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Sequential(Layer):
    """Chain of layers; parameter names are prefixed ``layer<i>.``."""

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        self.grads = {}
        for i, layer in enumerate(self.layers):
            for k, g in layer.grads.items():
                if k not in layer.frozen:
                    self.grads[f"layer{i}.{k}"] = g
        return dy

    @property
    def params(self):
        return {f"layer{i}.{k}": v for i, layer in enumerate(self.layers)
                for k, v in layer.params.items()}

    @params.setter
    def params(self, value):
        pass

    @property
    def buffers(self):
        return {f"layer{i}.{k}": v for i, layer in enumerate(self.layers)
                for k, v in layer.buffers.items()}

    @buffers.setter
    def buffers(self, value):
        pass

    @property
    def frozen(self):
        return {f"layer{i}.{k}" for i, layer in enumerate(self.layers) for k in layer.frozen}

    @frozen.setter
    def frozen(self, value):
        pass

    def set_param(self, name, value):
        idx, key = _split_name(name)
        self.layers[idx].params[key] = value

    def set_buffer(self, name, value):
        idx, key = _split_name(name)
        self.layers[idx].buffers[key] = value

    def kink_distance(self, x):
        dist = np.inf
        for layer in self.layers:
            dist = min(dist, layer.kink_distance(x))
            x = layer.forward(x, train=True)
        return dist

    def output_shape(self, in_shape):
        for layer in self.layers:
            in_shape = layer.output_shape(in_shape)
        return in_shape


def _split_name(name):
    head, key = name.split(".", 1)
    return int(head[len("layer"):]), key


# --- gradient checking --------------------------------------------------------

class GradCheckReport:
    def __init__(self, errors, tolerance):
        self.errors = errors
        self.tolerance = tolerance
        self.worst = max(errors, key=errors.get) if errors else None
        self.max_rel_error = errors[self.worst] if errors else 0.0
        self.passed = self.max_rel_error <= tolerance

    def assert_ok(self):
        if not self.passed:
            raise AssertionError(
                f"gradient mismatch in {self.worst!r}: relative error "
                f"{self.max_rel_error:.3e} > {self.tolerance:.1e}"
            )

    def __repr__(self):
        return f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, worst={self.worst!r})"


def _rel_err(a, n):
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-10)
    return float(np.max(np.abs(a - n)) / scale)


def grad_check(layer, x, tolerance=1e-5, rng=None, step=1e-5, loss="linear", train=True):
    """Compare analytic gradients against central finite differences.

    The scalar loss is ``sum(R * y)`` for a fixed random ``R`` (``loss="linear"``)
    or ``0.5 * sum(y**2)`` (``loss="quadratic"``).  If ``rng`` is given and the
    input sits within 1e-6 of a ReLU kink, the input is redrawn.
    """
    x = np.array(x, dtype=np.float64)
    rng = rng or Rng(0)
    for _ in range(20):
        if layer.kink_distance(x) > 1e-6:
            break
        x = rng.normal(x.shape)
    else:
        raise ValueError("could not find an input away from non-differentiable points")

    y = layer.forward(x, train)
    weight = rng.normal(y.shape) if loss == "linear" else None

    def objective():
        out = layer.forward(x, train)
        if weight is None:
            return 0.5 * float(np.sum(out * out))
        return float(np.sum(out * weight))

    dy = weight if weight is not None else y
    dx = layer.backward(dy)
    analytic = {"input": dx}
    analytic.update({k: g.copy() for k, g in layer.grads.items()})

    targets = {"input": x}
    params = layer.params
    for k in layer.grads:
        targets[k] = params[k]

    errors = {}
    for name, arr in targets.items():
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = num.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            fp = objective()
            flat[idx] = orig - step
            fm = objective()
            flat[idx] = orig
            gflat[idx] = (fp - fm) / (2 * step)
        errors[name] = _rel_err(analytic[name], num)
    return GradCheckReport(errors, tolerance)
