"""Tensor-train (TT) matrices.

A weight matrix of extents ``prod(m) x prod(n)`` is stored as K cores, core
k of extents ``[r_k, m_k, n_k, r_{k+1}]`` with ``r_1 = r_{K+1} = 1``; entry
``W[(i_1..i_K), (j_1..j_K)]`` is the product of the core slices
``G_k[:, i_k, j_k, :]``.

Composite indices are little-endian in k: the row index is
``i_1 + m_1*(i_2 + m_2*(i_3 + ...))`` so ``i_1`` varies fastest, and the
column index is built from the ``j_k`` the same way.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .layers import Layer
from .tensor import Rng


@dataclass
class TTShape:
    m: list
    n: list
    r: list

    def __post_init__(self):
        self.m = [int(v) for v in self.m]
        self.n = [int(v) for v in self.n]
        self.r = [int(v) for v in self.r]
        K = len(self.m)
        if K < 1 or len(self.n) != K:
            raise ConfigError(f"TT shape needs equal-length m and n, got m={self.m} n={self.n}")
        if len(self.r) != K + 1:
            raise ConfigError(f"TT ranks need K+1={K + 1} entries, got {self.r}")
        if self.r[0] != 1 or self.r[-1] != 1:
            raise ConfigError(f"boundary TT ranks must be 1, got {self.r}")
        if min(self.m + self.n + self.r) < 1:
            raise ConfigError(f"TT extents and ranks must be >= 1: m={self.m} n={self.n} r={self.r}")

    @property
    def K(self):
        return len(self.m)

    @property
    def rows(self):
        return int(np.prod(self.m))

    @property
    def cols(self):
        return int(np.prod(self.n))

    def core_shape(self, k):
        return (self.r[k], self.m[k], self.n[k], self.r[k + 1])

    def to_json(self):
        return {"m": list(self.m), "n": list(self.n), "r": list(self.r)}


@dataclass
class TTCores:
    shape: TTShape
    cores: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.cores) != self.shape.K:
            raise ShapeError(f"expected {self.shape.K} cores, got {len(self.cores)}")
        for k, core in enumerate(self.cores):
            if tuple(core.shape) != self.shape.core_shape(k):
                raise ShapeError(f"core {k} has extents {list(core.shape)}, "
                                 f"expected {list(self.shape.core_shape(k))}")

    @classmethod
    def from_cores(cls, cores):
        cores = [np.asarray(c, dtype=np.float64) for c in cores]
        shape = TTShape([c.shape[1] for c in cores], [c.shape[2] for c in cores],
                        [c.shape[0] for c in cores] + [cores[-1].shape[3]])
        return cls(shape, cores)

    def param_count(self):
        return sum(int(c.size) for c in self.cores)

    def named(self):
        return {f"tt.core.{k}": c for k, c in enumerate(self.cores)}


def tt_param_count(shape):
    """Core storage ``sum_k m_k n_k r_k r_{k+1}`` (bias excluded)."""
    return sum(shape.m[k] * shape.n[k] * shape.r[k] * shape.r[k + 1] for k in range(shape.K))


def tt_reconstruct(tt):
    """Materialize the full ``prod(m) x prod(n)`` matrix."""
    first = tt.cores[0]
    acc = first[0]  # [m1, n1, r2]
    for core in tt.cores[1:]:
        M, N, _ = acc.shape
        _, m, n, r2 = core.shape
        # new composite index: previous digits fastest, new digit slowest
        acc = np.einsum("IJa,aijb->iIjJb", acc, core).reshape(m * M, n * N, r2)
    return np.ascontiguousarray(acc[:, :, 0])


def _contract_forward(cores, x):
    """Sequential core contraction of a batch ``x [B, prod(n)]``.

    Returns the output ``[B, prod(m)]`` and the per-core inputs needed by the
    backward pass, each as a ``[B*Jhi*I, n_k*r_k]`` matrix plus its 5-d shape.
    """
    B = x.shape[0]
    n = [c.shape[2] for c in cores]
    z = x.reshape(B, x.shape[1] // n[0], n[0], 1, 1)
    saved = []
    for k, core in enumerate(cores):
        Bz, Jhi, nk, r, I = z.shape
        _, m, _, s = core.shape
        # one GEMM per core: rows (b, J, I), columns (n, r) -> (m, s)
        zmat = z.transpose(0, 1, 4, 2, 3).reshape(Bz * Jhi * I, nk * r)
        saved.append((zmat, z.shape))
        out = zmat @ core.transpose(2, 0, 1, 3).reshape(nk * r, m * s)
        out = out.reshape(Bz, Jhi, I, m, s).transpose(0, 1, 4, 3, 2)
        if k + 1 < len(cores):
            nn = n[k + 1]
            z = out.reshape(Bz, Jhi // nn, nn, s, m * I)
        else:
            z = out.reshape(Bz, m * I)
    return z, saved


def tt_matvec(tt, x):
    """``W @ x`` without materializing W; ``x`` is a vector or a ``[B, prod(n)]`` batch
    (in the batched case each row is multiplied, i.e. the result is ``x @ W.T``)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    if xb.shape[1] != tt.shape.cols:
        raise ShapeError(f"TT matrix expects input length {tt.shape.cols}, got {xb.shape[1]}")
    y, _ = _contract_forward(tt.cores, xb)
    return y[0] if single else y


class TTSVDResult:
    def __init__(self, tt, discarded, error):
        self.tt = tt
        self.error_bound = float(np.sqrt(discarded))
        self.error = float(error)


def _normalize_max_ranks(max_ranks, K):
    if max_ranks is None:
        return [None] * (K - 1)
    if np.isscalar(max_ranks):
        return [int(max_ranks)] * (K - 1)
    max_ranks = list(max_ranks)
    if len(max_ranks) == K + 1:
        max_ranks = max_ranks[1:-1]
    if len(max_ranks) != K - 1:
        raise ConfigError(f"need {K - 1} interior ranks (or {K + 1} with ends), got {max_ranks}")
    return [None if r is None else int(r) for r in max_ranks]


def tt_svd(w, m, n, max_ranks=None, tol=0.0, return_info=False):
    """Decompose a matrix into TT cores by sequential truncated SVDs.

    At each bond the kept rank is the smaller of the cap in ``max_ranks`` and
    the smallest rank holding at least ``1 - tol**2`` of the squared singular
    mass.  Singular values are pushed into the remainder, so every stored core
    except the last has orthonormal unfoldings and the Frobenius error is at
    most ``sqrt(sum of discarded sigma**2)``.
    """
    w = np.asarray(w, dtype=np.float64)
    m = [int(v) for v in m]
    n = [int(v) for v in n]
    K = len(m)
    if len(n) != K:
        raise ConfigError(f"m and n must have equal length, got {m} and {n}")
    if w.shape != (int(np.prod(m)), int(np.prod(n))):
        raise ShapeError(f"matrix {list(w.shape)} does not match m={m}, n={n}")
    caps = _normalize_max_ranks(max_ranks, K)
    if any(c is not None and c < 1 for c in caps):
        raise ConfigError(f"TT ranks must be >= 1, got {caps}")

    # row-major axes (m_K..m_1, n_K..n_1) -> (m_1, n_1, m_2, n_2, ...)
    t = w.reshape(m[::-1] + n[::-1])
    order = []
    for k in range(K):
        order += [K - 1 - k, 2 * K - 1 - k]
    t = np.transpose(t, order)

    cores = []
    ranks = [1]
    discarded = 0.0
    rest = t.reshape(-1)
    for k in range(K - 1):
        rk = ranks[-1]
        mat = rest.reshape(rk * m[k] * n[k], -1)
        try:
            u, s, vt = np.linalg.svd(mat, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"SVD failed at TT bond {k + 1}: {exc}") from exc
        energy = s ** 2
        total = energy.sum()
        if total > 0:
            kept = np.cumsum(energy)
            need = (1.0 - tol ** 2) * total
            rank = int(np.searchsorted(kept, need * (1 - 1e-15)) + 1)
        else:
            rank = 1
        rank = min(rank, len(s))
        if caps[k] is not None:
            rank = min(rank, caps[k])
        discarded += float(energy[rank:].sum())
        cores.append(u[:, :rank].reshape(rk, m[k], n[k], rank))
        rest = s[:rank, None] * vt[:rank]
        ranks.append(rank)
    cores.append(rest.reshape(ranks[-1], m[-1], n[-1], 1))
    ranks.append(1)
    tt = TTCores(TTShape(m, n, ranks), [np.ascontiguousarray(c) for c in cores])
    if not return_info:
        return tt
    error = np.linalg.norm(tt_reconstruct(tt) - w)
    return TTSVDResult(tt, discarded, error)


def tt_init_random(shape, rng):
    """Gaussian cores with std ``sqrt(2 / (n_k r_k + m_k r_{k+1}))``."""
    cores = []
    for k in range(shape.K):
        std = np.sqrt(2.0 / (shape.n[k] * shape.r[k] + shape.m[k] * shape.r[k + 1]))
        cores.append(rng.normal(shape.core_shape(k), std))
    return TTCores(shape, cores)


def factorize(value, K):
    """Split ``value`` into K factors as evenly as possible (some may be 1).

    Factors are returned in descending order.
    """
    value = int(value)
    primes = []
    v, p = value, 2
    while p * p <= v:
        while v % p == 0:
            primes.append(p)
            v //= p
        p += 1
    if v > 1:
        primes.append(v)
    factors = [1] * K
    for prime in sorted(primes, reverse=True):
        i = int(np.argmin(factors))
        factors[i] *= prime
    return sorted(factors, reverse=True)


def default_tt_shape(n_in, n_out, K, rank):
    """TT shape with balanced factorizations and uniform interior rank."""
    m = factorize(n_out, K)
    n = factorize(n_in, K)
    return TTShape(m, n, [1] + [int(rank)] * (K - 1) + [1])


class TTLayer(Layer):
    """Dense layer whose weight is held in TT format.

    Computes ``y = W x + b`` per batch row, where W is ``prod(m) x prod(n)``.
    """

    def __init__(self, shape=None, rng=None, cores=None, bias=None):
        super().__init__()
        if cores is None:
            cores = tt_init_random(shape, rng or Rng(0))
        elif not isinstance(cores, TTCores):
            cores = TTCores.from_cores(cores)
        self.shape = cores.shape
        self.params = {f"core.{k}": c for k, c in enumerate(cores.cores)}
        self.params["bias"] = (np.zeros(self.shape.rows) if bias is None
                               else np.asarray(bias, dtype=np.float64))

    @property
    def cores(self):
        return TTCores(self.shape, [self.params[f"core.{k}"] for k in range(self.shape.K)])

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.shape.cols:
            raise ShapeError(f"TTLayer expects [N, {self.shape.cols}], got {list(x.shape)}")
        cores = [self.params[f"core.{k}"] for k in range(self.shape.K)]
        y, self._saved = _contract_forward(cores, x)
        self._in_width = x.shape[1]
        return y + self.params["bias"]

    def backward(self, dy):
        K = self.shape.K
        cores = [self.params[f"core.{k}"] for k in range(K)]
        grads = {"bias": np.ones(len(dy)) @ dy}
        B = dy.shape[0]
        g = dy
        for k in range(K - 1, -1, -1):
            zmat, (_, Jhi, n, r, I) = self._saved[k]
            _, m, _, s = cores[k].shape
            # upstream gradient as rows (b, J, I), columns (m, s)
            dmat = g.reshape(B, Jhi, s, m, I).transpose(0, 1, 4, 3, 2).reshape(-1, m * s)
            gc = (zmat.T @ dmat).reshape(n, r, m, s)
            grads[f"core.{k}"] = gc.transpose(1, 2, 0, 3)
            gz = dmat @ cores[k].transpose(1, 3, 2, 0).reshape(m * s, n * r)
            g = gz.reshape(B, Jhi, I, n, r).transpose(0, 1, 3, 4, 2)
        self.grads = grads
        return g.reshape(B, self._in_width)

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.shape.cols,):
            raise ShapeError(f"TT layer expects width {self.shape.cols}, got {list(in_shape)}")
        return (self.shape.rows,)

    def describe(self):
        return f"TT(m={self.shape.m}, n={self.shape.n}, r={self.shape.r})"
