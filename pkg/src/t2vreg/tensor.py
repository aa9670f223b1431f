"""Dense float64 tensors, seeded randomness and the TTV1 file format.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 stored
row-major (C order).  The helpers below add the shape checks and error
messages the rest of the package relies on.
"""

import struct

import numpy as np

from .errors import ShapeError

TTV1_MAGIC = b"TTV1"


def as_tensor(data, shape=None):
    """Return a C-contiguous float64 array, optionally reshaped."""
    t = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        t = reshape(t, shape)
    if t.ndim < 1:
        t = t.reshape(1)
    return t


def matmul(a, b):
    """Matrix product of two rank-2 tensors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {list(a.shape)} x {list(b.shape)}")
    return a @ b


def reshape(t, new_shape):
    new_shape = tuple(int(s) for s in new_shape)
    if any(s < 1 for s in new_shape):
        raise ShapeError(f"extents must be >= 1, got {list(new_shape)}")
    if int(np.prod(new_shape)) != t.size:
        raise ShapeError(
            f"cannot reshape {list(t.shape)} ({t.size} elements) to {list(new_shape)}"
        )
    return np.ascontiguousarray(t).reshape(new_shape)


def permute(t, axis_order):
    axis_order = tuple(int(a) for a in axis_order)
    if sorted(axis_order) != list(range(t.ndim)):
        raise ShapeError(f"{list(axis_order)} is not a permutation of 0..{t.ndim - 1}")
    return np.ascontiguousarray(np.transpose(t, axis_order))


class Rng:
    """Seeded random source.

    Uses numpy's PCG64 bit generator; normals come from numpy's ziggurat
    sampler.  Every random draw in the package goes through an instance of
    this class so that a seed pins down a whole run.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std=1.0):
        return rand_normal(self, shape, std)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def spawn(self, *keys):
        """Independent child stream derived from (seed, *keys)."""
        ss = np.random.SeedSequence([self.seed, *[int(k) for k in keys]])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))


def rand_normal(rng, shape, std=1.0):
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    draws = rng.gen.standard_normal(shape)
    return np.ascontiguousarray(draws * float(std), dtype=np.float64)


# --- TTV1 -------------------------------------------------------------------

def tensor_to_bytes(t):
    t = as_tensor(t)
    header = TTV1_MAGIC + struct.pack("<I", t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + t.astype("<f8").tobytes(order="C")


def tensor_from_bytes(buf, offset=0):
    """Decode one TTV1 tensor; returns ``(tensor, end_offset)``."""
    if bytes(buf[offset:offset + 4]) != TTV1_MAGIC:
        raise ValueError("bad TTV1 magic")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
    pos += 8 * count
    return data.astype(np.float64).reshape(shape), pos


def save_tensor(path, t):
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t))


def load_tensor(path):
    with open(path, "rb") as f:
        buf = f.read()
    t, _ = tensor_from_bytes(buf)
    return t
