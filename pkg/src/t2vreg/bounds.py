"""Evaluate the approximation-bound expressions for CNN, DNN-TT and CNN-TT.

These return the expression inside the big-O, nothing more: the constants
are unknown, so the numbers are only meaningful for comparing architectures
against each other.

Rank lists hold K+1 entries ``r[0..K]`` with both ends 1; core k (1-based)
is bounded by ``r[k-1]`` and ``r[k]``.  The second rank in the base of the
TT expressions is printed as an undefined index in the source formula; it is
read here as ``r[k]``.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

RANK_NOTE = "undefined rank index in the TT bound base evaluated as r_k"


@dataclass
class BoundParams:
    q: int = 1
    d: int = 1
    B: int = 1
    L_B: int = 1
    C_B: int = 1
    I: list = field(default_factory=lambda: [1])
    J: list = field(default_factory=lambda: [1])
    r: list = field(default_factory=lambda: [1, 1])
    n_B: list = field(default_factory=lambda: [1])
    c_B: list = field(default_factory=lambda: [1])

    def __post_init__(self):
        K = len(self.I)
        for name in ("J", "n_B", "c_B"):
            if len(getattr(self, name)) != K:
                raise ConfigError(f"{name} must have K={K} entries")
        if len(self.r) != K + 1 or self.r[0] != 1 or self.r[-1] != 1:
            raise ConfigError(f"r must have K+1={K + 1} entries with both ends 1, got {self.r}")
        scalars = [self.q, self.d, self.B, self.L_B, self.C_B]
        if min(scalars + list(self.I) + list(self.J) + list(self.r) + list(self.n_B)
               + list(self.c_B)) < 1:
            raise ConfigError("all bound parameters must be >= 1")

    @property
    def K(self):
        return len(self.I)

    @classmethod
    def from_json(cls, doc):
        """Missing ``c_B`` defaults to ``[L_B * C_B, 1, ..., 1]``, which meets the
        factorization constraint of the CNN-TT expression."""
        keys = {"q", "d", "B", "L_B", "C_B", "I", "J", "r", "n_B", "c_B"}
        args = {k: v for k, v in doc.items() if k in keys}
        if "c_B" not in args:
            K = len(args.get("I", [1]))
            args["c_B"] = [int(args.get("L_B", 1)) * int(args.get("C_B", 1))] + [1] * (K - 1)
        return cls(**args)


def cnn_bound(p):
    """``q / (L_B^2 C_B + B - 1)^(1/d)``."""
    return p.q / (p.L_B ** 2 * p.C_B + p.B - 1) ** (1.0 / p.d)


def _tt_product(I, J, r, widths, B):
    value = 1.0
    for k in range(len(I)):
        r_prev, r_k = r[k], r[k + 1]
        base = r_prev * r_k * widths[k] + B - 1
        value *= I[k] / base ** (1.0 / (r_k * r_prev * J[k]))
    return value


def ttdnn_bound(p):
    """``prod_k I_k / (r_{k-1} r_k n_{k,B} + B - 1)^(1 / (r_k r_{k-1} J_k))``."""
    return _tt_product(p.I, p.J, p.r, p.n_B, p.B)


def cnntt_bound(p, check=True):
    """The DNN-TT expression with per-core channel widths ``c_{k,B}``.

    With ``check`` the widths must factor the final conv layer:
    ``prod_k c_{k,B} == L_B * C_B``.
    """
    if check and int(np.prod(p.c_B)) != p.L_B * p.C_B:
        raise ConfigError(f"prod(c_B) = {int(np.prod(p.c_B))} must equal L_B*C_B = "
                          f"{p.L_B * p.C_B}")
    return _tt_product(p.I, p.J, p.r, p.c_B, p.B)


def bounds_table(configs):
    """CSV text with columns ``id, eq1, eq3, eq4`` (header comment notes the rank reading)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    buf.write(f"# {RANK_NOTE}\n")
    writer.writerow(["id", "eq1", "eq3", "eq4"])
    for i, doc in enumerate(configs):
        p = BoundParams.from_json(doc)
        writer.writerow([doc.get("id", str(i)), repr(cnn_bound(p)), repr(ttdnn_bound(p)),
                         repr(cnntt_bound(p))])
    return buf.getvalue()


def log_cnn_bound(p):
    return math.log(p.q) - math.log(p.L_B ** 2 * p.C_B + p.B - 1) / p.d
