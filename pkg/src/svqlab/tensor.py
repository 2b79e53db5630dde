"""Dense float64 tensors, seeded generators and matrix initializers.

Tensors are plain ``numpy.ndarray`` objects in float64. Randomness always
flows through an explicit ``numpy.random.Generator`` (PCG64), never the
global numpy state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

KINDS = ("kaiming_uniform", "trunc_normal", "orthogonal", "sparse")


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator for ``seed``; extra ``keys`` derive an independent child stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def as_tensor(a, dtype=np.float64) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=dtype))


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


@dataclass(frozen=True)
class InitSpec:
    """Initializer choice.

    ``gain`` scales the Kaiming bound (``gain * sqrt(3 / fan_in)``; the
    default ``sqrt(2)`` gives ``sqrt(6 / fan_in)``) and the orthogonal matrix
    (default 1). ``fan_in`` is the column count.
    ``std`` is used by ``trunc_normal`` and by the nonzero entries of ``sparse``.
    """

    kind: str = "kaiming_uniform"
    sparsity: float = 0.9
    gain: float | None = None
    std: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown initializer {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ParameterError(f"sparsity must lie in [0, 1), got {self.sparsity}")


def sparse_zero_count(sparsity: float, rows: int) -> int:
    # floor with a small guard so 0.57 * 100 counts as 57, not 56
    return int(math.floor(sparsity * rows + 1e-9))


def init_matrix(rows: int, cols: int, spec: InitSpec, rng: np.random.Generator) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ParameterError(f"matrix dimensions must be positive, got {rows}x{cols}")
    kind = spec.kind
    if kind == "kaiming_uniform":
        gain = math.sqrt(2.0) if spec.gain is None else spec.gain
        bound = gain * math.sqrt(3.0 / cols)
        return rng.uniform(-bound, bound, size=(rows, cols))
    if kind == "trunc_normal":
        std = 1.0 if spec.std is None else spec.std
        out = rng.standard_normal((rows, cols))
        bad = np.abs(out) > 2.0
        while bad.any():
            out[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(out) > 2.0
        return out * std
    if kind == "orthogonal":
        tall = rows >= cols
        g = rng.standard_normal((rows, cols) if tall else (cols, rows))
        q, r = np.linalg.qr(g)
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        q = q * signs
        gain = 1.0 if spec.gain is None else spec.gain
        return np.ascontiguousarray(gain * (q if tall else q.T))
    # sparse: normal entries with an exact number of zeros per column
    std = 0.01 if spec.std is None else spec.std
    out = rng.normal(0.0, std, size=(rows, cols))
    zeros = sparse_zero_count(spec.sparsity, rows)
    for j in range(cols):
        out[rng.permutation(rows)[:zeros], j] = 0.0
    return out
