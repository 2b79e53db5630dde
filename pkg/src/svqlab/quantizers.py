"""Lookup-based vector quantizers trained with the straight-through estimator.

Codebooks of the VQ family are updated by exponential moving averages of
assigned vectors (no gradient reaches the codes). The encoder side only
sees a commitment loss plus the identity gradient of the straight-through
estimator. FSQ and LFQ have implicit codebooks.

Every forward function accepts either a ``Var`` or a plain array. With an
array input the result holds arrays and floats instead of Vars.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ConfigError, NumericError, ParameterError, ShapeError, UsageError

KINDS = ("vq", "residual_vq", "grouped_residual_vq", "multihead_vq", "stochastic_residual_vq",
         "fsq", "residual_fsq", "lfq", "residual_lfq")
FSQ_EPS = 1e-3
MAX_LFQ_BITS = 30


# ---------------------------------------------------------------- codebook

@dataclass
class Codebook:
    codes: np.ndarray
    decay: float = 0.99
    laplace_eps: float = 1e-5
    dead_code_threshold: int = 200
    reseed_dead: bool = True
    ema_cluster_size: np.ndarray = None
    ema_embed_sum: np.ndarray = None
    usage_counts: np.ndarray = None
    unused_steps: np.ndarray = None

    def __post_init__(self):
        self.codes = np.array(self.codes, dtype=np.float64)
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise UsageError("codebook needs at least one code")
        n = self.codes.shape[0]
        # one pseudo-observation per code keeps unused codes in place
        if self.ema_cluster_size is None:
            self.ema_cluster_size = np.ones(n)
        if self.ema_embed_sum is None:
            self.ema_embed_sum = self.codes.copy()
        if self.usage_counts is None:
            self.usage_counts = np.zeros(n)
        if self.unused_steps is None:
            self.unused_steps = np.zeros(n, dtype=np.int64)
        if not 0.0 <= self.decay < 1.0:
            raise ParameterError(f"decay must lie in [0, 1), got {self.decay}")

    @classmethod
    def random(cls, size, dim, rng, **kw):
        return cls(rng.standard_normal((size, dim)), **kw)

    @property
    def size(self):
        return self.codes.shape[0]

    @property
    def dim(self):
        return self.codes.shape[1]

    def arrays(self, prefix=""):
        return {
            prefix + "codes": self.codes,
            prefix + "ema_cluster_size": self.ema_cluster_size,
            prefix + "ema_embed_sum": self.ema_embed_sum,
            prefix + "usage_counts": self.usage_counts,
            prefix + "unused_steps": self.unused_steps.astype(np.float64),
        }

    def load_arrays(self, arrays, prefix=""):
        self.codes[...] = arrays[prefix + "codes"]
        self.ema_cluster_size[...] = arrays[prefix + "ema_cluster_size"]
        self.ema_embed_sum[...] = arrays[prefix + "ema_embed_sum"]
        self.usage_counts[...] = arrays[prefix + "usage_counts"]
        self.unused_steps[...] = arrays[prefix + "unused_steps"].astype(np.int64)

    def smoothed_cluster_size(self):
        cs = self.ema_cluster_size
        n = cs.sum()
        return (cs + self.laplace_eps) / (n + self.size * self.laplace_eps) * n

    def ema_update(self, x, idx, rng=None):
        counts = np.bincount(idx, minlength=self.size).astype(np.float64)
        sums = np.zeros_like(self.codes)
        np.add.at(sums, idx, x)
        g = self.decay
        self.ema_cluster_size = g * self.ema_cluster_size + (1.0 - g) * counts
        self.ema_embed_sum = g * self.ema_embed_sum + (1.0 - g) * sums
        self.usage_counts += counts
        self.unused_steps = np.where(counts > 0, 0, self.unused_steps + 1)
        if self.reseed_dead and rng is not None:
            dead = np.flatnonzero(self.unused_steps >= self.dead_code_threshold)
            if dead.size:
                pick = rng.integers(0, x.shape[0], size=dead.size)
                self.ema_cluster_size[dead] = 1.0
                self.ema_embed_sum[dead] = x[pick]
                self.unused_steps[dead] = 0
        self.codes = self.ema_embed_sum / self.smoothed_cluster_size()[:, None]


def squared_distances(x, codes):
    d2 = (x * x).sum(axis=1, keepdims=True) - 2.0 * (x @ codes.T) + (codes * codes).sum(axis=1)
    return np.maximum(d2, 0.0)


def assign(x, codes):
    """Nearest code index per row; ``argmin`` keeps the lowest index on ties."""
    return np.argmin(squared_distances(x, codes), axis=1)


def nearest_code(x, codebook):
    codes = codebook.codes if isinstance(codebook, Codebook) else np.asarray(codebook, dtype=np.float64)
    if codes.shape[0] == 0:
        raise UsageError("codebook is empty")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != codes.shape[1]:
        raise ShapeError(f"vector of dim {x.shape[0]} vs codebook dim {codes.shape[1]}")
    diff = codes - x
    dist = (diff * diff).sum(axis=1)
    idx = int(np.argmin(dist))
    return idx, codes[idx].copy()


# ---------------------------------------------------------------- results

@dataclass
class QuantizeResult:
    quantized: object
    indices: np.ndarray
    commit_loss: object = 0.0
    aux_loss: object = 0.0
    levels: list = field(default_factory=list)  # per-level outputs of residual stacks

    def unwrap(self):
        def val(v):
            return v.value if isinstance(v, Var) else v
        return QuantizeResult(val(self.quantized), self.indices,
                              float(val(self.commit_loss)), float(val(self.aux_loss)),
                              [val(level) for level in self.levels])


@dataclass
class QuantizerConfig:
    kind: str = "vq"
    codebook_size: int = 1024
    num_quantizers: int = 8
    groups: int = 2
    heads: int = 8
    shared_codebook: bool = True
    levels: tuple = (8, 5, 5, 3)
    entropy_weight: float = 0.1
    commitment: float = 0.25
    decay: float = 0.99
    laplace_eps: float = 1e-5
    temperature: float = 1.0
    dead_code_threshold: int = 200
    reseed_dead: bool = True

    def validate(self, dim=None):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown quantizer {self.kind!r}; expected one of {KINDS}")
        if self.codebook_size < 1:
            raise ConfigError("codebook_size must be >= 1")
        if self.kind in ("residual_vq", "grouped_residual_vq", "stochastic_residual_vq",
                         "residual_fsq", "residual_lfq") and self.num_quantizers < 1:
            raise ConfigError("num_quantizers must be >= 1")
        if self.kind == "grouped_residual_vq" and dim is not None and (self.groups < 1 or dim % self.groups):
            raise ConfigError(f"dim {dim} is not divisible by groups={self.groups}")
        if self.kind == "multihead_vq" and dim is not None and (self.heads < 1 or dim % self.heads):
            raise ConfigError(f"dim {dim} is not divisible by heads={self.heads}")
        if self.kind in ("fsq", "residual_fsq") and any(int(v) < 2 for v in self.levels):
            raise ConfigError(f"every FSQ level count must be >= 2, got {list(self.levels)}")
        if self.temperature <= 0:
            raise ParameterError("temperature must be positive")


def _as_var(x):
    if isinstance(x, Var):
        return x, False
    x = np.asarray(x, dtype=np.float64)
    return Tape().leaf(x), True


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise NumericError("quantizer input contains non-finite values")


def _commit(x: Var, target: np.ndarray, beta):
    return beta * ad.mean(ad.square(x - target))


def _pack(result, unwrap):
    return result.unwrap() if unwrap else result


# ---------------------------------------------------------------- VQ family

def vq_forward(x, codebook: Codebook, beta=0.25, training=False, rng=None):
    xv, unwrap = _as_var(x)
    _check_finite(xv.value)
    if xv.value.ndim != 2 or xv.value.shape[1] != codebook.dim:
        raise ShapeError(f"expected [B, {codebook.dim}] input, got {xv.value.shape}")
    idx = assign(xv.value, codebook.codes)
    q = codebook.codes[idx]
    res = QuantizeResult(ad.straight_through(xv, q), idx, _commit(xv, q, beta))
    if training:
        codebook.ema_update(xv.value, idx, rng)
    return _pack(res, unwrap)


def _sample_index(d2, temperature, rng):
    logits = -(d2 - d2.min(axis=1, keepdims=True)) / temperature
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    cdf = np.cumsum(p, axis=1)
    u = rng.random((d2.shape[0], 1)) * cdf[:, -1:]
    return np.minimum((cdf < u).sum(axis=1), d2.shape[1] - 1)


def _residual_core(xv: Var, config, codebooks, training, rng, stochastic):
    Q = config.num_quantizers
    if config.shared_codebook:
        books = [codebooks[0]] * Q
    else:
        if len(codebooks) != Q:
            raise ConfigError(f"expected {Q} codebooks, got {len(codebooks)}")
        books = list(codebooks)
    x = xv.value
    total = np.zeros_like(x)
    commit = None
    indices = []
    inputs = []
    for level in range(Q):
        book = books[level]
        residual = x - total
        if stochastic and training:
            idx = _sample_index(squared_distances(residual, book.codes), config.temperature, rng)
        else:
            idx = assign(residual, book.codes)
        code = book.codes[idx]
        # commitment of the running residual, with earlier picks held constant
        term = _commit(xv - total, code, config.commitment)
        commit = term if commit is None else commit + term
        total = total + code
        indices.append(idx)
        inputs.append(residual)
    if training:
        if config.shared_codebook:
            books[0].ema_update(np.concatenate(inputs), np.concatenate(indices), rng)
        else:
            for book, r, idx in zip(books, inputs, indices):
                book.ema_update(r, idx, rng)
    return total, np.stack(indices, axis=1), commit


def residual_vq_forward(x, config: QuantizerConfig, codebooks, training=False, rng=None):
    xv, unwrap = _as_var(x)
    _check_finite(xv.value)
    total, idx, commit = _residual_core(xv, config, codebooks, training, rng, stochastic=False)
    return _pack(QuantizeResult(ad.straight_through(xv, total), idx, commit), unwrap)


def stochastic_residual_vq_forward(x, config: QuantizerConfig, codebooks, rng, temperature=None,
                                   training=True):
    if temperature is not None:
        config = QuantizerConfig(**{**config.__dict__, "temperature": temperature})
    if config.temperature <= 0:
        raise ParameterError("temperature must be positive")
    if training and rng is None:
        raise UsageError("stochastic sampling needs an rng in training mode")
    xv, unwrap = _as_var(x)
    _check_finite(xv.value)
    total, idx, commit = _residual_core(xv, config, codebooks, training, rng, stochastic=True)
    return _pack(QuantizeResult(ad.straight_through(xv, total), idx, commit), unwrap)


def grouped_residual_vq_forward(x, config: QuantizerConfig, codebooks, training=False, rng=None):
    """``codebooks[g]`` holds the codebook list of group ``g``."""
    xv, unwrap = _as_var(x)
    _check_finite(xv.value)
    g = config.groups
    d = xv.value.shape[1]
    if g < 1 or d % g:
        raise ConfigError(f"dim {d} is not divisible by groups={g}")
    if len(codebooks) != g:
        raise ConfigError(f"expected {g} codebook groups, got {len(codebooks)}")
    width = d // g
    q = np.empty_like(xv.value)
    indices = []
    commit = None
    for gi in range(g):
        cols = slice(gi * width, (gi + 1) * width)
        sub = xv if g == 1 else _select_columns(xv, cols)
        total, idx, c = _residual_core(sub, config, codebooks[gi], training, rng, stochastic=False)
        q[:, cols] = total
        indices.append(idx)
        commit = c if commit is None else commit + c
    return _pack(QuantizeResult(ad.straight_through(xv, q), np.stack(indices, axis=1), commit), unwrap)


def _select_columns(xv: Var, cols):
    # selection matrix keeps the column block on the tape; values copy exactly
    return xv @ np.eye(xv.value.shape[1])[:, cols]


def multihead_vq_forward(x, config: QuantizerConfig, codebook: Codebook, training=False, rng=None):
    xv, unwrap = _as_var(x)
    _check_finite(xv.value)
    b, d = xv.value.shape
    h = config.heads
    if h < 1 or d % h:
        raise ConfigError(f"dim {d} is not divisible by heads={h}")
    if codebook.dim != d // h:
        raise ShapeError(f"codebook dim {codebook.dim} != head dim {d // h}")
    heads = ad.reshape(xv, (b * h, d // h)) if h > 1 else xv
    idx = assign(heads.value, codebook.codes)
    q = codebook.codes[idx]
    commit = _commit(heads, q, config.commitment)
    if training:
        codebook.ema_update(heads.value, idx, rng)
    res = QuantizeResult(ad.straight_through(xv, q.reshape(b, d)), idx.reshape(b, h), commit)
    return _pack(res, unwrap)


# ---------------------------------------------------------------- FSQ / LFQ

def fsq_codebook_size(levels):
    return int(np.prod([int(v) for v in levels]))


def fsq_bound_params(levels):
    """Per-dimension ``(half, offset, shift)`` so even level counts sit on integers."""
    L = np.asarray(levels, dtype=np.float64)
    half = (L - 1.0) * (1.0 + FSQ_EPS) / 2.0
    offset = np.where(np.asarray(levels) % 2 == 0, 0.5, 0.0)
    shift = np.arctanh(offset / half)
    return half, offset, shift


def fsq_indices(q, levels):
    """Mixed-radix code index; dimension 0 is the least significant digit."""
    levels = np.asarray(levels, dtype=np.int64)
    digits = np.rint(q).astype(np.int64) + levels // 2
    basis = np.concatenate([[1], np.cumprod(levels[:-1])])
    return digits @ basis


def fsq_forward(x, levels):
    levels = [int(v) for v in levels]
    if any(v < 2 for v in levels):
        raise ConfigError(f"every FSQ level count must be >= 2, got {levels}")
    xv, unwrap = _as_var(x)
    _check_finite(xv.value)
    if xv.value.shape[-1] != len(levels):
        raise ShapeError(f"input has {xv.value.shape[-1]} channels but {len(levels)} levels")
    half, offset, shift = fsq_bound_params(levels)
    bounded = ad.tanh(xv + shift) * half - offset
    q = np.rint(bounded.value)
    res = QuantizeResult(ad.straight_through(bounded, q), fsq_indices(q, levels))
    return _pack(res, unwrap)


def _binary_entropy(p):
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return -(p * np.log(p) + (1.0 - p) * np.log1p(-p))


def _bit_probability(x, temperature):
    # sigmoid(4 x / T) written with tanh so large |x| cannot overflow exp
    return 0.5 * (1.0 + np.tanh(2.0 * x / temperature))


def lfq_entropy_terms(x, temperature=1.0):
    """``(per_sample_entropy, codebook_entropy)`` of the soft bit assignments.

    The soft distribution over the 2^k sign codes is ``softmax(2 x.c / T)``,
    which factorises over bits with ``p(bit=1) = sigmoid(4 x / T)``. The
    per-sample term is exact; the codebook term uses the per-bit marginals
    of the batch-mean distribution.
    """
    p = _bit_probability(x, temperature)
    per_sample = _binary_entropy(p).sum(axis=1).mean()
    codebook = _binary_entropy(p.mean(axis=0)).sum()
    return float(per_sample), float(codebook)


def lfq_entropy_loss(xv: Var, weight, temperature=1.0) -> Var:
    x = xv.value
    b = x.shape[0]
    p = _bit_probability(x, temperature)
    per_sample, codebook = lfq_entropy_terms(x, temperature)
    value = np.asarray(weight * (per_sample - codebook))

    def back(g):
        pc = np.clip(p, 1e-12, 1.0 - 1e-12)
        pm = np.clip(p.mean(axis=0), 1e-12, 1.0 - 1e-12)
        dp = 4.0 / temperature * p * (1.0 - p)
        d_sample = np.log((1.0 - pc) / pc) / b
        d_book = np.log((1.0 - pm) / pm) / b
        return (g * weight * (d_sample - d_book) * dp,)

    return xv.tape.record(value, (xv,), back)


def lfq_forward(x, entropy_weight=0.1, temperature=1.0):
    xv, unwrap = _as_var(x)
    _check_finite(xv.value)
    k = xv.value.shape[-1]
    if k > MAX_LFQ_BITS:
        raise ConfigError(f"LFQ supports at most {MAX_LFQ_BITS} channels, got {k}")
    q = np.where(xv.value >= 0, 1.0, -1.0)
    bits = (q > 0).astype(np.int64)
    idx = bits @ (np.int64(1) << np.arange(k, dtype=np.int64))
    aux = lfq_entropy_loss(xv, entropy_weight, temperature) if entropy_weight else 0.0
    res = QuantizeResult(ad.straight_through(xv, q), idx, 0.0, aux)
    return _pack(res, unwrap)


# ---------------------------------------------------------------- residual stacks

class ResidualStack:
    """Quantize, subtract, repeat; the output is the sum of all levels.

    ``scales[q]`` rescales level ``q``: the base sees ``residual / scale`` and
    its output is multiplied back by ``scale``. Residuals stay on the tape,
    so the gradient is that of the stack with rounding replaced by identity.
    """

    def __init__(self, base, num_quantizers, scales=None):
        if num_quantizers < 1:
            raise ConfigError("num_quantizers must be >= 1")
        self.base = base
        self.num_quantizers = num_quantizers
        self.scales = [None] * num_quantizers if scales is None else list(scales)

    def __call__(self, x, training=False, rng=None):
        xv, unwrap = _as_var(x)
        _check_finite(xv.value)
        total = None
        levels, indices = [], []
        commit, aux = 0.0, 0.0
        for q in range(self.num_quantizers):
            scale = self.scales[q]
            residual = xv if total is None else xv - total
            if scale is not None:
                residual = residual * (1.0 / np.asarray(scale, dtype=np.float64))
            r = self.base(residual, training=training, rng=rng)
            out = r.quantized if scale is None else r.quantized * np.asarray(scale, dtype=np.float64)
            levels.append(out)
            indices.append(r.indices)
            commit = commit + r.commit_loss
            aux = aux + r.aux_loss
            total = out if total is None else total + out
        idx = indices[0] if self.num_quantizers == 1 else np.stack(indices, axis=-1)
        return _pack(QuantizeResult(total, idx, commit, aux, levels), unwrap)


def residual_stack(base, num_quantizers, scales=None):
    """Wrap a quantizer object (``FSQ``, ``LFQ``, ``VQ``) in a residual stack."""
    return ResidualStack(base, num_quantizers, scales)


# ---------------------------------------------------------------- objects

class VQ:
    def __init__(self, codebook: Codebook, commitment=0.25):
        self.codebook = codebook
        self.commitment = commitment

    def __call__(self, x, training=False, rng=None):
        return vq_forward(x, self.codebook, self.commitment, training, rng)

    def codebooks(self):
        return [self.codebook]


class ResidualVQ:
    def __init__(self, config: QuantizerConfig, books):
        self.config = config
        self.books = list(books)

    def __call__(self, x, training=False, rng=None):
        if self.config.kind == "stochastic_residual_vq":
            return stochastic_residual_vq_forward(x, self.config, self.books, rng, training=training)
        return residual_vq_forward(x, self.config, self.books, training, rng)

    def codebooks(self):
        return self.books


class GroupedResidualVQ:
    def __init__(self, config: QuantizerConfig, groups):
        self.config = config
        self.groups = [list(g) for g in groups]

    def __call__(self, x, training=False, rng=None):
        return grouped_residual_vq_forward(x, self.config, self.groups, training, rng)

    def codebooks(self):
        return [b for g in self.groups for b in g]


class MultiHeadVQ:
    def __init__(self, config: QuantizerConfig, codebook: Codebook):
        self.config = config
        self.codebook = codebook

    def __call__(self, x, training=False, rng=None):
        return multihead_vq_forward(x, self.config, self.codebook, training, rng)

    def codebooks(self):
        return [self.codebook]


class FSQ:
    def __init__(self, levels):
        self.levels = [int(v) for v in levels]

    def __call__(self, x, training=False, rng=None):
        return fsq_forward(x, self.levels)

    def codebooks(self):
        return []


class LFQ:
    def __init__(self, entropy_weight=0.1, temperature=1.0):
        self.entropy_weight = entropy_weight
        self.temperature = temperature

    def __call__(self, x, training=False, rng=None):
        return lfq_forward(x, self.entropy_weight if training else 0.0, self.temperature)

    def codebooks(self):
        return []


def lfq_bits(codebook_size):
    bits = int(round(np.log2(codebook_size)))
    if 2 ** bits != codebook_size:
        raise ConfigError(f"LFQ codebook size must be a power of two, got {codebook_size}")
    return bits


def code_dim(config: QuantizerConfig, dim):
    """Width of the vectors the quantizer itself sees for token width ``dim``."""
    if config.kind in ("fsq", "residual_fsq"):
        return len(config.levels)
    if config.kind in ("lfq", "residual_lfq"):
        return lfq_bits(config.codebook_size)
    return dim


def implied_codebook_size(config: QuantizerConfig):
    if config.kind in ("fsq", "residual_fsq"):
        return fsq_codebook_size(config.levels)
    return config.codebook_size


def build_quantizer(config: QuantizerConfig, dim, rng):
    """Quantizer object for vectors of width ``code_dim(config, dim)``."""
    config.validate(dim)
    kw = dict(decay=config.decay, laplace_eps=config.laplace_eps,
              dead_code_threshold=config.dead_code_threshold, reseed_dead=config.reseed_dead)
    n = config.codebook_size
    kind = config.kind

    def book(width):
        return Codebook.random(n, width, rng, **kw)

    if kind == "vq":
        return VQ(book(dim), config.commitment)
    if kind in ("residual_vq", "stochastic_residual_vq"):
        count = 1 if config.shared_codebook else config.num_quantizers
        return ResidualVQ(config, [book(dim) for _ in range(count)])
    if kind == "grouped_residual_vq":
        width = dim // config.groups
        count = 1 if config.shared_codebook else config.num_quantizers
        return GroupedResidualVQ(config, [[book(width) for _ in range(count)] for _ in range(config.groups)])
    if kind == "multihead_vq":
        return MultiHeadVQ(config, book(dim // config.heads))
    if kind == "fsq":
        return FSQ(config.levels)
    if kind == "residual_fsq":
        base = np.asarray(config.levels, dtype=np.float64) - 1.0
        scales = [base ** -q for q in range(config.num_quantizers)]
        return ResidualStack(FSQ(config.levels), config.num_quantizers, scales)
    if kind == "lfq":
        return LFQ(config.entropy_weight)
    scales = [2.0 ** -q for q in range(config.num_quantizers)]
    return ResidualStack(LFQ(config.entropy_weight), config.num_quantizers, scales)
