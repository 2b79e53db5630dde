"""Differentiable sparse vector quantizer.

A projection maps each token to regression weights over a large codebook
and the quantized token is the weighted sum of codes. The default
projection is linear -> ReLU -> linear, which generalises one
proximal-gradient step of the nonnegative/signed lasso from ``w = 0``.
Nothing is rounded or looked up, so gradients are exact everywhere the
ReLU is differentiable.
"""
from __future__ import annotations

import csv
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ConfigError, DegenerateInputError, ParameterError, ShapeError
from .metrics import perplexity_from_counts
from .tensor import InitSpec, init_matrix

VARIANTS = ("two_layer", "one_layer", "bucket_shape", "post_relu")


@dataclass
class SvqConfig:
    codebook_size: int = 10000
    token_dim: int = 32
    hidden_dim: int = 128
    variant: str = "two_layer"
    codebook_init: InitSpec = field(default_factory=InitSpec)
    codebook_learnable: bool = True
    mlp_learnable: bool = True
    l1_weight: float = 0.0  # optional explicit penalty on the weights; off by default

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown SVQ variant {self.variant!r}; expected one of {VARIANTS}")
        if self.codebook_size < 1:
            raise ConfigError("codebook_size must be >= 1")
        if self.token_dim < 1:
            raise ConfigError("token_dim must be >= 1")
        if self.variant == "bucket_shape":
            self.hidden_dim = self.codebook_size
        if self.variant in ("two_layer", "post_relu") and self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")


class SvqModule:
    def __init__(self, config: SvqConfig, rng):
        self.config = config
        c, n, h = config.token_dim, config.codebook_size, config.hidden_dim
        lin = InitSpec("kaiming_uniform", gain=1.0)
        if config.variant == "one_layer":
            self.mlp = {"proj_w": init_matrix(n, c, lin, rng).T.copy(), "proj_b": np.zeros(n)}
        else:
            self.mlp = {
                "proj1_w": init_matrix(h, c, lin, rng).T.copy(),
                "proj1_b": np.zeros(h),
                "proj2_w": init_matrix(n, h, lin, rng).T.copy(),
                "proj2_b": np.zeros(n),
            }
        self.codebook = init_matrix(n, c, config.codebook_init, rng)
        # Q_j sums N products w_i M_ij, so its variance grows with ||M||_F^2 / C;
        # rescale the last projection so Q starts at the scale of the tokens
        norm = float(np.linalg.norm(self.codebook))
        if norm > 0:
            last = "proj_w" if config.variant == "one_layer" else "proj2_w"
            relu_gain = 1.0 if config.variant == "one_layer" else 2.0
            self.mlp[last] *= math.sqrt(relu_gain * c) / norm

    @property
    def arrays(self):
        return {**self.mlp, "codebook": self.codebook}

    def parameters(self):
        """Trainable arrays only; frozen ones never reach the optimizer."""
        out = {}
        if self.config.mlp_learnable:
            out.update(self.mlp)
        if self.config.codebook_learnable:
            out["codebook"] = self.codebook
        return out

    def load_arrays(self, arrays):
        for name, arr in self.arrays.items():
            arr[...] = arrays[name]

    def __call__(self, tokens, training=False, rng=None):
        return svq_forward(tokens, self)


def svq_forward(tokens, module: SvqModule):
    """Return ``(quantized, weights)``; Vars in, Vars out; arrays in, arrays out."""
    unwrap = not isinstance(tokens, Var)
    x = Tape().leaf(np.asarray(tokens, dtype=np.float64)) if unwrap else tokens
    cfg = module.config
    if x.value.ndim != 2 or x.value.shape[1] != cfg.token_dim:
        raise ShapeError(f"expected tokens of shape [B, {cfg.token_dim}], got {x.value.shape}")
    tape = x.tape
    train_mlp = cfg.mlp_learnable
    p = {k: tape.param(v, train_mlp) for k, v in module.mlp.items()}
    codebook = tape.param(module.codebook, cfg.codebook_learnable)
    if cfg.variant == "one_layer":
        w = x @ p["proj_w"] + p["proj_b"]
    else:
        hidden = ad.relu(x @ p["proj1_w"] + p["proj1_b"])
        w = hidden @ p["proj2_w"] + p["proj2_b"]
        if cfg.variant == "post_relu":
            w = ad.relu(w)
    q = w @ codebook
    if unwrap:
        return q.value, w.value
    return q, w


def svq_from_ista(Z, lam, eta):
    """Module whose forward equals ``Z @ soft_threshold(eta Z^T x, lam eta)`` per token.

    First layer ``eta [Z, -Z]`` with bias ``-lam eta`` gives the positive and
    negative shrinkage branches; the second layer ``[I; -I]`` recombines them;
    the codebook is ``Z^T``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    d, m = Z.shape
    cfg = SvqConfig(codebook_size=m, token_dim=d, hidden_dim=2 * m)
    mod = SvqModule.__new__(SvqModule)
    mod.config = cfg
    mod.mlp = {
        "proj1_w": eta * np.concatenate([Z, -Z], axis=1),
        "proj1_b": np.full(2 * m, -lam * eta),
        "proj2_w": np.concatenate([np.eye(m), -np.eye(m)], axis=0),
        "proj2_b": np.zeros(m),
    }
    mod.codebook = Z.T.copy()
    return mod


def svq_identity(dim):
    """Module whose forward returns its input (``relu(x) - relu(-x) = x``)."""
    cfg = SvqConfig(codebook_size=dim, token_dim=dim, hidden_dim=2 * dim)
    mod = SvqModule.__new__(SvqModule)
    mod.config = cfg
    eye = np.eye(dim)
    mod.mlp = {
        "proj1_w": np.concatenate([eye, -eye], axis=1),
        "proj1_b": np.zeros(2 * dim),
        "proj2_w": np.concatenate([eye, -eye], axis=0),
        "proj2_b": np.zeros(dim),
    }
    mod.codebook = eye.copy()
    return mod


def svq_regularized_loss(prediction, target, loss_kind="mae"):
    if isinstance(prediction, Var):
        if np.shape(target) != prediction.shape:
            raise ShapeError(f"prediction {prediction.shape} vs target {np.shape(target)}")
        diff = prediction - target
        if loss_kind == "mae":
            return ad.mean(ad.abs(diff))
        if loss_kind == "mse":
            return ad.mean(ad.square(diff))
        raise ParameterError(f"unknown loss kind {loss_kind!r}")
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {prediction.shape} vs target {target.shape}")
    if loss_kind == "mae":
        return float(np.mean(np.abs(prediction - target)))
    if loss_kind == "mse":
        return float(np.mean((prediction - target) ** 2))
    raise ParameterError(f"unknown loss kind {loss_kind!r}")


def _standardize(w):
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    std = w.std()
    if w.size < 2 or std == 0.0 or not math.isfinite(std):
        raise DegenerateInputError("weights need at least two distinct values")
    return (w - w.mean()) / std


def weight_kurtosis(weights) -> float:
    """Fourth standardized moment over all entries (normal = 3, uniform = 1.8)."""
    z = _standardize(weights)
    return float(np.mean(z ** 4))


def svq_perplexity(weights, theta) -> float:
    """Perplexity of code usage after thresholding standardized weights at ``theta``.

    Weights are standardized globally; an entry counts as an activation of
    its code when its magnitude exceeds ``theta``.
    """
    if theta <= 0:
        raise ParameterError("theta must be positive")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] < 1:
        raise ShapeError(f"weights must be [B, N] with B >= 1, got {weights.shape}")
    z = _standardize(weights).reshape(weights.shape)
    counts = (np.abs(z) > theta).sum(axis=0)
    if counts.sum() == 0:
        warnings.warn(f"no weight exceeds {theta} standard deviations; perplexity set to 1",
                      RuntimeWarning, stacklevel=2)
        return 1.0
    return perplexity_from_counts(counts)


def export_codebook(codebook, path):
    """Write the ``N x C`` codebook as CSV with 9 significant digits."""
    codes = codebook.codebook if isinstance(codebook, SvqModule) else np.asarray(codebook)
    if codes.ndim != 2 or codes.shape[0] < 1:
        raise ConfigError("cannot export an empty codebook")
    values = codes.astype(np.float32)
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".codebook-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"c{j}" for j in range(values.shape[1])])
            for row in values:
                writer.writerow([f"{float(v):.9g}" for v in row])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def import_codebook(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float32)
