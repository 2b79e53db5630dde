"""Toy encoder / translator / decoder forecaster with a quantizer slot.

Frames are encoded one at a time by strided convolutions, the latent
tokens of all ``T`` frames are mixed by MLP-mixer blocks, and a decoder
upsamples back to pixels. A quantizer (SVQ, exact sparse regression or any
lookup quantizer) can sit before or after the translator.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Var, adam_step, cosine_lr
from .data import Dataset
from .errors import ConfigError, DegenerateInputError, DivergenceError, ShapeError, UsageError
from .metrics import index_perplexity, mae, mse, psnr, ssim
from .quantizers import QuantizerConfig, build_quantizer, code_dim, implied_codebook_size
from .solvers import default_step, ista_solve_batch
from .svq import SvqConfig, SvqModule, svq_forward, svq_perplexity, weight_kurtosis
from .tensor import InitSpec, init_matrix, make_rng

PLACEMENTS = ("pre", "post")


@dataclass
class ModelConfig:
    frames: int = 4
    channels: int = 1
    height: int = 16
    width: int = 16
    hidden_channels: int = 16
    latent_channels: int = 32
    downsample: int = 2  # number of stride-2 encoder layers
    translator_blocks: int = 2
    token_hidden: int = 128
    channel_hidden: int = 64
    placement: str = "pre"

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        f = 2 ** self.downsample
        if self.height % f or self.width % f:
            raise ConfigError(f"grid {self.height}x{self.width} is not divisible by {f}")

    @property
    def latent_hw(self):
        f = 2 ** self.downsample
        return self.height // f, self.width // f

    @property
    def tokens_per_sample(self):
        h, w = self.latent_hw
        return self.frames * h * w


@dataclass
class SvqRawConfig:
    """Exact per-token sparse regression with a frozen random codebook."""

    codebook_size: int = 1024
    lam: float = 0.1
    iters: int = 20
    nonneg: bool = False


# ---------------------------------------------------------------- quantizer slot

class QuantizerSlot:
    """Adapts any quantizer to ``[n, C']`` token batches on a tape."""

    def __init__(self, spec, token_dim, rng):
        self.spec = spec
        self.token_dim = token_dim
        self.proj = {}
        self.svq = None
        self.quantizer = None
        self.raw_codebook = None
        if isinstance(spec, SvqModule):
            if spec.config.token_dim != token_dim:
                raise ShapeError(f"SVQ module expects tokens of dim {spec.config.token_dim}, not {token_dim}")
            self.kind = "svq"
            self.svq = spec
            self.spec = spec.config
        elif isinstance(spec, SvqConfig):
            if spec.token_dim != token_dim:
                spec.token_dim = token_dim
            self.kind = "svq"
            self.svq = SvqModule(spec, rng)
        elif isinstance(spec, SvqRawConfig):
            self.kind = "svq_raw"
            z = init_matrix(spec.codebook_size, token_dim, InitSpec(), rng)
            self.raw_codebook = np.ascontiguousarray(z.T)
            self.raw_eta = default_step(self.raw_codebook)
        elif isinstance(spec, QuantizerConfig):
            self.kind = spec.kind
            k = code_dim(spec, token_dim)
            self.quantizer = build_quantizer(spec, k, rng)
            if k != token_dim:
                lin = InitSpec("kaiming_uniform", gain=1.0)
                self.proj = {
                    "q_in_w": init_matrix(k, token_dim, lin, rng).T.copy(),
                    "q_in_b": np.zeros(k),
                    "q_out_w": init_matrix(token_dim, k, lin, rng).T.copy(),
                    "q_out_b": np.zeros(token_dim),
                }
        else:
            raise ConfigError(f"unsupported quantizer spec {type(spec).__name__}")

    @property
    def codebook_size(self):
        if self.svq is not None:
            return self.svq.config.codebook_size
        if self.raw_codebook is not None:
            return self.raw_codebook.shape[1]
        return implied_codebook_size(self.spec)

    def parameters(self):
        out = {f"slot.{k}": v for k, v in self.proj.items()}
        if self.svq is not None:
            out.update({f"slot.svq.{k}": v for k, v in self.svq.parameters().items()})
        return out

    def state_arrays(self):
        out = {f"slot.{k}": v for k, v in self.proj.items()}
        if self.svq is not None:
            out.update({f"slot.svq.{k}": v for k, v in self.svq.arrays.items()})
        if self.raw_codebook is not None:
            out["slot.raw_codebook"] = self.raw_codebook
        if self.quantizer is not None:
            for i, book in enumerate(self.quantizer.codebooks() if hasattr(self.quantizer, "codebooks") else []):
                out.update(book.arrays(f"slot.book{i}."))
        return out

    def load_state(self, arrays):
        for k, v in self.proj.items():
            v[...] = arrays[f"slot.{k}"]
        if self.svq is not None:
            self.svq.load_arrays({k: arrays[f"slot.svq.{k}"] for k in self.svq.arrays})
        if self.raw_codebook is not None:
            self.raw_codebook[...] = arrays["slot.raw_codebook"]
        if self.quantizer is not None and hasattr(self.quantizer, "codebooks"):
            for i, book in enumerate(self.quantizer.codebooks()):
                book.load_arrays(arrays, f"slot.book{i}.")

    def __call__(self, tokens: Var, training=False, rng=None):
        """Return ``(quantized tokens, extra loss or None, diagnostics dict)``."""
        if self.kind == "svq":
            q, w = svq_forward(tokens, self.svq)
            extra = None
            if self.svq.config.l1_weight:
                extra = self.svq.config.l1_weight * ad.mean(ad.abs(w))
            return q, extra, {"weights": w.value}
        if self.kind == "svq_raw":
            z = self.raw_codebook
            w, _ = ista_solve_batch(z, tokens.value, self.spec.lam, self.raw_eta,
                                    self.spec.iters, tol=1e-12, nonneg=self.spec.nonneg)
            return ad.straight_through(tokens, w @ z.T), None, {"weights": w}
        tape = tokens.tape
        x = tokens
        if self.proj:
            p = {k: tape.param(v) for k, v in self.proj.items()}
            x = x @ p["q_in_w"] + p["q_in_b"]
        res = self.quantizer(x, training=training, rng=rng)
        q = res.quantized
        if self.proj:
            q = q @ p["q_out_w"] + p["q_out_b"]
        extra = None
        for term in (res.commit_loss, res.aux_loss):
            if isinstance(term, Var):
                extra = term if extra is None else extra + term
        return q, extra, {"indices": res.indices}


# ---------------------------------------------------------------- model

def _conv_init(cout, cin, k, rng):
    w = init_matrix(cout, cin * k * k, InitSpec("kaiming_uniform"), rng)
    return w.reshape(cout, cin, k, k)


def _linear_init(fan_in, fan_out, rng, gain=None):
    return init_matrix(fan_out, fan_in, InitSpec("kaiming_uniform", gain=gain), rng).T.copy()


class ForecastModel:
    def __init__(self, config: ModelConfig, quantizer=None, seed=0, quantizer_seed=None):
        self.config = config
        rng = make_rng(seed, 0)
        c, hc, lc = config.channels, config.hidden_channels, config.latent_channels
        p = {}
        p["enc0_w"], p["enc0_b"] = _conv_init(hc, c, 3, rng), np.zeros(hc)
        cin = hc
        for i in range(config.downsample):
            p[f"enc{i + 1}_w"], p[f"enc{i + 1}_b"] = _conv_init(lc, cin, 3, rng), np.zeros(lc)
            cin = lc
        n_tok = config.tokens_per_sample
        for b in range(config.translator_blocks):
            p[f"tr{b}_tok1_w"] = _linear_init(n_tok, config.token_hidden, rng)
            p[f"tr{b}_tok1_b"] = np.zeros(config.token_hidden)
            p[f"tr{b}_tok2_w"] = _linear_init(config.token_hidden, n_tok, rng, gain=0.5)
            p[f"tr{b}_tok2_b"] = np.zeros(n_tok)
            p[f"tr{b}_ch1_w"] = _linear_init(lc, config.channel_hidden, rng)
            p[f"tr{b}_ch1_b"] = np.zeros(config.channel_hidden)
            p[f"tr{b}_ch2_w"] = _linear_init(config.channel_hidden, lc, rng, gain=0.5)
            p[f"tr{b}_ch2_b"] = np.zeros(lc)
        cin = lc
        for i in range(config.downsample):
            p[f"dec{i}_w"], p[f"dec{i}_b"] = _conv_init(hc, cin, 3, rng), np.zeros(hc)
            cin = hc
        p["out_w"], p["out_b"] = _conv_init(c, hc, 3, rng), np.zeros(c)
        self.params = p
        self.slot = None
        if quantizer is not None:
            qseed = seed if quantizer_seed is None else quantizer_seed
            self.slot = QuantizerSlot(quantizer, lc, make_rng(qseed, 3))

    # parameters -------------------------------------------------------
    def parameters(self):
        out = dict(self.params)
        if self.slot is not None:
            out.update(self.slot.parameters())
        return out

    def state_arrays(self):
        out = dict(self.params)
        if self.slot is not None:
            out.update(self.slot.state_arrays())
        return out

    def snapshot(self):
        return {k: np.array(v, copy=True) for k, v in self.state_arrays().items()}

    def restore(self, snap):
        for k, v in self.params.items():
            v[...] = snap[k]
        if self.slot is not None:
            self.slot.load_state(snap)

    def identity_translator(self):
        """Zero the residual branches so the translator maps tokens to themselves."""
        for b in range(self.config.translator_blocks):
            for name in (f"tr{b}_tok2_w", f"tr{b}_tok2_b", f"tr{b}_ch2_w", f"tr{b}_ch2_b"):
                self.params[name][...] = 0.0

    # forward ----------------------------------------------------------
    def encode(self, x: Var) -> Var:
        cfg = self.config
        tape = x.tape
        p = {k: tape.param(v) for k, v in self.params.items()}
        b = x.shape[0]
        h = ad.reshape(x, (b * cfg.frames, cfg.channels, cfg.height, cfg.width))
        h = ad.relu(ad.conv2d(h, p["enc0_w"], p["enc0_b"], 1, 1))
        for i in range(cfg.downsample):
            h = ad.conv2d(h, p[f"enc{i + 1}_w"], p[f"enc{i + 1}_b"], 2, 1)
            if i < cfg.downsample - 1:
                h = ad.relu(h)
        hh, ww = cfg.latent_hw
        h = ad.reshape(h, (b, cfg.frames, cfg.latent_channels, hh, ww))
        h = ad.transpose(h, (0, 1, 3, 4, 2))
        return ad.reshape(h, (b, cfg.tokens_per_sample, cfg.latent_channels))

    def translate(self, z: Var) -> Var:
        p = {k: z.tape.param(v) for k, v in self.params.items()}
        for b in range(self.config.translator_blocks):
            t = ad.transpose(z, (0, 2, 1))
            t = ad.relu(t @ p[f"tr{b}_tok1_w"] + p[f"tr{b}_tok1_b"]) @ p[f"tr{b}_tok2_w"] + p[f"tr{b}_tok2_b"]
            z = z + ad.transpose(t, (0, 2, 1))
            c = ad.relu(z @ p[f"tr{b}_ch1_w"] + p[f"tr{b}_ch1_b"]) @ p[f"tr{b}_ch2_w"] + p[f"tr{b}_ch2_b"]
            z = z + c
        return z

    def decode(self, z: Var) -> Var:
        cfg = self.config
        p = {k: z.tape.param(v) for k, v in self.params.items()}
        b = z.shape[0]
        hh, ww = cfg.latent_hw
        h = ad.reshape(z, (b, cfg.frames, hh, ww, cfg.latent_channels))
        h = ad.transpose(h, (0, 1, 4, 2, 3))
        h = ad.reshape(h, (b * cfg.frames, cfg.latent_channels, hh, ww))
        for i in range(cfg.downsample):
            h = ad.upsample_nearest_2x(h)
            h = ad.relu(ad.conv2d(h, p[f"dec{i}_w"], p[f"dec{i}_b"], 1, 1))
        h = ad.conv2d(h, p["out_w"], p["out_b"], 1, 1)
        return ad.reshape(h, (b, cfg.frames, cfg.channels, cfg.height, cfg.width))

    def _quantize(self, z: Var, training, rng, info):
        b, n, c = z.shape
        q, extra, diag = self.slot(ad.reshape(z, (b * n, c)), training, rng)
        info["quant_loss"] = extra
        info.update(diag)
        return ad.reshape(q, (b, n, c))

    def forward(self, x, training=False, rng=None):
        """Return ``(prediction Var, info)``; ``info['quant_loss']`` is a Var or None."""
        if not isinstance(x, Var):
            x = Tape().leaf(x)
        cfg = self.config
        expect = (cfg.frames, cfg.channels, cfg.height, cfg.width)
        if x.ndim != 5 or x.shape[1:] != expect:
            raise ShapeError(f"expected input [B, {', '.join(map(str, expect))}], got {x.shape}")
        info = {"quant_loss": None}
        z = self.encode(x)
        if self.slot is not None and cfg.placement == "pre":
            z = self._quantize(z, training, rng, info)
        z = self.translate(z)
        if self.slot is not None and cfg.placement == "post":
            z = self._quantize(z, training, rng, info)
        return self.decode(z), info

    def predict(self, inputs, batch_size=64):
        out = []
        for s in range(0, inputs.shape[0], batch_size):
            tape = Tape()
            pred, _ = self.forward(tape.leaf(inputs[s:s + batch_size]), training=False)
            out.append(pred.value)
            tape.release()
        return np.concatenate(out) if out else np.zeros((0,) + inputs.shape[1:])


def model_forward(model: ForecastModel, X):
    """Eval-mode prediction of the next ``T`` frames as an array."""
    return model.predict(np.asarray(X, dtype=np.float64))


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    loss_kind: str = "mae"
    epochs: int = 30
    lr: float = 2e-3
    min_lr: float = 0.0
    batch_size: int = 16
    patience: int = 10
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.loss_kind not in ("mae", "mse"):
            raise ConfigError(f"loss_kind must be 'mae' or 'mse', got {self.loss_kind!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    perplexity_theta2: float = math.nan
    perplexity_theta3: float = math.nan
    kurtosis: float = math.nan


@dataclass
class TrainReport:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    epochs_run: int = 0
    diverged: bool = False
    message: str = ""
    train_seconds: float = 0.0


def _loss(pred: Var, target, kind):
    diff = pred - target
    return ad.mean(ad.abs(diff)) if kind == "mae" else ad.mean(ad.square(diff))


def split_validation(dataset: Dataset, fraction):
    n = len(dataset)
    n_val = max(1, int(round(n * fraction))) if n > 1 else 0
    return dataset.subset(slice(0, n - n_val)), dataset.subset(slice(n - n_val, n))


def quantizer_diagnostics(model: ForecastModel, inputs):
    """Perplexities (theta 2 and 3) and kurtosis of the quantizer on ``inputs``."""
    if model.slot is None or len(inputs) == 0:
        return math.nan, math.nan, math.nan
    tape = Tape()
    _, info = model.forward(tape.leaf(inputs), training=False)
    tape.release()
    if "weights" in info:
        w = info["weights"]
        try:
            k = weight_kurtosis(w)
        except DegenerateInputError:
            return 1.0, 1.0, math.nan
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return svq_perplexity(w, 2.0), svq_perplexity(w, 3.0), k
    perp = index_perplexity(info["indices"], model.slot.codebook_size)
    return perp, perp, math.nan


def train(model: ForecastModel, dataset: Dataset, cfg: TrainConfig) -> TrainReport:
    if len(dataset) == 0:
        raise UsageError("training set is empty")
    start = time.perf_counter()
    train_set, val_set = split_validation(dataset, cfg.val_fraction)
    if len(train_set) == 0:
        train_set = val_set
    params = model.parameters()
    state = AdamState()
    order_rng = make_rng(cfg.seed, 1)
    quant_rng = make_rng(cfg.seed, 2)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    report = TrainReport()
    best = model.snapshot()
    stale = 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            tape = Tape()
            x = tape.leaf(train_set.inputs[idx])
            pred, info = model.forward(x, training=True, rng=quant_rng)
            loss = _loss(pred, train_set.targets[idx], cfg.loss_kind)
            task = float(loss.value)
            if info["quant_loss"] is not None:
                loss = loss + info["quant_loss"]
            if not math.isfinite(float(loss.value)):
                tape.release()
                report.diverged = True
                report.message = f"non-finite loss at epoch {epoch}, step {step}"
                break
            tape.backward(loss)
            grads = {k: tape.grad_for(v) for k, v in params.items()}
            tape.release()
            adam_step(params, grads, state, cosine_lr(cfg.lr, step, total_steps, cfg.min_lr))
            step += 1
            losses.append(task)
        if report.diverged:
            break
        val_pred = model.predict(val_set.inputs)
        diff = val_pred - val_set.targets
        val_loss = float(np.mean(np.abs(diff)) if cfg.loss_kind == "mae" else np.mean(diff ** 2))
        p2, p3, kurt = quantizer_diagnostics(model, val_set.inputs)
        report.history.append(EpochRecord(epoch, float(np.mean(losses)), val_loss, p2, p3, kurt))
        report.epochs_run = epoch
        if not math.isfinite(val_loss):
            report.diverged = True
            report.message = f"non-finite validation loss at epoch {epoch}"
            break
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best = model.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.restore(best)
    report.train_seconds = time.perf_counter() - start
    if report.diverged:
        raise TrainingDiverged(report)
    return report


class TrainingDiverged(DivergenceError):
    """Carries the partial report; the model holds the best weights seen so far."""

    def __init__(self, report):
        super().__init__(report.message)
        self.report = report


def evaluate(model: ForecastModel, dataset: Dataset, data_range=1.0) -> dict:
    if len(dataset) == 0:
        raise UsageError("evaluation split is empty")
    pred = model.predict(dataset.inputs)
    return {
        "mse": mse(pred, dataset.targets),
        "mae": mae(pred, dataset.targets),
        "ssim": ssim(pred, dataset.targets, data_range),
        "psnr": psnr(pred, dataset.targets, data_range),
    }
