"""Experiment harness: benchmark, noise sweep, codebook sweep, ablations, covering.

Every experiment is a pure function of an :class:`ExperimentConfig`. Each
sweep cell derives its own seeds from ``(seed, cell index)`` so cells can run
in any order or in parallel worker processes with identical results.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .covering import METHODS as COVERING_METHODS
from .covering import CoveringSpec, codes_needed, lower_bound, sample_unit_ball
from .data import NoiseSpec, SyntheticSpec, inject_noise, make_splits, read_manifest, write_manifest
from .autodiff import Tape
from .errors import ConfigError, DegenerateInputError, NumericError, UsageError
from .forecaster import (ForecastModel, ModelConfig, SvqRawConfig, TrainConfig, evaluate,
                         quantizer_diagnostics, split_validation, train)
from .quantizers import KINDS as LOOKUP_KINDS
from .quantizers import QuantizerConfig, code_dim, implied_codebook_size
from .solvers import flops_estimate
from .svq import VARIANTS, SvqConfig, svq_perplexity, weight_kurtosis
from .tensor import InitSpec, make_rng
from .tensorfile import load_tensors, save_tensors

QUANTIZER_NAMES = ("none", "svq", "svq_raw") + LOOKUP_KINDS
INIT_KINDS = ("kaiming_uniform", "trunc_normal", "orthogonal", "sparse")
DEFAULT_BENCH = ("vq", "residual_vq", "grouped_residual_vq", "multihead_vq", "stochastic_residual_vq",
                 "residual_fsq", "lfq", "residual_lfq", "svq_raw", "svq")


def _opt(default, help_text):
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata={"help": help_text, "list": default})
    return field(default=default, metadata={"help": help_text})


@dataclass
class ExperimentConfig:
    seed: int = _opt(0, "master seed; every cell derives its seeds from it")
    # dataset
    dataset: str = _opt("advection_diffusion", "synthetic dataset kind (advection_diffusion | moving_blobs)")
    height: int = _opt(16, "frame height")
    width: int = _opt(16, "frame width")
    frames: int = _opt(4, "input frames T (the target has T frames too)")
    train_count: int = _opt(500, "training sequences (the last 10% validate)")
    test_count: int = _opt(100, "test sequences")
    velocity_scale: float = _opt(1.0, "max advection speed, pixels per frame")
    diffusion: float = _opt(0.1, "diffusion coefficient")
    blobs: int = _opt(3, "blobs per sequence")
    blob_size: float = _opt(2.0, "blob radius scale in pixels")
    substeps: int = _opt(2, "solver substeps per frame")
    data_seed: int = _opt(0, "dataset generation seed")
    # model and training
    placement: str = _opt("pre", "quantizer placement relative to the translator (pre | post)")
    latent_channels: int = _opt(32, "latent token width C'")
    hidden_channels: int = _opt(16, "encoder/decoder hidden channels")
    loss: str = _opt("mae", "training loss (mae | mse)")
    epochs: int = _opt(12, "maximum epochs")
    lr: float = _opt(3e-3, "peak Adam learning rate (cosine decay)")
    batch_size: int = _opt(16, "minibatch size")
    patience: int = _opt(10, "early-stopping patience in epochs")
    # quantizers
    quantizer: str = _opt("svq", "quantizer for train/eval (" + " | ".join(QUANTIZER_NAMES) + ")")
    bench_quantizers: list = _opt(list(DEFAULT_BENCH), "quantizers compared by bench (baseline always added)")
    codebook_size: int = _opt(1024, "codebook size N")
    svq_hidden: int = _opt(128, "SVQ projection hidden width")
    svq_variant: str = _opt("two_layer", "SVQ projection (" + " | ".join(VARIANTS) + ")")
    svq_init: str = _opt("kaiming_uniform", "SVQ codebook init (" + " | ".join(INIT_KINDS) + ")")
    svq_sparsity: float = _opt(0.9, "zero fraction for the sparse init")
    codebook_learnable: bool = _opt(False, "train the SVQ codebook")
    mlp_learnable: bool = _opt(True, "train the SVQ projection")
    svq_raw_lambda: float = _opt(0.1, "lasso penalty of the exact solver quantizer (train/eval)")
    svq_raw_lambdas: list = _opt([0.01, 0.05, 0.1, 0.5],
                                 "penalties tried by bench for svq_raw; the lowest validation loss is reported")
    svq_raw_iters: int = _opt(20, "ISTA iterations of the exact solver quantizer")
    num_quantizers: int = _opt(8, "levels of residual quantizers")
    groups: int = _opt(2, "groups of grouped residual VQ")
    heads: int = _opt(8, "heads of multi-head VQ")
    fsq_levels: list = _opt([8, 8, 4, 4], "FSQ levels per dimension (product = codebook size)")
    entropy_weight: float = _opt(0.1, "LFQ entropy-loss weight")
    commitment: float = _opt(0.25, "VQ commitment weight")
    decay: float = _opt(0.99, "EMA decay of lookup codebooks")
    temperature: float = _opt(1.0, "sampling temperature of stochastic residual VQ")
    # sweeps
    sizes: list = _opt([128, 256, 512, 1024, 2048], "codebook sizes for sweep")
    etas: list = _opt([0.0, 0.05, 0.1, 0.2], "noise proportions for noise (must include 0)")
    noise_mode: str = _opt("gaussian", "noise model (gaussian | pixel_replace)")
    thetas: list = _opt([2.0, 3.0], "perplexity thresholds in standard deviations")
    ablate_sizes: list = _opt([256, 1024], "codebook sizes for the structure ablation")
    # covering
    covering_dims: list = _opt([2, 4, 8], "dimensions of the covering study")
    covering_deltas: list = _opt([0.5, 0.3], "error targets of the covering study")
    covering_points: int = _opt(2000, "test points per dimension")
    covering_grid: list = _opt([1, 2, 4, 8, 16, 32, 64, 128, 256, 512], "codebook sizes tried (ascending)")
    covering_lambda: float = _opt(1e-4, "lasso penalty for sparse-regression covering")
    covering_iters: int = _opt(2000, "ISTA iteration cap for covering")

    def validate(self):
        if self.quantizer not in QUANTIZER_NAMES:
            raise ConfigError(f"unknown quantizer {self.quantizer!r}; expected one of {QUANTIZER_NAMES}")
        for name in self.bench_quantizers:
            if name not in QUANTIZER_NAMES:
                raise ConfigError(f"unknown quantizer {name!r} in bench_quantizers")
        if self.svq_variant not in VARIANTS:
            raise ConfigError(f"unknown SVQ variant {self.svq_variant!r}")
        if self.svq_init not in INIT_KINDS:
            raise ConfigError(f"unknown init {self.svq_init!r}; expected one of {INIT_KINDS}")
        if self.loss not in ("mae", "mse"):
            raise ConfigError(f"loss must be mae or mse, got {self.loss!r}")
        if self.placement not in ("pre", "post"):
            raise ConfigError(f"placement must be pre or post, got {self.placement!r}")
        for name in ("sizes", "covering_grid", "ablate_sizes"):
            grid = getattr(self, name)
            if not grid or list(grid) != sorted(grid) or min(grid) < 1:
                raise ConfigError(f"{name} must be a nonempty ascending list of positive sizes")
        if not self.thetas or min(self.thetas) <= 0:
            raise ConfigError("thetas must be positive")
        if not self.covering_deltas or not all(0.0 < t < 1.0 for t in self.covering_deltas):
            raise ConfigError("covering_deltas must be a nonempty list of targets in (0, 1)")
        if not self.svq_raw_lambdas or min(self.svq_raw_lambdas) < 0:
            raise ConfigError("svq_raw_lambdas must be a nonempty list of nonnegative penalties")
        return self

    def canonical_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return f"{fnv1a_64(self.canonical_text().encode()):016x}"


def config_keys():
    return [(f.name, f.metadata.get("list", f.default), f.metadata.get("help", ""))
            for f in fields(ExperimentConfig)]


def config_help() -> str:
    lines = ["config keys (TOML, all optional):"]
    for name, default, text in config_keys():
        lines.append(f"  {name} = {json.dumps(default)}  # {text}")
    return "\n".join(lines)


def _coerce(name, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list")
        if default:
            return [_coerce(f"{name}[{i}]", default[0], v) for i, v in enumerate(value)]
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a string")
    return value


def config_from_dict(values: dict) -> ExperimentConfig:
    known = {name: default for name, default, _ in config_keys()}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; valid keys: {sorted(known)}")
    kwargs = {k: _coerce(k, known[k], v) for k, v in values.items()}
    return ExperimentConfig(**kwargs).validate()


def load_config(path) -> ExperimentConfig:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            values = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(values)


# ---------------------------------------------------------------- output

def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def array_checksum(arr) -> str:
    return f"{fnv1a_64(np.ascontiguousarray(arr, dtype=np.float64).tobytes()):016x}"


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6g}"
    if v is None:
        return ""
    return str(v)


def atomic_write_text(path, text):
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, columns, rows, config_hash):
    """CSV with a ``# config_hash=`` comment line, 6 significant digits, LF endings."""
    lines = [f"# config_hash={config_hash}", ",".join(columns)]
    for row in rows:
        lines.append(",".join(format_value(row.get(c)) for c in columns))
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def read_csv(path):
    """Rows of a CSV written by :func:`write_csv` as dicts of strings."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    header = lines[0].split(",")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:]]


# ---------------------------------------------------------------- builders

def dataset_spec(cfg: ExperimentConfig) -> SyntheticSpec:
    return SyntheticSpec(kind=cfg.dataset, height=cfg.height, width=cfg.width, frames=cfg.frames,
                         count=cfg.train_count + cfg.test_count, velocity_scale=cfg.velocity_scale,
                         diffusion=cfg.diffusion, blobs=cfg.blobs, blob_size=cfg.blob_size,
                         substeps=cfg.substeps, seed=cfg.data_seed)


def load_splits(cfg: ExperimentConfig):
    return make_splits(dataset_spec(cfg), cfg.train_count, cfg.test_count)


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    return ModelConfig(frames=cfg.frames, height=cfg.height, width=cfg.width,
                       hidden_channels=cfg.hidden_channels, latent_channels=cfg.latent_channels,
                       placement=cfg.placement)


def train_config(cfg: ExperimentConfig, seed, loss=None) -> TrainConfig:
    return TrainConfig(loss_kind=loss or cfg.loss, epochs=cfg.epochs, lr=cfg.lr,
                       batch_size=cfg.batch_size, patience=cfg.patience, seed=seed)


def svq_config(cfg: ExperimentConfig, size=None, variant=None, init=None,
               codebook_learnable=None, mlp_learnable=None) -> SvqConfig:
    init = init or cfg.svq_init
    return SvqConfig(
        codebook_size=size or cfg.codebook_size, token_dim=cfg.latent_channels,
        hidden_dim=cfg.svq_hidden, variant=variant or cfg.svq_variant,
        codebook_init=InitSpec(init, sparsity=cfg.svq_sparsity),
        codebook_learnable=cfg.codebook_learnable if codebook_learnable is None else codebook_learnable,
        mlp_learnable=cfg.mlp_learnable if mlp_learnable is None else mlp_learnable)


def fsq_levels_for(cfg: ExperimentConfig, size):
    """Configured FSQ levels, or near-equal power-of-two levels multiplying to ``size``."""
    levels = tuple(int(v) for v in cfg.fsq_levels)
    if int(np.prod(levels)) == size:
        return levels
    bits = int(round(math.log2(size)))
    if 2 ** bits != size or bits < 4:
        raise ConfigError(f"cannot derive FSQ levels for codebook size {size}")
    per = [bits // 4 + (1 if i < bits % 4 else 0) for i in range(4)]
    return tuple(2 ** b for b in per)


def quantizer_spec(cfg: ExperimentConfig, name, size=None, lam=None):
    size = size or cfg.codebook_size
    if name == "none":
        return None
    if name == "svq":
        return svq_config(cfg, size)
    if name == "svq_raw":
        return SvqRawConfig(codebook_size=size, lam=cfg.svq_raw_lambda if lam is None else lam,
                            iters=cfg.svq_raw_iters)
    if name not in LOOKUP_KINDS:
        raise ConfigError(f"unknown quantizer {name!r}")
    levels = fsq_levels_for(cfg, size) if name in ("fsq", "residual_fsq") else tuple(cfg.fsq_levels)
    return QuantizerConfig(kind=name, codebook_size=size, num_quantizers=cfg.num_quantizers,
                           groups=cfg.groups, heads=cfg.heads, levels=levels,
                           entropy_weight=cfg.entropy_weight, commitment=cfg.commitment,
                           decay=cfg.decay, temperature=cfg.temperature)


def quantizer_flops(spec, token_dim, hidden=128) -> int:
    """Per-token cost of the quantizer from the analytic model in ``flops_estimate``."""
    if spec is None:
        return 0
    if isinstance(spec, SvqConfig):
        return flops_estimate("svq_mlp", token_dim, spec.codebook_size, spec.hidden_dim)
    if isinstance(spec, SvqRawConfig):
        return flops_estimate("svq_raw", token_dim, spec.codebook_size, iters=spec.iters)
    kind = spec.kind
    if kind in ("vq", "multihead_vq"):
        return flops_estimate("lookup", token_dim, spec.codebook_size)
    if kind in ("residual_vq", "stochastic_residual_vq", "grouped_residual_vq"):
        return flops_estimate("lookup", token_dim, spec.codebook_size, levels=spec.num_quantizers)
    # lookup-free: only the projections in and out of the code space
    return 2 * 2 * token_dim * code_dim(spec, token_dim)


def cell_seed(seed, cell) -> int:
    return int(make_rng(seed, 11, cell).integers(0, 2 ** 31 - 1))


# ---------------------------------------------------------------- cells

@dataclass
class Cell:
    """One training run; everything a worker process needs."""

    index: int
    quantizer: str
    cfg: ExperimentConfig
    size: int | None = None
    loss: str | None = None
    spec: object = None
    eta: float = 0.0
    labels: dict = field(default_factory=dict)


def run_cell(cell: Cell) -> dict:
    cfg = cell.cfg
    train_set, test_set = load_splits(cfg)
    if cell.eta:
        train_set = inject_noise(train_set, NoiseSpec(cell.eta, cfg.noise_mode, cfg.seed))
    spec = cell.spec if cell.spec is not None else quantizer_spec(cfg, cell.quantizer, cell.size)
    model = ForecastModel(model_config(cfg), spec, seed=cfg.seed,
                          quantizer_seed=cell_seed(cfg.seed, cell.index))
    row = dict(cell.labels)
    row["codebook_size"] = model.slot.codebook_size if model.slot is not None else 0
    row["flops"] = quantizer_flops(spec, cfg.latent_channels)
    book = model.slot.svq.codebook if model.slot is not None and model.slot.svq is not None else None
    if book is not None:
        row["init_checksum"] = array_checksum(book)
    try:
        report = train(model, train_set, train_config(cfg, cfg.seed, cell.loss))
        row["status"] = "ok"
        row["epochs"] = report.epochs_run
        row["best_epoch"] = report.best_epoch
        row["best_val_loss"] = report.best_val_loss
        row["train_seconds"] = report.train_seconds
    except NumericError as exc:
        row["status"] = "diverged"
        row["message"] = str(exc).replace(",", ";")
        report = getattr(exc, "report", None)
        row["train_seconds"] = report.train_seconds if report is not None else math.nan
    metrics = evaluate(model, test_set)
    row.update(metrics)
    _, val_set = split_validation(train_set, 0.1)
    thetas = list(cfg.thetas)
    if model.slot is not None and model.slot.kind in ("svq", "svq_raw"):
        tape = Tape()
        _, info = model.forward(tape.leaf(val_set.inputs))
        tape.release()
        w = info["weights"]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for t in thetas:
                row[f"perplexity_theta{t:g}"] = svq_perplexity(w, t)
        try:
            row["kurtosis"] = weight_kurtosis(w)
        except DegenerateInputError:
            row["kurtosis"] = math.nan
    elif model.slot is not None:
        perp, _, _ = quantizer_diagnostics(model, val_set.inputs)
        for t in thetas:
            row[f"perplexity_theta{t:g}"] = perp
        row["kurtosis"] = math.nan
    else:
        for t in thetas:
            row[f"perplexity_theta{t:g}"] = math.nan
        row["kurtosis"] = math.nan
    if book is not None:
        row["codebook_checksum"] = array_checksum(book)
    return row


def run_cells(cells, threads=1):
    if threads > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run_cell, cells))
    return [run_cell(c) for c in cells]


def _perp_columns(cfg):
    return [f"perplexity_theta{t:g}" for t in cfg.thetas]


# ---------------------------------------------------------------- experiments

BENCH_COLUMNS = ["quantizer", "codebook_size", "mse", "mae", "ssim", "psnr"]


def run_quantizer_benchmark(cfg: ExperimentConfig, out_dir, threads=1, quantizers=None):
    """One row per quantizer plus the no-quantizer baseline; writes bench.csv and sidecars.

    Wall-clock times live in bench_timing.csv so bench.csv is reproducible
    byte for byte. The exact-solver quantizer is trained once per penalty in
    ``svq_raw_lambdas`` (all runs in bench_svq_raw.csv) and the run with the
    lowest validation loss fills its bench.csv row.
    """
    names = ["none"] + [q for q in (quantizers or cfg.bench_quantizers) if q != "none"]
    cells = []
    for name in names:
        if name == "svq_raw":
            for lam in cfg.svq_raw_lambdas:
                cells.append(Cell(len(cells), name, cfg, spec=quantizer_spec(cfg, name, lam=lam),
                                  labels={"quantizer": name, "lambda": lam}))
        else:
            cells.append(Cell(len(cells), name, cfg, labels={"quantizer": name}))
    results = run_cells(cells, threads)
    rows, raw_rows = [], []
    for name in names:
        group = [r for r in results if r["quantizer"] == name]
        if name == "svq_raw":
            raw_rows = group
            group = [min(group, key=lambda r: (r.get("best_val_loss", math.inf), r["lambda"]))]
        rows.extend(group)
    columns = BENCH_COLUMNS + _perp_columns(cfg) + ["kurtosis", "flops", "epochs", "status"]
    h = cfg.config_hash()
    path = write_csv(os.path.join(out_dir, "bench.csv"), columns, rows, h)
    write_csv(os.path.join(out_dir, "bench_timing.csv"), ["quantizer", "train_seconds"], rows, h)
    write_csv(os.path.join(out_dir, "flops.csv"), ["m", "svq_raw", "svq_mlp", "lookup"],
              flops_table(cfg.latent_channels, cfg.sizes, cfg.svq_hidden, cfg.svq_raw_iters), h)
    if raw_rows:
        write_csv(os.path.join(out_dir, "bench_svq_raw.csv"),
                  ["lambda", "best_val_loss", "mse", "mae", "status"], raw_rows, h)
    return path, rows


def flops_table(d, sizes, hidden=128, iters=20):
    return [{"m": m, "svq_raw": flops_estimate("svq_raw", d, m, iters=iters),
             "svq_mlp": flops_estimate("svq_mlp", d, m, hidden),
             "lookup": flops_estimate("lookup", d, m)} for m in sizes]


NOISE_COLUMNS = ["eta", "mse_svq", "mae_svq", "mse_base", "mae_base",
                 "pct_mse_svq", "pct_mae_svq", "pct_mse_base", "pct_mae_base"]


def _pct(value, ref):
    return 100.0 * (value - ref) / ref if ref else math.nan


def run_noise_sweep(cfg: ExperimentConfig, out_dir, etas=None, threads=1):
    etas = [float(e) for e in (cfg.etas if etas is None else etas)]
    if 0.0 not in etas:
        raise ConfigError("the noise grid must include eta = 0")
    if min(etas) < 0:
        raise ConfigError("noise proportions must be nonnegative")
    cells = []
    for i, eta in enumerate(etas):
        for j, name in enumerate(("svq", "none")):
            cells.append(Cell(2 * i + j, name, cfg, eta=eta, labels={"eta": eta, "quantizer": name}))
    results = run_cells(cells, threads)
    by = {(r["eta"], r["quantizer"]): r for r in results}
    rows = []
    for eta in etas:
        row = {"eta": eta}
        for name, tag in (("svq", "svq"), ("none", "base")):
            r = by[(eta, name)]
            row[f"mse_{tag}"] = r["mse"]
            row[f"mae_{tag}"] = r["mae"]
            ref = by[(0.0, name)]
            row[f"pct_mse_{tag}"] = _pct(r["mse"], ref["mse"])
            row[f"pct_mae_{tag}"] = _pct(r["mae"], ref["mae"])
        rows.append(row)
    path = write_csv(os.path.join(out_dir, "noise.csv"), NOISE_COLUMNS, rows, cfg.config_hash())
    return path, rows


SWEEP_COLUMNS = ["size", "quantizer", "mse", "mae", "status"]


def run_codebook_sweep(cfg: ExperimentConfig, out_dir, sizes=None, threads=1):
    sizes = list(cfg.sizes if sizes is None else sizes)
    if not sizes or sizes != sorted(sizes):
        raise ConfigError("codebook-size grid must be nonempty and ascending")
    cells = []
    for i, size in enumerate(sizes):
        for j, name in enumerate(("svq", "grouped_residual_vq")):
            cells.append(Cell(2 * i + j, name, cfg, size=size, labels={"size": size, "quantizer": name}))
    rows = run_cells(cells, threads)
    path = write_csv(os.path.join(out_dir, "sweep.csv"), SWEEP_COLUMNS, rows, cfg.config_hash())
    return path, rows


ABLATION_COLUMNS = ["study", "loss", "quantizer", "codebook_size", "variant", "init",
                    "codebook_learnable", "mlp_learnable", "mse", "mae", "kurtosis",
                    "init_checksum", "codebook_checksum", "status"]


def ablation_cells(cfg: ExperimentConfig):
    cells = []

    def add(study, name, spec=None, loss=None, **labels):
        base = {"study": study, "quantizer": name, "loss": loss or cfg.loss}
        if isinstance(spec, SvqConfig):
            base.update(variant=spec.variant, init=spec.codebook_init.kind,
                        codebook_learnable=spec.codebook_learnable, mlp_learnable=spec.mlp_learnable)
        base.update(labels)
        cells.append(Cell(len(cells), name, cfg, spec=spec, loss=loss, labels=base))

    for loss in ("mae", "mse"):
        add("loss", "svq", svq_config(cfg), loss=loss)
        add("loss", "none", None, loss=loss)
    for size in cfg.ablate_sizes:
        for learnable in (False, True):
            add("structure", "svq", svq_config(cfg, size, variant="two_layer", codebook_learnable=learnable))
    for variant in VARIANTS:
        if variant != "two_layer":
            add("structure", "svq", svq_config(cfg, variant=variant, codebook_learnable=False))
    for init in INIT_KINDS:
        for learnable in (False, True):
            add("init", "svq", svq_config(cfg, init=init, codebook_learnable=learnable))
    add("frozen", "svq", svq_config(cfg, codebook_learnable=True, mlp_learnable=False))
    add("frozen", "svq", svq_config(cfg, codebook_learnable=False, mlp_learnable=True))
    return cells


def run_ablations(cfg: ExperimentConfig, out_dir, threads=1):
    rows = run_cells(ablation_cells(cfg), threads)
    path = write_csv(os.path.join(out_dir, "ablations.csv"), ABLATION_COLUMNS, rows, cfg.config_hash())
    return path, rows


COVERING_COLUMNS = ["dim", "delta", "method", "m", "error", "m_star", "lower_bound"]


def run_covering(cfg: ExperimentConfig, out_dir):
    """Error-vs-m tables for both methods on shared test points per dimension.

    The error table does not depend on ``delta``, so each (dimension, method)
    table is measured once and ``m*`` is read off it for every target.
    """
    rows = []
    for di, d in enumerate(cfg.covering_dims):
        points = sample_unit_ball(cfg.covering_points, d, make_rng(cfg.seed, 21, di))
        tables = {}
        for mi, method in enumerate(COVERING_METHODS):
            spec = CoveringSpec(dim=d, delta=max(cfg.covering_deltas), test_points=cfg.covering_points,
                                grid=tuple(cfg.covering_grid), lam=cfg.covering_lambda,
                                max_iters=cfg.covering_iters, method=method)
            _, tables[method] = codes_needed(spec, make_rng(cfg.seed, 22, di, mi), points)
        for delta in cfg.covering_deltas:
            for method in COVERING_METHODS:
                table = tables[method]
                m_star = next((m for m, err in table if err < delta), "not_reached")
                for m, err in table:
                    rows.append({"dim": d, "delta": delta, "method": method, "m": m, "error": err,
                                 "m_star": m_star, "lower_bound": lower_bound(delta, d)})
    path = write_csv(os.path.join(out_dir, "covering.csv"), COVERING_COLUMNS, rows, cfg.config_hash())
    return path, rows


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: ForecastModel, cfg: ExperimentConfig, quantizer, prefix):
    """``prefix.svqt`` holds every model array; ``prefix.manifest`` rebuilds the model."""
    save_tensors(prefix + ".svqt", model.state_arrays())
    write_manifest(prefix + ".manifest", {
        "quantizer": quantizer, "placement": cfg.placement,
        "config_hash": cfg.config_hash(), "config": cfg.canonical_text(),
    })


def load_checkpoint(prefix):
    if not os.path.exists(prefix + ".manifest"):
        raise UsageError(f"no checkpoint manifest at {prefix}.manifest")
    manifest = read_manifest(prefix + ".manifest")
    cfg = config_from_dict(json.loads(manifest["config"]))
    name = manifest["quantizer"]
    model = ForecastModel(model_config(cfg), quantizer_spec(cfg, name), seed=cfg.seed,
                          quantizer_seed=cell_seed(cfg.seed, 0))
    arrays = load_tensors(prefix + ".svqt")
    missing = sorted(set(model.state_arrays()) - set(arrays))
    if missing:
        raise UsageError(f"checkpoint lacks arrays {missing}")
    model.restore(arrays)
    return model, cfg, name


REPORT_COLUMNS = ["epoch", "train_loss", "val_loss", "perplexity_theta2", "perplexity_theta3", "kurtosis"]


def run_train(cfg: ExperimentConfig, out_dir, quantizer=None):
    name = quantizer or cfg.quantizer
    train_set, _ = load_splits(cfg)
    model = ForecastModel(model_config(cfg), quantizer_spec(cfg, name), seed=cfg.seed,
                          quantizer_seed=cell_seed(cfg.seed, 0))
    report = train(model, train_set, train_config(cfg, cfg.seed))
    h = cfg.config_hash()
    rows = [asdict(r) for r in report.history]
    write_csv(os.path.join(out_dir, "train_report.csv"), REPORT_COLUMNS, rows, h)
    save_checkpoint(model, cfg, name, os.path.join(out_dir, "model"))
    return model, report


def run_eval(prefix, out_dir):
    model, cfg, name = load_checkpoint(prefix)
    _, test_set = load_splits(cfg)
    metrics = evaluate(model, test_set)
    row = {"quantizer": name, **metrics}
    path = write_csv(os.path.join(out_dir, "eval.csv"), ["quantizer", "mse", "mae", "ssim", "psnr"],
                     [row], cfg.config_hash())
    return path, metrics


def with_overrides(cfg: ExperimentConfig, **values) -> ExperimentConfig:
    values = {k: v for k, v in values.items() if v is not None}
    return replace(cfg, **values).validate() if values else cfg
