"""Synthetic spatio-temporal sequences and training-noise injection.

Every sample is ``2T`` frames of an ``H x W`` scalar field; the first ``T``
frames are the input and the last ``T`` the forecast target. Values are
scaled to ``[0, 1]`` with one min/max over the whole generated set.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ParameterError, UsageError
from .tensor import make_rng
from .tensorfile import load_tensors, save_tensors

DATASET_KINDS = ("advection_diffusion", "moving_blobs")
NOISE_MODES = ("gaussian", "pixel_replace")


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "advection_diffusion"
    height: int = 16
    width: int = 16
    frames: int = 4  # T; each sample holds 2T frames
    count: int = 600
    velocity_scale: float = 1.0  # max |v| per axis, pixels per frame
    diffusion: float = 0.1  # explicit scheme needs <= 0.25
    blobs: int = 3
    blob_size: float = 2.0
    substeps: int = 2
    seed: int = 0

    def validate(self):
        if self.kind not in DATASET_KINDS:
            raise ParameterError(f"unknown dataset kind {self.kind!r}; expected one of {DATASET_KINDS}")
        if min(self.height, self.width, self.frames, self.count, self.substeps) < 1:
            raise ParameterError("grid, frame count, sample count and substeps must be positive")
        if self.diffusion < 0:
            raise ParameterError("diffusion coefficient must be nonnegative")
        dt = 1.0 / self.substeps
        if self.diffusion * dt > 0.25:
            raise ParameterError(
                f"explicit diffusion is unstable: coefficient*dt = {self.diffusion * dt:.4g} "
                f"exceeds the bound 0.25 (dx = 1)")

    def digest(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Dataset:
    inputs: np.ndarray  # [S, T, 1, H, W]
    targets: np.ndarray  # [S, T, 1, H, W]
    spec: SyntheticSpec | None = None

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx):
        return Dataset(self.inputs[idx], self.targets[idx], self.spec)


@dataclass(frozen=True)
class NoiseSpec:
    eta: float = 0.0
    mode: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if self.eta < 0:
            raise ParameterError(f"noise proportion must be nonnegative, got {self.eta}")
        if self.mode not in NOISE_MODES:
            raise ParameterError(f"unknown noise mode {self.mode!r}; expected one of {NOISE_MODES}")


def laplacian_neumann(u):
    """5-point Laplacian with zero-flux (mirror) boundaries over the last two axes."""
    p = np.pad(u, [(0, 0)] * (u.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    return p[..., :-2, 1:-1] + p[..., 2:, 1:-1] + p[..., 1:-1, :-2] + p[..., 1:-1, 2:] - 4.0 * u


def diffuse(u, coeff, dt=1.0):
    return u + coeff * dt * laplacian_neumann(u)


def advect(u, vy, vx, dt=1.0):
    """Semi-Lagrangian step: sample the field at the departure point bilinearly.

    ``u`` is ``[S, H, W]`` and ``vy``/``vx`` hold one velocity per sample.
    Departure points are clamped to the grid.
    """
    s, h, w = u.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    y = np.clip(yy[None] - dt * np.asarray(vy)[:, None, None], 0, h - 1)
    x = np.clip(xx[None] - dt * np.asarray(vx)[:, None, None], 0, w - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2) if h > 1 else np.zeros_like(y, dtype=np.int64)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2) if w > 1 else np.zeros_like(x, dtype=np.int64)
    fy = y - y0
    fx = x - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    si = np.arange(s)[:, None, None]
    return ((1 - fy) * (1 - fx) * u[si, y0, x0] + (1 - fy) * fx * u[si, y0, x1]
            + fy * (1 - fx) * u[si, y1, x0] + fy * fx * u[si, y1, x1])


def _blob_field(cy, cx, amp, size, h, w):
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    d2 = (yy[None, None] - cy[..., None, None]) ** 2 + (xx[None, None] - cx[..., None, None]) ** 2
    return (amp[..., None, None] * np.exp(-d2 / (2.0 * size[..., None, None] ** 2))).sum(axis=1)


def _reflect(pos, vel, upper):
    """Bounce positions off [0, upper]; returns new positions and velocities."""
    pos = pos.copy()
    vel = vel.copy()
    low = pos < 0
    pos[low] = -pos[low]
    vel[low] = -vel[low]
    high = pos > upper
    pos[high] = 2 * upper - pos[high]
    vel[high] = -vel[high]
    return pos, vel


def simulate_raw(spec: SyntheticSpec) -> np.ndarray:
    """Unnormalized frames ``[count, 2T, H, W]``."""
    spec.validate()
    rng = make_rng(spec.seed)
    s, h, w, n = spec.count, spec.height, spec.width, 2 * spec.frames
    k = spec.blobs
    cy = rng.uniform(0, h - 1, size=(s, k))
    cx = rng.uniform(0, w - 1, size=(s, k))
    amp = rng.uniform(0.5, 1.0, size=(s, k))
    size = spec.blob_size * rng.uniform(0.75, 1.5, size=(s, k))
    frames = np.empty((s, n, h, w))
    if spec.kind == "advection_diffusion":
        vy = rng.uniform(-spec.velocity_scale, spec.velocity_scale, size=s)
        vx = rng.uniform(-spec.velocity_scale, spec.velocity_scale, size=s)
        u = _blob_field(cy, cx, amp, size, h, w)
        dt = 1.0 / spec.substeps
        for t in range(n):
            frames[:, t] = u
            for _ in range(spec.substeps):
                if spec.velocity_scale:
                    u = advect(u, vy, vx, dt)
                if spec.diffusion:
                    u = diffuse(u, spec.diffusion, dt)
    else:
        vy = rng.uniform(-spec.velocity_scale, spec.velocity_scale, size=(s, k))
        vx = rng.uniform(-spec.velocity_scale, spec.velocity_scale, size=(s, k))
        for t in range(n):
            frames[:, t] = _blob_field(cy, cx, amp, size, h, w)
            cy, vy = _reflect(cy + vy, vy, h - 1)
            cx, vx = _reflect(cx + vx, vx, w - 1)
    return frames


def generate(spec: SyntheticSpec) -> Dataset:
    frames = simulate_raw(spec)
    lo, hi = frames.min(), frames.max()
    frames = (frames - lo) / (hi - lo) if hi > lo else np.zeros_like(frames)
    frames = frames[:, :, None]  # channel axis
    t = spec.frames
    return Dataset(np.ascontiguousarray(frames[:, :t]), np.ascontiguousarray(frames[:, t:]), spec)


def make_splits(spec: SyntheticSpec, train_count: int, test_count: int):
    """Generate ``train_count + test_count`` samples and split by index."""
    full = generate(replace(spec, count=train_count + test_count))
    return full.subset(slice(0, train_count)), full.subset(slice(train_count, None))


def inject_noise(dataset: Dataset, spec: NoiseSpec) -> Dataset:
    """Corrupt the inputs of a training split; targets are left untouched."""
    if spec.eta == 0:
        return Dataset(dataset.inputs.copy(), dataset.targets.copy(), dataset.spec)
    rng = make_rng(spec.seed, 7)
    x = dataset.inputs
    if spec.mode == "gaussian":
        sigma = float(x.std())
        noisy = x + rng.normal(0.0, spec.eta * sigma, size=x.shape)
    else:
        replace_mask = rng.random(x.shape) < min(spec.eta, 1.0)
        noisy = np.where(replace_mask, rng.random(x.shape), x)
    return Dataset(noisy, dataset.targets.copy(), dataset.spec)


def persistence_forecast(inputs: np.ndarray) -> np.ndarray:
    """Repeat the last observed frame over the forecast horizon."""
    return np.repeat(inputs[:, -1:], inputs.shape[1], axis=1)


def write_manifest(path, fields: dict):
    with open(path, "w") as fh:
        for key, value in fields.items():
            fh.write(f"{key}={value}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                out[key] = value
    return out


def save_dataset(folder, name, dataset: Dataset):
    os.makedirs(folder, exist_ok=True)
    save_tensors(os.path.join(folder, f"{name}.svqt"),
                 {"inputs": dataset.inputs, "targets": dataset.targets})
    spec = dataset.spec or SyntheticSpec()
    write_manifest(os.path.join(folder, f"{name}.manifest"), {
        "kind": spec.kind, "H": spec.height, "W": spec.width, "T": spec.frames,
        "count": len(dataset), "seed": spec.seed, "spec_hash": spec.digest(),
    })


def load_dataset(folder, name) -> Dataset:
    arrays = load_tensors(os.path.join(folder, f"{name}.svqt"))
    if "inputs" not in arrays or "targets" not in arrays:
        raise UsageError(f"{name}.svqt lacks inputs/targets tensors")
    return Dataset(arrays["inputs"], arrays["targets"])
