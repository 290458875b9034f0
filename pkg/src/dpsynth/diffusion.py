"""Compact denoising diffusion model with hand-derived gradients.

The forward process corrupts an image in closed form,
``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) e`` with ``e ~ N(0, I)`` and
``abar_t`` the cumulative product of (1 - beta_s). A small fully-connected
network predicts the injected noise from (x_t, timestep, optional label); its
training objective is the squared error ``||e - predicted||^2`` averaged over
one or more noise draws per example. Gradients are reverse-mode by hand, one
gradient vector per example, which is exactly the shape DP-SGD clipping
needs. Generation runs the reverse process: estimate the clean image from the
predicted noise, re-noise to the previous timestep, repeat.

Parameters live in one flat float64 vector addressed through a shape
manifest, so checkpointing, clipping, and noising treat the model as a plain
vector.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .core import ImageTensor, InvalidArgumentError, RngSeed

CHECKPOINT_MAGIC = b"DPSYNCK1"


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step corruption rates and their cumulative products."""

    betas: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.betas:
            raise InvalidArgumentError("schedule needs at least one step")
        for b in self.betas:
            if not (0.0 <= b < 1.0):
                raise InvalidArgumentError(f"beta values must lie in [0, 1), got {b}")

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - np.asarray(self.betas, dtype=np.float64))

    def alpha_bar(self, t: int) -> float:
        """Cumulative product through step t (1-indexed)."""
        if not (1 <= t <= self.num_steps):
            raise InvalidArgumentError(f"step {t} outside [1, {self.num_steps}]")
        return float(self.alpha_bars[t - 1])

    @classmethod
    def linear(
        cls,
        num_steps: int = 100,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
        reference_steps: int = 1000,
    ) -> "NoiseSchedule":
        """Linear schedule rescaled so shorter chains still end near-fully noised.

        beta_start/beta_end describe the schedule at `reference_steps`; fewer
        steps scale the rates up by reference_steps / num_steps (capped below
        1) so that the terminal cumulative product stays below 1e-3.
        """
        if num_steps < 1:
            raise InvalidArgumentError("num_steps must be positive")
        scale = reference_steps / num_steps
        betas = np.linspace(beta_start * scale, beta_end * scale, num_steps)
        betas = np.clip(betas, 0.0, 0.999)
        schedule = cls(tuple(float(b) for b in betas))
        terminal = schedule.alpha_bars[-1]
        if terminal >= 1e-3:
            raise InvalidArgumentError(
                f"schedule ends with cumulative product {terminal:.3g} >= 1e-3; "
                "increase num_steps or the beta range"
            )
        return schedule


@dataclass(frozen=True)
class ParamManifest:
    """Layer shapes of the denoiser; fixes the flat-vector layout.

    Layout order: W1, b1, W2, b2, W3, b3, label embedding table. The label
    table has num_classes + 1 rows; the last row is the unconditional
    sentinel used when no label is supplied.
    """

    height: int
    width: int
    channels: int
    hidden1: int = 128
    hidden2: int = 128
    time_dim: int = 16
    num_classes: int = 10
    label_dim: int = 8

    def __post_init__(self) -> None:
        if min(self.height, self.width, self.channels) < 1:
            raise InvalidArgumentError("image dimensions must be positive")
        if min(self.hidden1, self.hidden2, self.label_dim) < 1 or self.num_classes < 1:
            raise InvalidArgumentError("layer sizes must be positive")
        if self.time_dim < 2 or self.time_dim % 2:
            raise InvalidArgumentError("time embedding dimension must be even and >= 2")

    @property
    def data_dim(self) -> int:
        return self.height * self.width * self.channels

    @property
    def input_dim(self) -> int:
        return self.data_dim + self.time_dim + self.label_dim

    @property
    def unconditional_label(self) -> int:
        return self.num_classes

    def block_shapes(self) -> dict[str, tuple[int, ...]]:
        d, h1, h2 = self.input_dim, self.hidden1, self.hidden2
        return {
            "W1": (h1, d),
            "b1": (h1,),
            "W2": (h2, h1),
            "b2": (h2,),
            "W3": (self.data_dim, h2),
            "b3": (self.data_dim,),
            "emb": (self.num_classes + 1, self.label_dim),
        }

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.block_shapes().values())

    def views(self, vector: np.ndarray) -> dict[str, np.ndarray]:
        """Named reshaped views into a flat parameter vector (no copies)."""
        if vector.shape != (self.num_params,):
            raise InvalidArgumentError(
                f"parameter vector has shape {vector.shape}, expected ({self.num_params},)"
            )
        out, offset = {}, 0
        for name, shape in self.block_shapes().items():
            size = int(np.prod(shape))
            out[name] = vector[offset : offset + size].reshape(shape)
            offset += size
        return out

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "hidden1": self.hidden1,
            "hidden2": self.hidden2,
            "time_dim": self.time_dim,
            "num_classes": self.num_classes,
            "label_dim": self.label_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamManifest":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class DenoiserParams:
    """Flat trainable vector plus its manifest."""

    manifest: ParamManifest
    vector: np.ndarray

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(self.vector, dtype=np.float64)
        if v.shape != (self.manifest.num_params,):
            raise InvalidArgumentError(
                f"vector length {v.size} != manifest total {self.manifest.num_params}"
            )
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("parameters must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    def replace_vector(self, vector: np.ndarray) -> "DenoiserParams":
        return DenoiserParams(self.manifest, vector)


def init_params(manifest: ParamManifest, rng: RngSeed, scale: float = 0.25) -> DenoiserParams:
    """Fan-in scaled Gaussian weights, zero biases, small label embeddings."""
    gen = rng.generator()
    blocks = []
    for name, shape in manifest.block_shapes().items():
        if name.startswith("b"):
            blocks.append(np.zeros(shape))
        elif name == "emb":
            blocks.append(scale * gen.standard_normal(shape))
        else:
            fan_in = shape[1]
            blocks.append(gen.standard_normal(shape) * math.sqrt(2.0 / fan_in))
    return DenoiserParams(manifest, np.concatenate([b.reshape(-1) for b in blocks]))


def zero_params(manifest: ParamManifest) -> DenoiserParams:
    return DenoiserParams(manifest, np.zeros(manifest.num_params))


def _silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (len(t), dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / half)[None, :]
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def corrupt(x0: np.ndarray, alpha_bar: float, noise: np.ndarray) -> np.ndarray:
    """Closed-form forward corruption for a given cumulative product."""
    return math.sqrt(alpha_bar) * x0 + math.sqrt(1.0 - alpha_bar) * noise


def forward_noise(
    x0: ImageTensor, t: int, schedule: NoiseSchedule, rng: RngSeed
) -> tuple[ImageTensor, np.ndarray]:
    """Single-step corruption of x0 to level t; returns (x_t, injected noise)."""
    abar = schedule.alpha_bar(t)
    e = rng.generator().standard_normal(x0.data.shape)
    xt = corrupt(x0.data, abar, e)
    return ImageTensor(x0.width, x0.height, x0.channels, xt), e


def _assemble_input(
    manifest: ParamManifest, x: np.ndarray, t: np.ndarray, labels: Optional[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Stack pixels, time embedding, and label embedding indices for a batch."""
    n = x.shape[0]
    if labels is None:
        lab = np.full(n, manifest.unconditional_label, dtype=np.int64)
    else:
        lab = np.asarray(labels, dtype=np.int64)
        if lab.shape != (n,):
            raise InvalidArgumentError("labels must match the batch size")
        if lab.min() < 0 or lab.max() > manifest.unconditional_label:
            raise InvalidArgumentError("label outside the embedding table")
    temb = time_embedding(t, manifest.time_dim)
    return temb, lab


def _forward_cached(views: dict, manifest: ParamManifest, x, t, labels):
    temb, lab = _assemble_input(manifest, x, t, labels)
    z0 = np.concatenate([x, temb, views["emb"][lab]], axis=1)
    a1 = z0 @ views["W1"].T + views["b1"]
    h1 = _silu(a1)
    a2 = h1 @ views["W2"].T + views["b2"]
    h2 = _silu(a2)
    out = h2 @ views["W3"].T + views["b3"]
    return out, (z0, a1, h1, a2, h2, lab)


def denoiser_forward(
    params: DenoiserParams,
    x_t: np.ndarray,
    t: np.ndarray | int,
    labels: Optional[np.ndarray | int] = None,
) -> np.ndarray:
    """Predicted noise for a batch (N, D) or a single flat image (D,)."""
    m = params.manifest
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        t = np.array([t])
        labels = None if labels is None else np.array([labels])
    if x.shape[1] != m.data_dim:
        raise InvalidArgumentError(f"input dim {x.shape[1]} != manifest data dim {m.data_dim}")
    out, _ = _forward_cached(m.views(params.vector), m, x, np.asarray(t), labels)
    return out[0] if single else out


@dataclass(frozen=True)
class DiffusionBatchLoss:
    """Mean batch loss plus one flat gradient vector per example."""

    loss: float
    per_example_losses: np.ndarray
    per_example_grads: np.ndarray

    def __post_init__(self) -> None:
        if self.per_example_grads.shape[0] != self.per_example_losses.shape[0]:
            raise InvalidArgumentError("gradient count must equal the batch size")


def _backward(views, manifest, cache, dout):
    """Per-example gradients of sum-of-squares loss wrt every block."""
    z0, a1, h1, a2, h2, lab = cache
    n = dout.shape[0]

    g = {}
    g["W3"] = np.einsum("bd,bh->bdh", dout, h2)
    g["b3"] = dout
    dh2 = dout @ views["W3"]
    da2 = dh2 * _silu_grad(a2)
    g["W2"] = np.einsum("bh,bi->bhi", da2, h1)
    g["b2"] = da2
    dh1 = da2 @ views["W2"]
    da1 = dh1 * _silu_grad(a1)
    g["W1"] = np.einsum("bh,bi->bhi", da1, z0)
    g["b1"] = da1
    dz0 = da1 @ views["W1"]

    flat = np.zeros((n, manifest.num_params))
    offset = 0
    for name, shape in manifest.block_shapes().items():
        size = int(np.prod(shape))
        if name == "emb":
            demb = dz0[:, manifest.data_dim + manifest.time_dim :]
            cols = offset + lab[:, None] * manifest.label_dim + np.arange(manifest.label_dim)[None, :]
            flat[np.arange(n)[:, None], cols] = demb
        else:
            flat[:, offset : offset + size] = g[name].reshape(n, size)
        offset += size
    return flat


def loss_and_per_example_grads(
    params: DenoiserParams,
    x0: np.ndarray,
    labels: Optional[np.ndarray],
    schedule: NoiseSchedule,
    rng: RngSeed,
    noise_multiplicity: int = 1,
    example_ids: Optional[Sequence[int]] = None,
) -> DiffusionBatchLoss:
    """Noise-prediction loss and per-example gradients for a batch.

    Each example draws `noise_multiplicity` (timestep, noise) pairs; its loss
    is the average squared error over the draws and its gradient is the exact
    gradient of that average. When `example_ids` is given, each example's
    draws come from its own derived stream keyed by its id, making the result
    independent of batch order; otherwise draws come from one sequential
    stream (cheaper, used by the non-private warm-up).
    """
    if noise_multiplicity < 1:
        raise InvalidArgumentError("noise multiplicity must be >= 1")
    m = params.manifest
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    views = m.views(params.vector)
    abars = schedule.alpha_bars
    T = schedule.num_steps
    k = noise_multiplicity

    if n == 0:
        return DiffusionBatchLoss(0.0, np.zeros(0), np.zeros((0, m.num_params)))

    if example_ids is not None:
        ids = list(example_ids)
        if len(ids) != n:
            raise InvalidArgumentError("example_ids must match the batch size")
        ts = np.empty((n, k), dtype=np.int64)
        es = np.empty((n, k, m.data_dim))
        for i, ex in enumerate(ids):
            gen = rng.derive(int(ex)).generator()
            ts[i] = gen.integers(1, T + 1, size=k)
            es[i] = gen.standard_normal((k, m.data_dim))
    else:
        gen = rng.generator()
        ts = gen.integers(1, T + 1, size=(n, k))
        es = gen.standard_normal((n, k, m.data_dim))

    losses = np.zeros(n)
    grads = np.zeros((n, m.num_params))
    for j in range(k):
        t_j = ts[:, j]
        e_j = es[:, j]
        ab = abars[t_j - 1][:, None]
        x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * e_j
        out, cache = _forward_cached(views, m, x_t, t_j, labels)
        resid = out - e_j
        losses += np.sum(resid * resid, axis=1) / k
        grads += _backward(views, m, cache, 2.0 * resid / k)
    return DiffusionBatchLoss(float(losses.mean()), losses, grads)


def sample(
    params: DenoiserParams,
    schedule: NoiseSchedule,
    n: int,
    rng: RngSeed,
    labels: Optional[np.ndarray | int] = None,
    clamp: tuple[float, float] = (0.0, 1.0),
) -> list[ImageTensor]:
    """Ancestral sampling: estimate the clean image, re-noise, iterate.

    Each of the n chains draws from its own derived stream, so sample i is
    reproducible independent of n. Runs exactly one denoiser evaluation per
    step per image; the final output is the clean estimate from step 1,
    clamped to the pixel range.
    """
    if n < 0:
        raise InvalidArgumentError("sample count must be non-negative")
    m = params.manifest
    if n == 0:
        return []
    if labels is None:
        lab = None
    elif np.isscalar(labels):
        lab = np.full(n, int(labels), dtype=np.int64)
    else:
        lab = np.asarray(labels, dtype=np.int64)
        if lab.shape != (n,):
            raise InvalidArgumentError("labels must match the sample count")

    T = schedule.num_steps
    abars = schedule.alpha_bars
    d = m.data_dim
    # Per-chain noise, drawn up front: x_T first, then one vector per re-noising step.
    noises = np.empty((n, T, d))
    for i in range(n):
        noises[i] = rng.derive(i).generator().standard_normal((T, d))

    views = m.views(params.vector)
    x = noises[:, 0, :]
    x0_hat = x
    for t in range(T, 0, -1):
        out, _ = _forward_cached(views, m, x, np.full(n, t), lab)
        ab_t = abars[t - 1]
        x0_hat = (x - math.sqrt(1.0 - ab_t) * out) / math.sqrt(ab_t)
        if t > 1:
            ab_prev = abars[t - 2]
            e_new = noises[:, T - t + 1, :]
            x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * e_new
    final = np.clip(x0_hat, clamp[0], clamp[1])
    return [
        ImageTensor(width=m.width, height=m.height, channels=m.channels, data=row)
        for row in final
    ]


def save_checkpoint(path, params: DenoiserParams, schedule: NoiseSchedule) -> None:
    """Manifest header + float64 little-endian betas and weights, checksummed."""
    betas = np.asarray(schedule.betas, dtype="<f8")
    vector = np.asarray(params.vector, dtype="<f8")
    payload = betas.tobytes() + vector.tobytes()
    header = {
        "version": 1,
        "manifest": params.manifest.to_dict(),
        "num_steps": schedule.num_steps,
        "num_params": params.manifest.num_params,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path) -> tuple[DenoiserParams, NoiseSchedule]:
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise InvalidArgumentError(f"bad checkpoint magic at byte 0 in {path}")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    manifest = ParamManifest.from_dict(header["manifest"])
    t = int(header["num_steps"])
    p = int(header["num_params"])
    payload = data[off : off + 8 * (t + p)]
    if len(payload) != 8 * (t + p):
        raise InvalidArgumentError(f"checkpoint truncated at byte {off + len(payload)}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise InvalidArgumentError(f"checkpoint payload checksum mismatch in {path}")
    betas = np.frombuffer(payload[: 8 * t], dtype="<f8")
    vector = np.frombuffer(payload[8 * t :], dtype="<f8")
    return DenoiserParams(manifest, vector), NoiseSchedule(tuple(float(b) for b in betas))
