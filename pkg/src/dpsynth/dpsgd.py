"""Differentially private SGD over flat parameter vectors.

Each step Poisson-samples a batch, clips every per-example gradient to an L2
bound, sums, normalizes by the *expected* batch size, perturbs with Gaussian
noise scaled by bound / expected batch, and takes a plain gradient step. The
expected-batch normalization is what ties the added noise to the mechanism's
sensitivity; normalizing by the realized batch size would break the privacy
analysis, so it is never done here. Every step reports exactly one mechanism
event to the ledger.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .accounting import MechanismEvent, PrivacySpec
from .central import poisson_subsample
from .core import InvalidArgumentError, LabeledDataset, RngSeed, gaussian_noise
from .diffusion import DenoiserParams, DiffusionBatchLoss

# engine(params, x0_batch, labels_batch, rng, example_ids) -> DiffusionBatchLoss
LossEngine = Callable[..., DiffusionBatchLoss]


@dataclass(frozen=True)
class DpSgdConfig:
    learning_rate: float
    clip_bound: float
    noise_scale: float
    sampling_rate: float
    steps: int

    def __post_init__(self) -> None:
        if self.learning_rate <= 0.0:
            raise InvalidArgumentError("learning rate must be positive")
        if self.clip_bound <= 0.0:
            raise InvalidArgumentError("clip bound must be positive")
        if self.noise_scale < 0.0:
            raise InvalidArgumentError("noise scale must be non-negative")
        if not (0.0 < self.sampling_rate <= 1.0):
            raise InvalidArgumentError(f"sampling rate must be in (0, 1], got {self.sampling_rate}")
        if self.steps < 0:
            raise InvalidArgumentError("steps must be non-negative")

    def expected_batch(self, dataset_size: int) -> float:
        return self.sampling_rate * dataset_size


def clip_gradient(grad: np.ndarray, clip_bound: float) -> np.ndarray:
    """min(1, clip_bound / ||g||) * g; gradients inside the ball unchanged."""
    if clip_bound <= 0.0:
        raise InvalidArgumentError("clip bound must be positive")
    norm = float(np.linalg.norm(grad))
    if norm <= clip_bound:
        return np.asarray(grad, dtype=np.float64)
    return grad * (clip_bound / norm)


def _clip_rows(grads: np.ndarray, clip_bound: float) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(grads, axis=1)
    factors = np.minimum(1.0, clip_bound / np.maximum(norms, 1e-300))
    clipped = grads * factors[:, None]
    assert np.all(norms * factors <= clip_bound * (1.0 + 1e-9)), "clip bound violated"
    return clipped, norms


@dataclass(frozen=True)
class StepStats:
    step: int
    loss: float
    batch_size: int
    grad_norm_quantiles: tuple[float, float, float]  # pre-clip p10 / p50 / p90


def dp_step(
    params: DenoiserParams,
    ds: LabeledDataset,
    cfg: DpSgdConfig,
    engine: LossEngine,
    rng: RngSeed,
) -> tuple[DenoiserParams, Optional[MechanismEvent], StepStats]:
    """One private update; an empty Poisson batch yields a pure-noise step."""
    expected_batch = cfg.expected_batch(len(ds))
    idx = poisson_subsample(len(ds), cfg.sampling_rate, rng.derive(0))

    if len(idx):
        batch = engine(
            params,
            ds.pixel_matrix()[idx],
            ds.label_array()[idx],
            rng.derive(2),
            example_ids=idx,
        )
        clipped, norms = _clip_rows(batch.per_example_grads, cfg.clip_bound)
        grad_sum = clipped.sum(axis=0)
        loss = batch.loss
        quantiles = tuple(float(v) for v in np.quantile(norms, [0.1, 0.5, 0.9]))
    else:
        grad_sum = np.zeros(params.manifest.num_params)
        loss = float("nan")
        quantiles = (float("nan"),) * 3

    noise = gaussian_noise(
        grad_sum.shape, cfg.clip_bound / expected_batch * cfg.noise_scale, rng.derive(1)
    )
    update = grad_sum / expected_batch + noise
    new_params = params.replace_vector(params.vector - cfg.learning_rate * update)

    event = None
    if cfg.noise_scale > 0.0:
        event = MechanismEvent("dpsgd_step", q=cfg.sampling_rate, sigma=cfg.noise_scale)
    stats = StepStats(step=-1, loss=loss, batch_size=len(idx), grad_norm_quantiles=quantiles)
    return new_params, event, stats


@dataclass
class TrainHooks:
    """Optional callbacks fired during private training."""

    on_step: Optional[Callable[[StepStats], None]] = None
    checkpoint_every: int = 0
    on_checkpoint: Optional[Callable[[int, DenoiserParams], None]] = None
    budget_check_every: int = 200


def train(
    params: DenoiserParams,
    ds: LabeledDataset,
    cfg: DpSgdConfig,
    engine: LossEngine,
    ledger: Optional[PrivacySpec],
    rng: RngSeed,
    hooks: Optional[TrainHooks] = None,
    start_step: int = 0,
) -> DenoiserParams:
    """Run cfg.steps private updates, charging one event per step.

    Step i derives its randomness from (rng, i), so a run resumed from a
    checkpoint at step s reproduces the uninterrupted run bit for bit. The
    ledger is re-converted at checkpoint cadence; exceeding the target budget
    mid-run means calibration was wrong and aborts immediately.
    """
    hooks = hooks or TrainHooks()
    for step in range(start_step, cfg.steps):
        params, event, stats = dp_step(params, ds, cfg, engine, rng.derive(step))
        if ledger is not None and event is not None:
            ledger.record(event)
            check_every = max(1, hooks.budget_check_every)
            if (step + 1) % check_every == 0 or step + 1 == cfg.steps:
                ledger.assert_within_budget()
        if hooks.on_step is not None:
            hooks.on_step(StepStats(step, stats.loss, stats.batch_size, stats.grad_norm_quantiles))
        if hooks.checkpoint_every and (step + 1) % hooks.checkpoint_every == 0:
            if hooks.on_checkpoint is not None:
                hooks.on_checkpoint(step + 1, params)
    return params
