"""End-to-end two-stage driver.

Stage one queries noisy central images (mean or mode) and pre-trains the
denoiser on them with augmentation; only the queries consume privacy budget,
the pre-training itself is post-processing. Stage two calibrates the
fine-tuning noise scale against the remaining budget and runs DP-SGD on the
sensitive images. The driver then samples the model, evaluates fidelity and
utility proxies, and writes a self-describing, re-playable run directory
(config snapshot, ledger, checkpoints, samples, metrics, per-checkpoint
fidelity curve, training log). No artifact embeds wall-clock state, so a
rerun from the snapshot reproduces every byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data_io
from .accounting import PrivacySpec, calibrate_sigma_f
from .augment import AugmentationBag, apply_chain, default_bag
from .central import CentralImageSet, MeanQueryConfig, ModeQueryConfig, query_central_set
from .core import InvalidArgumentError, LabeledDataset, RngSeed
from .diffusion import (
    DenoiserParams,
    NoiseSchedule,
    ParamManifest,
    init_params,
    loss_and_per_example_grads,
    sample,
    save_checkpoint,
)
from .dpsgd import DpSgdConfig, TrainHooks, train
from .metrics import FeatureExtractor, denoising_loss_estimate, frechet_distance, train_probe_classifier


class ConfigError(ValueError):
    """A pipeline configuration failed schema validation."""


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "toy"  # "toy" | "idx" | "container"
    n_per_class: int = 200
    num_classes: int = 10
    height: int = 8
    width: int = 8
    channels: int = 1
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    path: Optional[str] = None


@dataclass(frozen=True)
class CentralConfig:
    kind: str = "mean"  # "mean" | "mode" | "none"
    count: int = 50
    sampling_rate: float = 0.1
    noise_scale: float = 5.0
    norm_bound: Optional[float] = None  # None -> sqrt(H*W*C), the pixel-range bound
    bins: int = 2
    per_label: bool = True
    parallel_accounting: bool = False


@dataclass(frozen=True)
class ModelConfig:
    hidden1: int = 128
    hidden2: int = 128
    time_dim: int = 16
    label_dim: int = 8
    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    reference_steps: int = 1000


@dataclass(frozen=True)
class PrivacyConfig:
    epsilon: float = 10.0
    delta: float = 1e-5


@dataclass(frozen=True)
class WarmupConfig:
    iterations: int = 1500
    batch_size: int = 32
    learning_rate: float = 1e-3
    augment_k: int = 2
    augment_names: Optional[tuple[str, ...]] = None  # None -> full default bag
    augment_ranges: Optional[dict] = None  # name -> (lo, hi) magnitude overrides
    noise_multiplicity: int = 1


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 300
    sampling_rate: float = 0.1
    clip_bound: float = 1.0
    learning_rate: float = 2e-3
    noise_multiplicity: int = 1
    checkpoint_every: int = 100


@dataclass(frozen=True)
class EvalConfig:
    n_synthetic: int = 300
    feature_kind: str = "downsample"
    feature_dim: int = 16
    loss_draws: int = 10_000
    probe: bool = True
    probe_iterations: int = 400


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    central: CentralConfig = field(default_factory=CentralConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        sections = {
            "dataset": DatasetConfig,
            "central": CentralConfig,
            "model": ModelConfig,
            "privacy": PrivacyConfig,
            "warmup": WarmupConfig,
            "finetune": FinetuneConfig,
            "eval": EvalConfig,
        }
        kwargs: dict = {}
        for key, value in raw.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                names = {f.name for f in dataclasses.fields(sections[key])}
                unknown = set(value) - names
                if unknown:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
                if key == "warmup" and value.get("augment_names") is not None:
                    value = dict(value, augment_names=tuple(value["augment_names"]))
                kwargs[key] = sections[key](**value)
            elif key in ("seed", "output_dir"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown top-level key {key!r}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_json_file(cls, path) -> "PipelineConfig":
        with open(path) as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(raw)

    def validate(self) -> None:
        if self.dataset.source not in ("toy", "idx", "container"):
            raise ConfigError(f"unknown dataset source {self.dataset.source!r}")
        if self.dataset.source == "idx" and not (
            self.dataset.images_path and self.dataset.labels_path
        ):
            raise ConfigError("idx datasets need images_path and labels_path")
        if self.dataset.source == "container" and not self.dataset.path:
            raise ConfigError("container datasets need path")
        if self.central.kind not in ("mean", "mode", "none"):
            raise ConfigError(f"unknown central kind {self.central.kind!r}")
        if self.privacy.epsilon <= 0 or not (0 < self.privacy.delta < 1):
            raise ConfigError("privacy target requires epsilon > 0 and delta in (0, 1)")
        for name, v in (
            ("warmup.iterations", self.warmup.iterations),
            ("finetune.steps", self.finetune.steps),
            ("eval.n_synthetic", self.eval.n_synthetic),
        ):
            if v < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not (0 < self.finetune.sampling_rate <= 1):
            raise ConfigError("finetune.sampling_rate must be in (0, 1]")
        if self.central.kind != "none" and not (0 < self.central.sampling_rate <= 1):
            raise ConfigError("central.sampling_rate must be in (0, 1]")


def load_dataset(cfg: DatasetConfig, rng: RngSeed) -> LabeledDataset:
    if cfg.source == "toy":
        return data_io.generate_toy_glyphs(
            cfg.n_per_class,
            cfg.num_classes,
            (cfg.height, cfg.width, cfg.channels),
            rng,
        )
    if cfg.source == "idx":
        return data_io.read_idx(cfg.images_path, cfg.labels_path)
    return data_io.load_container(cfg.path).to_dataset()


def build_manifest(cfg: ModelConfig, shape: tuple[int, int, int], num_classes: int) -> ParamManifest:
    h, w, c = shape
    return ParamManifest(
        height=h,
        width=w,
        channels=c,
        hidden1=cfg.hidden1,
        hidden2=cfg.hidden2,
        time_dim=cfg.time_dim,
        num_classes=num_classes,
        label_dim=cfg.label_dim,
    )


def build_schedule(cfg: ModelConfig) -> NoiseSchedule:
    return NoiseSchedule.linear(
        cfg.diffusion_steps, cfg.beta_start, cfg.beta_end, cfg.reference_steps
    )


def _central_query_config(cfg: CentralConfig, shape: tuple[int, int, int]):
    h, w, c = shape
    if cfg.kind == "mean":
        bound = cfg.norm_bound if cfg.norm_bound is not None else math.sqrt(h * w * c)
        return MeanQueryConfig(cfg.count, cfg.sampling_rate, cfg.noise_scale, bound)
    return ModeQueryConfig(cfg.count, cfg.sampling_rate, cfg.noise_scale, cfg.bins)


def warmup_train(
    params: DenoiserParams,
    pixels: np.ndarray,
    labels: Optional[np.ndarray],
    schedule: NoiseSchedule,
    cfg: WarmupConfig,
    rng: RngSeed,
) -> DenoiserParams:
    """Plain (non-private) SGD on central images with chained augmentation."""
    if cfg.iterations == 0 or pixels.shape[0] == 0:
        return params
    bag = default_bag(cfg.augment_k)
    if cfg.augment_names is not None:
        bag = bag.subset(list(cfg.augment_names))
    if cfg.augment_ranges is not None:
        bag = bag.with_ranges({k: tuple(v) for k, v in cfg.augment_ranges.items()})
    m = params.manifest
    shape3d = (m.height, m.width, m.channels)
    n = pixels.shape[0]
    for it in range(cfg.iterations):
        gen = rng.derive(it).generator()
        idx = gen.integers(0, n, size=cfg.batch_size)
        batch = np.empty((cfg.batch_size, pixels.shape[1]))
        for j, i in enumerate(idx):
            batch[j] = apply_chain(pixels[i].reshape(shape3d), bag, gen).reshape(-1)
        batch_labels = labels[idx] if labels is not None else None
        result = loss_and_per_example_grads(
            params,
            batch,
            batch_labels,
            schedule,
            rng.derive(it, 1),
            noise_multiplicity=cfg.noise_multiplicity,
        )
        grad = result.per_example_grads.mean(axis=0)
        params = params.replace_vector(params.vector - cfg.learning_rate * grad)
    return params


def run_stage1(
    cfg: PipelineConfig,
    ds: LabeledDataset,
    params: DenoiserParams,
    ledger: PrivacySpec,
    rng: RngSeed,
    schedule: NoiseSchedule,
) -> tuple[DenoiserParams, Optional[CentralImageSet]]:
    """Query central images (charged to the ledger) and pre-train on them."""
    if cfg.central.kind == "none":
        return params, None
    qcfg = _central_query_config(cfg.central, ds.image_shape)
    central = query_central_set(
        ds,
        cfg.central.kind,
        qcfg,
        rng.derive(1),
        per_label=cfg.central.per_label,
        parallel_accounting=cfg.central.parallel_accounting,
    )
    ledger.record(*central.events)
    ledger.assert_within_budget()

    # Noisy central images can stray outside the pixel range; clamping is
    # post-processing and keeps the augmentation range contract intact.
    warm_pixels = np.clip(central.pixel_matrix(), 0.0, 1.0)
    warm_labels = np.asarray(central.labels, dtype=np.int64) if central.labels else None
    params = warmup_train(params, warm_pixels, warm_labels, schedule, cfg.warmup, rng.derive(2))
    return params, central


def run_stage2(
    cfg: PipelineConfig,
    ds: LabeledDataset,
    params: DenoiserParams,
    ledger: PrivacySpec,
    rng: RngSeed,
    schedule: NoiseSchedule,
    hooks: Optional[TrainHooks] = None,
) -> tuple[DenoiserParams, float]:
    """Calibrate the fine-tune noise scale, then train privately."""
    sigma_f = calibrate_sigma_f(
        list(ledger.events),
        cfg.finetune.steps,
        cfg.finetune.sampling_rate,
        ledger.target_epsilon,
        ledger.delta,
        orders=ledger.orders,
    )
    ledger.sigma_f = sigma_f
    if cfg.finetune.steps == 0:
        return params, sigma_f
    sgd = DpSgdConfig(
        learning_rate=cfg.finetune.learning_rate,
        clip_bound=cfg.finetune.clip_bound,
        noise_scale=sigma_f,
        sampling_rate=cfg.finetune.sampling_rate,
        steps=cfg.finetune.steps,
    )

    def engine(p, x0, labels, erng, example_ids=None):
        return loss_and_per_example_grads(
            p,
            x0,
            labels,
            schedule,
            erng,
            noise_multiplicity=cfg.finetune.noise_multiplicity,
            example_ids=example_ids,
        )

    params = train(params, ds, sgd, engine, ledger, rng.derive(3), hooks)
    return params, sigma_f


def _balanced_labels(n: int, num_classes: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64) % num_classes


def run_all(cfg: PipelineConfig) -> str:
    """Full workflow; returns the run directory path."""
    cfg.validate()
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        f.write(cfg.to_json() + "\n")

    rng = RngSeed(cfg.seed)
    ds = load_dataset(cfg.dataset, rng.derive(0))
    manifest = build_manifest(cfg.model, ds.image_shape, ds.num_classes)
    schedule = build_schedule(cfg.model)
    ledger = PrivacySpec(cfg.privacy.epsilon, cfg.privacy.delta)
    params = init_params(manifest, rng.derive(10))

    params, central = run_stage1(cfg, ds, params, ledger, rng, schedule)
    save_checkpoint(os.path.join(out, "warmup.ckpt"), params, schedule)
    if central is not None:
        data_io.save_container(
            os.path.join(out, "central.dpc"),
            "central",
            central.pixel_matrix(),
            ds.image_shape,
            labels=np.asarray(central.labels, dtype=np.int64) if central.labels else None,
            provenance={
                "kind": central.kind,
                "config": central.config,
                "events": [ev.to_dict() for ev in central.events],
            },
        )

    extractor = FeatureExtractor(cfg.eval.feature_kind, cfg.eval.feature_dim)
    if cfg.eval.feature_kind == "pca":
        extractor.fit(ds.pixel_matrix())
    eval_rng = rng.derive(1000)
    shape = ds.image_shape

    def fidelity(p: DenoiserParams, n: int, sample_rng: RngSeed) -> float:
        n = max(n, extractor.dim + 1)  # Gaussian fit needs more samples than dims
        labels = _balanced_labels(n, ds.num_classes)
        samples = sample(p, schedule, n, sample_rng, labels=labels)
        synth = np.stack([s.data for s in samples])
        return frechet_distance(
            extractor.extract(synth, shape), extractor.extract(ds.pixel_matrix(), shape)
        )

    loss_p_start = denoising_loss_estimate(
        params, schedule, ds, eval_rng.derive(0), draws=cfg.eval.loss_draws
    )
    frechet_warmup = fidelity(params, cfg.eval.n_synthetic, eval_rng.derive(1))

    curve_rows: list[tuple[int, float]] = []
    log_lines: list[str] = []

    def on_step(stats):
        line = (
            f"step={stats.step} loss={stats.loss:.6f} batch={stats.batch_size} "
            f"gnorm_p10={stats.grad_norm_quantiles[0]:.6f} "
            f"gnorm_p50={stats.grad_norm_quantiles[1]:.6f} "
            f"gnorm_p90={stats.grad_norm_quantiles[2]:.6f}"
        )
        log_lines.append(line)

    def on_checkpoint(step: int, p: DenoiserParams):
        eps_now, _ = ledger.epsilon()
        curve_rows.append((step, fidelity(p, max(ds.num_classes + 1, cfg.eval.n_synthetic // 2), eval_rng.derive(2, step))))
        log_lines.append(f"checkpoint step={step} epsilon={eps_now:.6f}")
        save_checkpoint(os.path.join(out, "latest.ckpt"), p, schedule)

    hooks = TrainHooks(
        on_step=on_step,
        checkpoint_every=cfg.finetune.checkpoint_every,
        on_checkpoint=on_checkpoint,
        budget_check_every=max(1, cfg.finetune.checkpoint_every),
    )
    params, sigma_f = run_stage2(cfg, ds, params, ledger, rng, schedule, hooks)
    save_checkpoint(os.path.join(out, "final.ckpt"), params, schedule)

    labels = _balanced_labels(cfg.eval.n_synthetic, ds.num_classes)
    samples = sample(params, schedule, cfg.eval.n_synthetic, eval_rng.derive(3), labels=labels)
    synth_pixels = np.stack([s.data for s in samples]) if samples else np.zeros((0, manifest.data_dim))
    data_io.save_container(
        os.path.join(out, "samples.dpc"),
        "synthetic",
        synth_pixels,
        shape,
        labels=labels,
        provenance={"seed": cfg.seed, "n": cfg.eval.n_synthetic},
    )

    frechet_final = fidelity(params, cfg.eval.n_synthetic, eval_rng.derive(3))
    acc = None
    if cfg.eval.probe and cfg.eval.n_synthetic >= 2 * ds.num_classes:
        synthetic_ds = LabeledDataset.from_arrays(
            synth_pixels, labels.tolist(), ds.num_classes, shape
        )
        acc = train_probe_classifier(synthetic_ds, ds, iterations=cfg.eval.probe_iterations)

    eps_final, best_alpha = ledger.epsilon()
    metrics = {
        "loss_p_finetune_start": loss_p_start,
        "frechet_warmup": frechet_warmup,
        "frechet_final": frechet_final,
        "acc_probe": acc,
        "sigma_f": sigma_f,
        "epsilon_spent": eps_final,
        "best_alpha": best_alpha,
        "epsilon_target": cfg.privacy.epsilon,
        "delta": cfg.privacy.delta,
        "num_events": len(ledger.events),
    }
    with open(os.path.join(out, "metrics.json"), "w") as f:
        json.dump(metrics, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(os.path.join(out, "ledger.json"), "w") as f:
        json.dump(ledger.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")
    with open(os.path.join(out, "curve.csv"), "w") as f:
        f.write("step,frechet\n")
        for step, value in curve_rows:
            f.write(f"{step},{value:.9g}\n")
    with open(os.path.join(out, "train_log.txt"), "w") as f:
        f.write("\n".join(log_lines) + ("\n" if log_lines else ""))
    return out


def compare_runs(run_a: str, run_b: str, csv_path: str) -> dict:
    """Side-by-side metric comparison CSV for two finished run directories."""
    rows = {}
    for name, run in (("a", run_a), ("b", run_b)):
        with open(os.path.join(run, "metrics.json")) as f:
            rows[name] = json.load(f)
    keys = sorted(set(rows["a"]) | set(rows["b"]))
    with open(csv_path, "w") as f:
        f.write("metric,run_a,run_b\n")
        for k in keys:
            f.write(f"{k},{rows['a'].get(k)},{rows['b'].get(k)}\n")
    return rows
