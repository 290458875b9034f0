"""Command-line interface.

Subcommands mirror the pipeline stages: `account`, `ingest`, `make-toy`,
`query-central`, `warmup`, `finetune`, `sample`, `evaluate`, `run-all`.
Exit codes: 0 success, 1 user error (bad arguments, files, or budgets),
2 internal error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import traceback

import numpy as np

from . import data_io, pipeline
from .accounting import (
    BudgetExhaustedError,
    MechanismEvent,
    PrivacySpec,
    calibrate_sigma_f,
    compose,
    rdp_to_dp,
)
from .core import InvalidArgumentError, LabeledDataset, RngSeed
from .diffusion import load_checkpoint, sample
from .metrics import FeatureExtractor, frechet_distance, train_probe_classifier
from .pipeline import ConfigError, PipelineConfig

USER_ERRORS = (
    InvalidArgumentError,
    BudgetExhaustedError,
    ConfigError,
    data_io.FormatError,
    FileNotFoundError,
)


def _print_kv(key: str, value) -> None:
    print(f"{key}={value}")


def cmd_account(args) -> int:
    with open(args.spec) as f:
        raw = json.load(f)
    target = float(raw["target_epsilon"])
    delta = float(raw["delta"])
    events = [MechanismEvent.from_dict(d) for d in raw.get("events", [])]
    curve = compose(events)
    if not args.no_curve:
        for a, g in zip(curve.orders, curve.gammas):
            _print_kv(f"gamma[{a}]", f"{g:.12g}")
    if events:
        eps, alpha = rdp_to_dp(curve, delta)
        _print_kv("epsilon", f"{eps:.9g}")
        _print_kv("best_alpha", alpha)
    fine = raw.get("fine_tune")
    if fine:
        sigma = calibrate_sigma_f(
            events, int(fine["steps"]), float(fine["sampling_rate"]), target, delta
        )
        _print_kv("sigma_f", f"{sigma:.9g}")
        total = events + [
            MechanismEvent(
                "dpsgd_step",
                q=float(fine["sampling_rate"]),
                sigma=sigma,
                repetitions=int(fine["steps"]),
            )
        ]
        eps_total, alpha_total = rdp_to_dp(compose(total), delta)
        _print_kv("epsilon_total", f"{eps_total:.9g}")
        _print_kv("best_alpha_total", alpha_total)
    _print_kv("target_epsilon", target)
    _print_kv("delta", delta)
    return 0


def cmd_ingest(args) -> int:
    ds = data_io.read_idx(args.images, args.labels)
    h, w, c = ds.image_shape
    data_io.save_container(
        args.out,
        "sensitive",
        ds.pixel_matrix(),
        ds.image_shape,
        labels=ds.label_array(),
        provenance={"source": "idx", "images": str(args.images), "labels": str(args.labels)},
    )
    _print_kv("count", len(ds))
    _print_kv("shape", f"{h}x{w}x{c}")
    _print_kv("num_classes", ds.num_classes)
    _print_kv("out", args.out)
    return 0


def cmd_make_toy(args) -> int:
    ds = data_io.generate_toy_glyphs(
        args.per_class, args.classes, (args.size, args.size, 1), RngSeed(args.seed)
    )
    data_io.save_container(
        args.out,
        "sensitive",
        ds.pixel_matrix(),
        ds.image_shape,
        labels=ds.label_array(),
        provenance={"source": "toy", "per_class": args.per_class, "seed": args.seed},
    )
    _print_kv("count", len(ds))
    _print_kv("out", args.out)
    return 0


def cmd_query_central(args) -> int:
    from .central import query_central_set

    ds = data_io.load_container(args.data).to_dataset()
    shape = ds.image_shape
    if args.kind == "mean":
        bound = args.norm_bound if args.norm_bound is not None else math.sqrt(np.prod(shape))
        qcfg = pipeline.MeanQueryConfig(args.count, args.sampling_rate, args.noise_scale, bound)
    else:
        qcfg = pipeline.ModeQueryConfig(args.count, args.sampling_rate, args.noise_scale, args.bins)
    central = query_central_set(
        ds,
        args.kind,
        qcfg,
        RngSeed(args.seed).derive(1),
        per_label=args.per_label,
        parallel_accounting=args.parallel_accounting,
    )
    provenance = {
        "kind": central.kind,
        "config": central.config,
        "events": [ev.to_dict() for ev in central.events],
    }
    data_io.save_container(
        args.out,
        "central",
        central.pixel_matrix(),
        shape,
        labels=np.asarray(central.labels, dtype=np.int64) if central.labels else None,
        provenance=provenance,
    )
    if args.events_out:
        with open(args.events_out, "w") as f:
            json.dump([ev.to_dict() for ev in central.events], f, indent=2, sort_keys=True)
            f.write("\n")
    _print_kv("count", len(central))
    _print_kv("events", len(central.events))
    _print_kv("out", args.out)
    return 0


def _load_config(args) -> PipelineConfig:
    import dataclasses

    cfg = PipelineConfig.from_json_file(args.config)
    if getattr(args, "output_dir", None):
        cfg = dataclasses.replace(cfg, output_dir=args.output_dir)
    return cfg


def cmd_run_all(args) -> int:
    cfg = _load_config(args)
    out = pipeline.run_all(cfg)
    with open(f"{out}/metrics.json") as f:
        for key, value in sorted(json.load(f).items()):
            _print_kv(key, value)
    _print_kv("run_dir", out)
    return 0


def cmd_warmup(args) -> int:
    from .diffusion import save_checkpoint

    cfg = _load_config(args)
    rng = RngSeed(cfg.seed)
    ds = pipeline.load_dataset(cfg.dataset, rng.derive(0))
    manifest = pipeline.build_manifest(cfg.model, ds.image_shape, ds.num_classes)
    schedule = pipeline.build_schedule(cfg.model)
    ledger = PrivacySpec(cfg.privacy.epsilon, cfg.privacy.delta)
    params = pipeline.init_params(manifest, rng.derive(10))
    params, central = pipeline.run_stage1(cfg, ds, params, ledger, rng, schedule)
    save_checkpoint(args.out, params, schedule)
    with open(args.ledger_out, "w") as f:
        json.dump(ledger.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    _print_kv("central_images", 0 if central is None else len(central))
    _print_kv("checkpoint", args.out)
    _print_kv("ledger", args.ledger_out)
    return 0


def cmd_finetune(args) -> int:
    from .diffusion import save_checkpoint

    cfg = _load_config(args)
    rng = RngSeed(cfg.seed)
    ds = pipeline.load_dataset(cfg.dataset, rng.derive(0))
    schedule = pipeline.build_schedule(cfg.model)
    params, ck_schedule = load_checkpoint(args.checkpoint)
    if ck_schedule.betas != schedule.betas:
        schedule = ck_schedule
    ledger = PrivacySpec(cfg.privacy.epsilon, cfg.privacy.delta)
    if args.ledger:
        with open(args.ledger) as f:
            for d in json.load(f)["events"]:
                ledger.record(MechanismEvent.from_dict(d))
    params, sigma_f = pipeline.run_stage2(cfg, ds, params, ledger, rng, schedule)
    save_checkpoint(args.out, params, schedule)
    eps, alpha = ledger.epsilon()
    _print_kv("sigma_f", f"{sigma_f:.9g}")
    _print_kv("epsilon_spent", f"{eps:.9g}")
    _print_kv("best_alpha", alpha)
    _print_kv("checkpoint", args.out)
    return 0


def cmd_sample(args) -> int:
    params, schedule = load_checkpoint(args.checkpoint)
    m = params.manifest
    labels = None
    if args.conditional:
        labels = np.arange(args.count, dtype=np.int64) % m.num_classes
    images = sample(params, schedule, args.count, RngSeed(args.seed), labels=labels)
    pixels = np.stack([im.data for im in images]) if images else np.zeros((0, m.data_dim))
    data_io.save_container(
        args.out,
        "synthetic",
        pixels,
        (m.height, m.width, m.channels),
        labels=labels,
        provenance={"checkpoint": str(args.checkpoint), "seed": args.seed},
    )
    _print_kv("count", args.count)
    _print_kv("out", args.out)
    return 0


def cmd_evaluate(args) -> int:
    synth = data_io.load_container(args.synthetic)
    real = data_io.load_container(args.real)
    shape = (real.height, real.width, real.channels)
    extractor = FeatureExtractor(args.feature, args.feature_dim)
    if args.feature == "pca":
        extractor.fit(real.pixels)
    fd = frechet_distance(
        extractor.extract(synth.pixels, shape), extractor.extract(real.pixels, shape)
    )
    _print_kv("frechet", f"{fd:.9g}")
    _print_kv("n_real", real.count)
    _print_kv("n_synth", synth.count)
    if synth.labels is not None and real.labels is not None:
        num_classes = int(max(synth.labels.max(), real.labels.max())) + 1
        acc = train_probe_classifier(
            LabeledDataset.from_arrays(
                np.clip(synth.pixels, 0, 1), synth.labels.tolist(), num_classes, shape
            ),
            LabeledDataset.from_arrays(
                np.clip(real.pixels, 0, 1), real.labels.tolist(), num_classes, shape
            ),
        )
        _print_kv("acc", f"{acc:.6f}")
    if args.checkpoint:
        from .metrics import denoising_loss_estimate

        params, schedule = load_checkpoint(args.checkpoint)
        real_ds = real.to_dataset() if real.labels is not None else None
        if real_ds is None:
            raise InvalidArgumentError("loss estimation needs a labeled real container")
        loss_p = denoising_loss_estimate(
            params, schedule, real_ds, RngSeed(args.seed), draws=args.loss_draws
        )
        _print_kv("loss_p", f"{loss_p:.9g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpsynth", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("account", help="price a privacy spec and calibrate the fine-tune noise")
    a.add_argument("--spec", required=True, help="JSON privacy spec file")
    a.add_argument("--no-curve", action="store_true", help="suppress per-order gamma lines")
    a.set_defaults(fn=cmd_account)

    a = sub.add_parser("ingest", help="convert an IDX pair into a container")
    a.add_argument("--images", required=True)
    a.add_argument("--labels", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ingest)

    a = sub.add_parser("make-toy", help="generate the toy glyph dataset")
    a.add_argument("--out", required=True)
    a.add_argument("--per-class", type=int, default=200)
    a.add_argument("--classes", type=int, default=10)
    a.add_argument("--size", type=int, default=8)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(fn=cmd_make_toy)

    a = sub.add_parser("query-central", help="query noisy central images")
    a.add_argument("--data", required=True)
    a.add_argument("--kind", choices=["mean", "mode"], required=True)
    a.add_argument("--count", type=int, required=True)
    a.add_argument("--sampling-rate", type=float, required=True)
    a.add_argument("--noise-scale", type=float, required=True)
    a.add_argument("--norm-bound", type=float, default=None)
    a.add_argument("--bins", type=int, default=2)
    a.add_argument("--per-label", action="store_true")
    a.add_argument("--parallel-accounting", action="store_true")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--events-out", default=None)
    a.set_defaults(fn=cmd_query_central)

    a = sub.add_parser("warmup", help="stage one: query and pre-train")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--ledger-out", required=True)
    a.set_defaults(fn=cmd_warmup)

    a = sub.add_parser("finetune", help="stage two: calibrate and train privately")
    a.add_argument("--config", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--ledger", default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_finetune)

    a = sub.add_parser("sample", help="generate images from a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--count", type=int, default=100)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--conditional", action="store_true")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_sample)

    a = sub.add_parser("evaluate", help="fidelity and utility of a synthetic container")
    a.add_argument("--synthetic", required=True)
    a.add_argument("--real", required=True)
    a.add_argument("--feature", choices=["downsample", "pca"], default="downsample")
    a.add_argument("--feature-dim", type=int, default=16)
    a.add_argument("--checkpoint", default=None, help="also report the denoising loss on the real data")
    a.add_argument("--loss-draws", type=int, default=10_000)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(fn=cmd_evaluate)

    a = sub.add_parser("run-all", help="full two-stage workflow from a config file")
    a.add_argument("--config", required=True)
    a.add_argument("--output-dir", default=None)
    a.set_defaults(fn=cmd_run_all)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
