"""Command-line interface tying the pipeline into reproducible experiments.

Subcommands: zoo-train, stats, generate, t2i, evaluate, ablate.
Option precedence is command-line flag > config-file value > default; the
effective configuration is snapshotted into every output directory.
Exit codes: 0 success, 2 configuration error, 3 numerical failure (with
the last valid checkpoint preserved).
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch

from .errors import ClassgenError, ConfigError, NumericalError
from .losses import (LossWeights, estimate_class_statistics, load_stats_dir)
from .metrics import (diversity_score, frechet_distance, gaussian_summary,
                      inception_score)
from .models import EnsembleSpec, make_ensemble, text_to_classifier
from .report import (save_contact_sheet, save_loss_curves, save_metric_bars,
                     write_delimited)
from .sampler import (RunRecord, SamplerConfig, progressive_generate)
from . import zoo

# name -> (parser, default, help)
OPTIONS = {
    "dataset": (str, "digits28", "dataset name or path"),
    "model": (str, None, "classifier artifact path"),
    "model2": (str, None, "second classifier for the ensemble axis"),
    "recon": (str, None, "reconstruction-module artifact path"),
    "dual_encoder": (str, None, "dual-encoder artifact path"),
    "stats_dir": (str, None, "directory of per-class statistics files"),
    "out": (str, None, "output directory or file"),
    "seed": (int, 0, "run seed (mandatory for reproducibility)"),
    "workers": (int, 1, "parallel independent runs"),
    "target_class": (int, 0, "class index to generate"),
    "classes": (str, "all", "class list for stats, e.g. 0,1,2 or all"),
    "prompt": (str, None, "target text prompt"),
    "contrast_prompts": (str, None, "comma-separated contrast prompts"),
    "steps": (int, 2000, "total sampling steps across stages"),
    "stages": (str, None, "explicit schedule, e.g. 14:1000,28:1000"),
    "mask_ratio": (float, 0.75, "fraction of patches masked per step"),
    "blur_sigma": (float, None, "gradient blur sigma (default 0; 1.0 in fast mode)"),
    "w_cls": (float, 1.0, "classification loss weight"),
    "w_div": (float, 0.02, "diversity loss weight"),
    "w_dist": (float, 0.005, "distribution loss weight"),
    "step_size": (float, 0.05, "optimizer step size"),
    "optimizer": (str, "adam", "adam or sgd"),
    "batch_size": (int, 16, "samples generated per run"),
    "dtype": (str, "float32", "sampling precision"),
    "fast": (bool, False, "fast mode: half the steps, blur on"),
    "preset": (str, "small-convolutional", "zoo architecture preset"),
    "epochs": (int, 30, "training epochs"),
    "lr": (float, 2e-3, "training learning rate"),
    "train_batch_size": (int, 64, "training batch size"),
    "masks_per_image": (int, 1, "random masks per image for statistics"),
    "axis": (str, None, "ablation axis"),
    "run": (str, None, "comma-separated run directories"),
    "baseline": (bool, False, "drop the reconstruction module (direct optimization)"),
}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _parse_value(name: str, raw: str):
    kind = OPTIONS[name][0]
    if kind is bool:
        low = raw.strip().lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"config key {name}: expected boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {name}: {exc}") from exc


def read_config_file(path: str) -> dict:
    """Flat 'key value' lines; unknown keys are errors (fail-closed)."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition(" ")
            key = key.replace("-", "_")
            if key not in OPTIONS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _parse_value(key, raw)
    return out


class Options:
    """Resolved option values with flag > file > default precedence."""

    def __init__(self, args: argparse.Namespace):
        self._cli = vars(args)
        cfg_path = self._cli.get("config")
        self._file = read_config_file(cfg_path) if cfg_path else {}

    def __getattr__(self, name):
        if name not in OPTIONS:
            raise AttributeError(name)
        v = self._cli.get(name)
        if v is not None:
            return v
        if name in self._file:
            return self._file[name]
        return OPTIONS[name][1]

    def require(self, *names):
        for name in names:
            if getattr(self, name) is None:
                flag = "--" + name.replace("_", "-")
                raise ConfigError(f"missing required option {flag}")

    def snapshot(self, names) -> dict:
        return {n: getattr(self, n) for n in names}


def _write_snapshot(out_dir: str, values: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "invocation.txt"), "w") as f:
        for k, v in values.items():
            f.write(f"{k} {v}\n")


def _add(parser, *names, flag_type=None):
    for name in names:
        kind, _, help_text = OPTIONS[name]
        flag = "--" + name.replace("_", "-")
        if name == "target_class":
            flag = "--class"
        if kind is bool:
            parser.add_argument(flag, dest=name, action="store_const", const=True,
                                default=None, help=help_text)
        else:
            parser.add_argument(flag, dest=name, type=kind, default=None,
                                help=help_text)


def default_stages(final_resolution: int, total_steps: int):
    """Half the budget at half resolution, the rest at full resolution."""
    if final_resolution % 2 != 0:
        raise ConfigError(f"final resolution must be even, got {final_resolution}")
    first = total_steps // 2
    return ((final_resolution // 2, first), (final_resolution, total_steps - first))


def build_sampler_config(opts: Options, final_resolution: int, channels: int,
                         target_class: int) -> SamplerConfig:
    if opts.stages is not None:
        stages = tuple(
            (int(r), int(s)) for r, _, s in
            (part.partition(":") for part in opts.stages.split(","))
        )
    else:
        stages = default_stages(final_resolution, opts.steps)
    blur = opts.blur_sigma
    if opts.fast:
        stages = tuple((r, s // 2) for r, s in stages)
        if blur is None:
            blur = 1.0
    return SamplerConfig(
        stages=stages,
        step_size=opts.step_size,
        optimizer=opts.optimizer,
        mask_ratio=opts.mask_ratio,
        blur_sigma=blur if blur is not None else 0.0,
        weights=LossWeights(opts.w_cls, opts.w_div, opts.w_dist),
        seed=opts.seed,
        batch_size=opts.batch_size,
        target_class=target_class,
        fast_mode=bool(opts.fast),
        channels=channels,
        dtype=opts.dtype,
    )


# ---------------------------------------------------------------- commands

def cmd_zoo_train(opts: Options) -> int:
    opts.require("out")
    dataset = zoo.load_dataset(opts.dataset)
    config = zoo.TrainConfig(dataset=opts.dataset, epochs=opts.epochs,
                             batch_size=opts.train_batch_size, lr=opts.lr,
                             preset=opts.preset, seed=opts.seed)
    preset = opts.preset
    if preset in zoo.CLASSIFIER_PRESETS:
        model, report = zoo.train_classifier(dataset, config)
        zoo.save_classifier(model, opts.out, preset, report)
        print(f"classifier {preset}: holdout accuracy "
              f"{report['holdout_accuracy']:.4f} "
              f"(floor {report['accuracy_floor']}, passed={report['passed']})")
    elif preset == "reconstruction":
        module, report = zoo.train_masked_autoencoder(dataset, config, opts.mask_ratio)
        zoo.save_reconstruction(module, opts.out, report)
        print(f"reconstruction: holdout masked error {report['holdout_error']:.6f} "
              f"(untrained {report['untrained_holdout_error']:.6f}, "
              f"passed={report['passed']})")
    elif preset == "dual-encoder":
        (img_enc, txt_enc), report = zoo.train_dual_encoder(dataset, config)
        zoo.save_dual_encoder(img_enc, txt_enc, opts.out, report, dataset.class_names)
        print(f"dual encoder: holdout retrieval top-1 "
              f"{report['holdout_retrieval_top1']:.4f} (passed={report['passed']})")
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    return 0


def _feature_model(opts: Options):
    """The model whose features drive stats: a classifier or a dual encoder."""
    if opts.dual_encoder is not None:
        img_enc, txt_enc = zoo.load_dual_encoder(opts.dual_encoder)
        names = zoo.load_model(opts.dual_encoder)[1]["meta"]["class_names"]
        return text_to_classifier(img_enc, txt_enc, names)
    opts.require("model")
    return zoo.load_classifier(opts.model)


def cmd_stats(opts: Options) -> int:
    opts.require("out")
    dataset = zoo.load_dataset(opts.dataset)
    model = _feature_model(opts)
    recon = zoo.load_reconstruction(opts.recon) if opts.recon else None
    if opts.classes == "all":
        class_ids = sorted(set(dataset.labels.tolist()))
    else:
        class_ids = [int(c) for c in opts.classes.split(",")]
    os.makedirs(opts.out, exist_ok=True)
    _write_snapshot(opts.out, opts.snapshot(
        ["dataset", "model", "dual_encoder", "recon", "classes", "mask_ratio",
         "masks_per_image", "seed"]))
    for c in class_ids:
        stats = estimate_class_statistics(dataset, c, model, recon,
                                          opts.mask_ratio, opts.seed,
                                          opts.masks_per_image)
        stats.save(os.path.join(opts.out, f"stats_{c:03d}.txt"))
        print(f"class {c}: {stats.count} feature rows, dim {stats.dim}")
    return 0


def _run_and_save(config: SamplerConfig, classifier, recon, stats, out_dir: str):
    try:
        batch, record = progressive_generate(config, classifier, recon, stats)
    except NumericalError as exc:
        if getattr(exc, "record", None) is not None and out_dir:
            exc.record.save(out_dir)
        raise
    record.save(out_dir)
    save_loss_curves(record, os.path.join(out_dir, "loss_curves.png"))
    save_contact_sheet(record.final_images, os.path.join(out_dir, "grid.png"),
                       title=f"class {config.target_class}, seed {config.seed}")
    return batch, record


def cmd_generate(opts: Options) -> int:
    opts.require("model", "out")
    classifier = zoo.load_classifier(opts.model)
    if opts.model2 is not None:
        second = zoo.load_classifier(opts.model2)
        classifier = make_ensemble(EnsembleSpec([classifier, second], [0.5, 0.5]))
    recon = None if opts.baseline else zoo.load_reconstruction(opts.recon) if opts.recon else None
    if not opts.baseline and recon is None:
        raise ConfigError("--recon is required unless --baseline is set")
    config = build_sampler_config(opts, classifier.expected_input_resolution,
                                  classifier.in_channels, opts.target_class)
    stats = None
    if config.weights.w_dist > 0:
        if opts.stats_dir is None:
            raise ConfigError("--stats-dir is required when w_dist > 0")
        stats = load_stats_dir(opts.stats_dir)[config.target_class]
    _write_snapshot(opts.out, opts.snapshot(
        ["model", "model2", "recon", "stats_dir", "seed", "target_class",
         "baseline", "fast"]))
    _, record = _run_and_save(config, classifier, recon, stats, opts.out)
    print(f"generated {config.batch_size} samples of class {config.target_class} "
          f"in {record.wall_time:.1f}s -> {opts.out}")
    return 0


def cmd_t2i(opts: Options) -> int:
    opts.require("dual_encoder", "prompt", "out")
    img_enc, txt_enc = zoo.load_dual_encoder(opts.dual_encoder)
    meta = zoo.load_model(opts.dual_encoder)[1]["meta"]
    if opts.contrast_prompts is not None:
        prompts = [p.strip() for p in opts.contrast_prompts.split(",")]
    else:
        prompts = list(meta["class_names"])
    if opts.prompt not in prompts:
        prompts = [opts.prompt] + prompts
    target = prompts.index(opts.prompt)
    classifier = text_to_classifier(img_enc, txt_enc, prompts)
    recon = zoo.load_reconstruction(opts.recon) if opts.recon else None
    if recon is None:
        raise ConfigError("--recon is required for t2i generation")
    config = build_sampler_config(opts, classifier.expected_input_resolution,
                                  classifier.in_channels, target)
    stats = None
    if config.weights.w_dist > 0:
        if opts.stats_dir is None:
            raise ConfigError("--stats-dir is required when w_dist > 0 "
                              "(compute it with: classgen stats --dual-encoder ...)")
        stats = load_stats_dir(opts.stats_dir)[target]
    _write_snapshot(opts.out, opts.snapshot(
        ["dual_encoder", "recon", "stats_dir", "prompt", "seed"]))
    _, record = _run_and_save(config, classifier, recon, stats, opts.out)
    print(f"generated {config.batch_size} samples for prompt {opts.prompt!r} "
          f"in {record.wall_time:.1f}s -> {opts.out}")
    return 0


def _features_and_probs(model, images: np.ndarray):
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        x = torch.from_numpy(images).to(dtype)
        feats = model.features(x)
        probs = torch.softmax(model.logits_from_features(feats), dim=1)
    return feats.numpy(), probs.numpy()


def cmd_evaluate(opts: Options) -> int:
    opts.require("model", "out")
    runs = [r for r in (opts.run or "").split(",") if r]
    if not runs:
        raise ConfigError("--run is required (comma-separated run directories)")
    model = zoo.load_classifier(opts.model)
    dataset = zoo.load_dataset(opts.dataset)
    generated = np.concatenate([RunRecord.load(r).final_images for r in runs])

    rng = np.random.default_rng([opts.seed, 0x6576])
    perm = rng.permutation(len(dataset))
    half = len(dataset) // 2
    real_a, real_b = dataset.images[perm[:half]], dataset.images[perm[half:]]
    noise = rng.random(generated.shape)

    feats_a, _ = _features_and_probs(model, real_a)
    feats_b, _ = _features_and_probs(model, real_b)
    feats_gen, probs_gen = _features_and_probs(model, generated)
    feats_noise, _ = _features_and_probs(model, noise)

    fid_real = frechet_distance(gaussian_summary(feats_a), gaussian_summary(feats_b))
    sum_real = gaussian_summary(np.concatenate([feats_a, feats_b]))
    fid_gen = frechet_distance(gaussian_summary(feats_gen), sum_real)
    fid_noise = frechet_distance(gaussian_summary(feats_noise), sum_real)
    splits = min(10, len(generated))
    is_mean, is_std = inception_score(probs_gen, splits)
    div = diversity_score(feats_gen)

    os.makedirs(opts.out, exist_ok=True)
    _write_snapshot(opts.out, {"runs": ",".join(runs), "dataset": opts.dataset,
                               "model": opts.model, "seed": opts.seed})
    rows = [
        ("fid_real_vs_real", repr(fid_real), len(real_a) + len(real_b), opts.model),
        ("fid_generated_vs_real", repr(fid_gen), len(generated), opts.model),
        ("fid_noise_vs_real", repr(fid_noise), len(noise), opts.model),
        ("inception_score_mean", repr(is_mean), len(generated), opts.model),
        ("inception_score_std", repr(is_std), len(generated), opts.model),
        ("diversity_score", repr(div), len(generated), opts.model),
    ]
    write_delimited(os.path.join(opts.out, "metrics.tsv"),
                    ("metric", "value", "samples", "extractor"), rows)
    save_metric_bars({"FID(A,B)": fid_real, "FID(gen,real)": fid_gen,
                      "FID(noise,real)": fid_noise, "IS": is_mean},
                     os.path.join(opts.out, "metrics.png"), title="evaluation")
    save_contact_sheet(generated, os.path.join(opts.out, "generated.png"))
    for name, value, *_ in rows:
        print(f"{name}\t{value}")
    return 0


ABLATION_AXES = ("recon", "blur", "progressive", "div-loss", "dist-loss", "ensemble")


def cmd_ablate(opts: Options) -> int:
    opts.require("model", "recon", "out", "axis")
    if opts.axis not in ABLATION_AXES:
        raise ConfigError(f"--axis must be one of {ABLATION_AXES}")
    classifier = zoo.load_classifier(opts.model)
    recon = zoo.load_reconstruction(opts.recon)
    config = build_sampler_config(opts, classifier.expected_input_resolution,
                                  classifier.in_channels, opts.target_class)
    stats = None
    if config.weights.w_dist > 0:
        if opts.stats_dir is None:
            raise ConfigError("--stats-dir is required when w_dist > 0")
        stats = load_stats_dir(opts.stats_dir)[config.target_class]

    from dataclasses import replace
    variants = {"on": (config, classifier, recon, stats)}
    if opts.axis == "recon":
        variants["off"] = (config, classifier, None, stats)
    elif opts.axis == "blur":
        sigma = config.blur_sigma if config.blur_sigma > 0 else 1.0
        variants["on"] = (replace(config, blur_sigma=sigma), classifier, recon, stats)
        variants["off"] = (replace(config, blur_sigma=0.0), classifier, recon, stats)
    elif opts.axis == "progressive":
        final_res = config.stages[-1][0]
        flat = replace(config, stages=((final_res, config.total_steps),))
        variants["off"] = (flat, classifier, recon, stats)
    elif opts.axis == "div-loss":
        off = replace(config, weights=LossWeights(config.weights.w_cls, 0.0,
                                                  config.weights.w_dist))
        variants["off"] = (off, classifier, recon, stats)
    elif opts.axis == "dist-loss":
        off = replace(config, weights=LossWeights(config.weights.w_cls,
                                                  config.weights.w_div, 0.0))
        variants["off"] = (off, classifier, recon, None)
    elif opts.axis == "ensemble":
        opts.require("model2")
        second = zoo.load_classifier(opts.model2)
        ens = make_ensemble(EnsembleSpec([classifier, second], [0.5, 0.5]))
        if stats is not None:
            raise ConfigError("ensemble axis requires w_dist 0 "
                              "(feature spaces differ between variants)")
        variants["on"] = (config, ens, recon, None)
        variants["off"] = (config, classifier, recon, None)

    os.makedirs(opts.out, exist_ok=True)
    _write_snapshot(opts.out, opts.snapshot(
        ["model", "model2", "recon", "stats_dir", "axis", "seed", "target_class"]))

    def run(item):
        name, (cfg, cls, rec, st) = item
        return name, _run_and_save(cfg, cls, rec, st, os.path.join(opts.out, name))[1]

    if opts.workers > 1:
        with ThreadPoolExecutor(max_workers=opts.workers) as pool:
            results = dict(pool.map(run, variants.items()))
    else:
        results = dict(map(run, variants.items()))

    rows = []
    for name, record in sorted(results.items()):
        final_cls = record.steps[-1].cls
        rows.append((opts.axis, name, record.config.total_steps,
                     repr(record.steps[-1].total),
                     "-" if final_cls is None else repr(final_cls),
                     repr(record.wall_time)))
    write_delimited(os.path.join(opts.out, "report.tsv"),
                    ("axis", "variant", "steps", "final_total_loss",
                     "final_cls_loss", "wall_time"), rows)
    print(f"ablation {opts.axis}: wrote {len(results)} runs under {opts.out}")
    return 0


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="classgen",
                                     description="classifier-driven image generation")
    sub = parser.add_subparsers(dest="command", required=True)

    def subparser(name, func, names):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None,
                       help="flat key/value config file")
        _add(p, *names)
        p.set_defaults(func=func)
        return p

    subparser("zoo-train", cmd_zoo_train,
              ["dataset", "preset", "epochs", "train_batch_size", "lr", "seed",
               "mask_ratio", "out"])
    subparser("stats", cmd_stats,
              ["dataset", "model", "dual_encoder", "recon", "classes",
               "mask_ratio", "masks_per_image", "seed", "out"])
    subparser("generate", cmd_generate,
              ["model", "model2", "recon", "stats_dir", "target_class", "seed",
               "out", "steps", "stages", "mask_ratio", "blur_sigma", "w_cls",
               "w_div", "w_dist", "step_size", "optimizer", "batch_size",
               "dtype", "fast", "baseline", "workers"])
    subparser("t2i", cmd_t2i,
              ["dual_encoder", "recon", "stats_dir", "prompt",
               "contrast_prompts", "seed", "out", "steps", "stages",
               "mask_ratio", "blur_sigma", "w_cls", "w_div", "w_dist",
               "step_size", "optimizer", "batch_size", "dtype", "fast"])
    subparser("evaluate", cmd_evaluate,
              ["dataset", "model", "seed", "out", "run"])
    subparser("ablate", cmd_ablate,
              ["dataset", "model", "model2", "recon", "stats_dir", "axis",
               "target_class", "seed", "out", "steps", "stages", "mask_ratio",
               "blur_sigma", "w_cls", "w_div", "w_dist", "step_size",
               "optimizer", "batch_size", "dtype", "fast", "workers"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(Options(args))
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: numerical: {exc} (step {exc.step_index}; "
              f"checkpoint preserved)", file=sys.stderr)
        return 3
    except ClassgenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
