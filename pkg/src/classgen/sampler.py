"""The generation engine: iterative input optimization through the
masked-reconstruction module, with progressive resolution stages, optional
gradient blurring, per-step clamping, and a fully reproducible run record.

A run is determined by (config, seed, model weights).  All per-step
randomness is a fresh mask per sample per step, derived statelessly from
(seed, sample, step), so interrupted runs resume exactly.
"""

from __future__ import annotations

import copy
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputShapeError, NumericalError
from .losses import LossWeights, composite_loss
from .masking import STREAM_INIT, derive_rng, sample_mask

RUN_FORMAT = "classgen-run"
RUN_VERSION = 1

INIT_MEAN = 0.5
INIT_STD = 0.2
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class ImageBatch:
    """A batch of images under optimization, pixels clamped to [0, 1]."""

    data: torch.Tensor
    target_class: int

    def __post_init__(self):
        if self.data.dim() != 4 or self.data.shape[0] < 1:
            raise InputShapeError(f"expected nonempty NCHW batch, got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise NumericalError("image batch contains non-finite values")
        if self.data.min() < 0 or self.data.max() > 1:
            raise ConfigError("image batch values must lie in [0, 1]")

    @property
    def stage_resolution(self) -> int:
        return self.data.shape[-1]

    def numpy(self) -> np.ndarray:
        return self.data.detach().cpu().numpy()


def _parse_stages(text: str):
    stages = []
    for part in text.split(","):
        res, _, steps = part.partition(":")
        stages.append((int(res), int(steps)))
    return tuple(stages)


@dataclass(frozen=True)
class SamplerConfig:
    stages: tuple = ((14, 1000), (28, 1000))
    step_size: float = 0.05
    optimizer: str = "adam"
    mask_ratio: float = 0.75
    blur_sigma: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    batch_size: int = 16
    target_class: int = 0
    fast_mode: bool = False
    channels: int = 1
    dtype: str = "float32"
    cosine_diversity: bool = True

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("at least one stage required")
        res = [r for r, _ in self.stages]
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ConfigError(f"stage resolutions must be strictly increasing: {res}")
        if any(s < 0 for _, s in self.stages):
            raise ConfigError("stage step counts must be nonnegative")
        if self.step_size < 0:
            raise ConfigError("step size must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.blur_sigma < 0:
            raise ConfigError("blur sigma must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def torch_dtype(self):
        return torch.float32 if self.dtype == "float32" else torch.float64

    @property
    def total_steps(self) -> int:
        return sum(s for _, s in self.stages)

    def to_flat(self) -> dict:
        return {
            "stages": ",".join(f"{r}:{s}" for r, s in self.stages),
            "step_size": repr(self.step_size),
            "optimizer": self.optimizer,
            "mask_ratio": repr(self.mask_ratio),
            "blur_sigma": repr(self.blur_sigma),
            "w_cls": repr(self.weights.w_cls),
            "w_div": repr(self.weights.w_div),
            "w_dist": repr(self.weights.w_dist),
            "seed": str(self.seed),
            "batch_size": str(self.batch_size),
            "target_class": str(self.target_class),
            "fast_mode": str(int(self.fast_mode)),
            "channels": str(self.channels),
            "dtype": self.dtype,
            "cosine_diversity": str(int(self.cosine_diversity)),
        }

    @classmethod
    def from_flat(cls, flat: dict) -> "SamplerConfig":
        return cls(
            stages=_parse_stages(flat["stages"]),
            step_size=float(flat["step_size"]),
            optimizer=flat["optimizer"],
            mask_ratio=float(flat["mask_ratio"]),
            blur_sigma=float(flat["blur_sigma"]),
            weights=LossWeights(float(flat["w_cls"]), float(flat["w_div"]),
                                float(flat["w_dist"])),
            seed=int(flat["seed"]),
            batch_size=int(flat["batch_size"]),
            target_class=int(flat["target_class"]),
            fast_mode=bool(int(flat["fast_mode"])),
            channels=int(flat["channels"]),
            dtype=flat["dtype"],
            cosine_diversity=bool(int(flat["cosine_diversity"])),
        )


@dataclass
class StepLog:
    step: int
    total: float
    cls: float | None
    div: float | None
    dist: float | None
    grad_norm: float
    mask_stamp: str

    def to_row(self) -> str:
        def fmt(v):
            return "-" if v is None else repr(v)
        return "\t".join([str(self.step), repr(self.total), fmt(self.cls),
                          fmt(self.div), fmt(self.dist), repr(self.grad_norm),
                          self.mask_stamp])

    @classmethod
    def from_row(cls, row: str) -> "StepLog":
        parts = row.split("\t")
        def parse(v):
            return None if v == "-" else float(v)
        return cls(int(parts[0]), float(parts[1]), parse(parts[2]),
                   parse(parts[3]), parse(parts[4]), float(parts[5]), parts[6])


@dataclass
class _OptState:
    """Adam moment buffers; reset at each stage boundary (shape changes)."""

    m: torch.Tensor
    v: torch.Tensor
    t: int = 0

    @classmethod
    def fresh(cls, like: torch.Tensor) -> "_OptState":
        return cls(torch.zeros_like(like), torch.zeros_like(like), 0)


@dataclass
class RunRecord:
    """Persisted sampling trajectory: config, per-step log, checkpoints."""

    config: SamplerConfig
    steps: list = field(default_factory=list)
    stage_checkpoints: list = field(default_factory=list)
    final_images: np.ndarray | None = None
    wall_time: float = 0.0
    resume_state: dict | None = None

    def save(self, out_dir: str) -> None:
        from .report import save_image_grid

        os.makedirs(out_dir, exist_ok=True)
        lines = [f"format {RUN_FORMAT}", f"version {RUN_VERSION}"]
        lines += [f"{k} {v}" for k, v in self.config.to_flat().items()]
        lines.append(f"wall_time {repr(self.wall_time)}")
        with open(os.path.join(out_dir, "config.txt"), "w") as f:
            f.write("\n".join(lines) + "\n")
        with open(os.path.join(out_dir, "log.tsv"), "w") as f:
            f.write("step\ttotal\tcls\tdiv\tdist\tgrad_norm\tmask_stamp\n")
            for entry in self.steps:
                f.write(entry.to_row() + "\n")
        for res, arr in self.stage_checkpoints:
            np.save(os.path.join(out_dir, f"stage_{res:03d}.npy"), arr)
            save_image_grid(arr, os.path.join(out_dir, f"stage_{res:03d}.png"))
        if self.final_images is not None:
            np.save(os.path.join(out_dir, "final.npy"), self.final_images)
            save_image_grid(self.final_images, os.path.join(out_dir, "final.png"))
        if self.resume_state is not None:
            np.savez(os.path.join(out_dir, "resume.npz"), **self.resume_state)

    @classmethod
    def load(cls, out_dir: str) -> "RunRecord":
        flat = {}
        with open(os.path.join(out_dir, "config.txt")) as f:
            for line in f:
                key, _, rest = line.rstrip("\n").partition(" ")
                flat[key] = rest
        if flat.get("format") != RUN_FORMAT or int(flat.get("version", -1)) != RUN_VERSION:
            raise ConfigError(f"{out_dir}: not a {RUN_FORMAT} v{RUN_VERSION} directory")
        record = cls(SamplerConfig.from_flat(flat), wall_time=float(flat.get("wall_time", 0.0)))
        with open(os.path.join(out_dir, "log.tsv")) as f:
            next(f)
            record.steps = [StepLog.from_row(line.rstrip("\n")) for line in f if line.strip()]
        for res, _ in record.config.stages:
            p = os.path.join(out_dir, f"stage_{res:03d}.npy")
            if os.path.exists(p):
                record.stage_checkpoints.append((res, np.load(p)))
        fp = os.path.join(out_dir, "final.npy")
        if os.path.exists(fp):
            record.final_images = np.load(fp)
        rp = os.path.join(out_dir, "resume.npz")
        if os.path.exists(rp):
            record.resume_state = dict(np.load(rp))
        return record


def init_input(config: SamplerConfig) -> ImageBatch:
    """Independent Gaussian-noise images, clamped to [0, 1], at the first
    stage resolution."""
    res = config.stages[0][0]
    shape = (config.channels, res, res)
    rows = []
    for i in range(config.batch_size):
        rng = derive_rng(config.seed, i, 0, STREAM_INIT)
        rows.append(rng.normal(INIT_MEAN, INIT_STD, size=shape))
    data = torch.from_numpy(np.clip(np.stack(rows), 0.0, 1.0)).to(config.torch_dtype)
    return ImageBatch(data, config.target_class)


def _gauss_kernel(sigma: float, dtype) -> torch.Tensor:
    radius = max(1, math.ceil(3.0 * sigma))
    xs = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-(xs ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def gradient_blur(grad: torch.Tensor, sigma: float) -> torch.Tensor:
    """Per-channel 2D Gaussian smoothing with reflective padding.

    The sampled kernel is normalized, so constant fields pass unchanged;
    sigma = 0 is the identity.
    """
    if sigma < 0:
        raise ConfigError("blur sigma must be nonnegative")
    if sigma == 0:
        return grad
    c = grad.shape[1]
    k = _gauss_kernel(sigma, grad.dtype)
    radius = (k.shape[0] - 1) // 2
    kh = k.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    kv = k.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    out = F.pad(grad, (radius, radius, 0, 0), mode="reflect")
    out = F.conv2d(out, kh, groups=c)
    out = F.pad(out, (0, 0, radius, radius), mode="reflect")
    return F.conv2d(out, kv, groups=c)


def _draw_step_masks(config: SamplerConfig, recon, res: int, step_index: int):
    if recon is None:
        return None
    if res % recon.patch_size != 0:
        raise InputShapeError(
            f"stage resolution {res} not divisible by patch size {recon.patch_size}"
        )
    grid = res // recon.patch_size
    return [
        sample_mask(grid, grid, config.mask_ratio,
                    derive_rng(config.seed, i, step_index), recon.patch_size)
        for i in range(config.batch_size)
    ]


def sampler_step(batch: ImageBatch, step_index: int, config: SamplerConfig,
                 classifier, recon, stats, opt_state: _OptState):
    """One optimization step: fresh masks, combined loss, input gradient,
    optional blurring, optimizer update, clamp.  Returns the new batch,
    the log entry, and the updated optimizer state."""
    masks = _draw_step_masks(config, recon, batch.stage_resolution, step_index)
    x = batch.data.detach().requires_grad_(True)
    total, breakdown = composite_loss(x, config.target_class, classifier, recon,
                                      masks, stats, config.weights,
                                      config.cosine_diversity)
    if not torch.isfinite(total):
        raise NumericalError(f"non-finite loss at step {step_index}", step_index)
    (grad,) = torch.autograd.grad(total, x)
    if not torch.isfinite(grad).all():
        raise NumericalError(f"non-finite gradient at step {step_index}", step_index)
    grad_norm = float(grad.norm())
    if config.blur_sigma > 0:
        grad = gradient_blur(grad, config.blur_sigma)

    if config.optimizer == "adam":
        b1, b2 = ADAM_BETAS
        opt_state.t += 1
        opt_state.m = b1 * opt_state.m + (1 - b1) * grad
        opt_state.v = b2 * opt_state.v + (1 - b2) * grad * grad
        mhat = opt_state.m / (1 - b1 ** opt_state.t)
        vhat = opt_state.v / (1 - b2 ** opt_state.t)
        update = config.step_size * mhat / (vhat.sqrt() + ADAM_EPS)
    else:
        update = config.step_size * grad

    new_data = (batch.data.detach() - update).clamp(0.0, 1.0)
    entry = StepLog(step_index, float(total.detach()), breakdown["cls"],
                    breakdown["div"], breakdown["dist"], grad_norm,
                    f"{config.seed}:{step_index}")
    return ImageBatch(new_data, batch.target_class), entry, opt_state


def upsample(batch: ImageBatch, new_resolution: int) -> ImageBatch:
    """Bilinear upsampling between progressive stages."""
    if new_resolution <= batch.stage_resolution:
        raise ConfigError(
            f"upsample target {new_resolution} must exceed current "
            f"{batch.stage_resolution}"
        )
    data = F.interpolate(batch.data, size=(new_resolution, new_resolution),
                         mode="bilinear", align_corners=False).clamp(0.0, 1.0)
    return ImageBatch(data, batch.target_class)


def _run_loop(config: SamplerConfig, classifier, recon, stats,
              stop_after: int | None, start_state: dict | None):
    """Shared driver for fresh and resumed runs."""
    torch.set_num_threads(1)  # bit-reproducibility across invocations
    t0 = time.time()
    record = RunRecord(config)
    # .to() mutates modules in place, and a float64 -> float32 -> float64
    # round trip would silently truncate the caller's weights; run on copies.
    classifier = copy.deepcopy(classifier).to(config.torch_dtype)
    if recon is not None:
        recon = copy.deepcopy(recon).to(config.torch_dtype)
    return _run_stages(config, classifier, recon, stats, stop_after,
                       start_state, record, t0)


def _run_stages(config: SamplerConfig, classifier, recon, stats,
                stop_after, start_state, record: RunRecord, t0: float):
    if start_state is None:
        batch = init_input(config)
        global_step, start_stage, done_in_stage = 0, 0, 0
        opt_state = None
    else:
        batch = ImageBatch(torch.from_numpy(start_state["x"]).to(config.torch_dtype),
                           config.target_class)
        global_step = int(start_state["next_step"])
        start_stage = int(start_state["stage_index"])
        done_in_stage = int(start_state["done_in_stage"])
        opt_state = _OptState(torch.from_numpy(start_state["m"]).to(config.torch_dtype),
                              torch.from_numpy(start_state["v"]).to(config.torch_dtype),
                              int(start_state["t"]))

    for si in range(start_stage, len(config.stages)):
        res, steps = config.stages[si]
        if batch.stage_resolution != res:
            batch = upsample(batch, res)
        if opt_state is None:
            opt_state = _OptState.fresh(batch.data)
        first = done_in_stage
        for k in range(first, steps):
            try:
                batch, entry, opt_state = sampler_step(
                    batch, global_step, config, classifier, recon, stats, opt_state)
            except NumericalError as exc:
                record.final_images = batch.numpy()
                record.wall_time = time.time() - t0
                exc.record = record
                raise
            record.steps.append(entry)
            global_step += 1
            if stop_after is not None and global_step >= stop_after and global_step < config.total_steps:
                record.final_images = batch.numpy()
                record.wall_time = time.time() - t0
                record.resume_state = {
                    "x": batch.numpy(),
                    "m": opt_state.m.numpy(), "v": opt_state.v.numpy(),
                    "t": opt_state.t, "next_step": global_step,
                    "stage_index": si, "done_in_stage": k + 1,
                }
                return batch, record
        record.stage_checkpoints.append((res, batch.numpy()))
        opt_state = None
        done_in_stage = 0

    record.final_images = batch.numpy()
    record.wall_time = time.time() - t0
    return batch, record


def progressive_generate(config: SamplerConfig, classifier, recon, stats=None,
                         stop_after: int | None = None):
    """Run all stages; returns (final ImageBatch, RunRecord).

    ``stats`` is the ClassStatistics for the target class (required when
    w_dist > 0).  ``stop_after`` truncates after that many total steps and
    stores resumable state in the record.
    """
    return _run_loop(config, classifier, recon, stats, stop_after, None)


def resume_generate(run_dir: str, classifier, recon, stats=None,
                    stop_after: int | None = None):
    """Continue an interrupted run from its saved resume state.

    The remaining trajectory is identical to an uninterrupted run because
    per-step rng derivation is stateless.  Returns (batch, record) where
    the record holds only the resumed portion of the log.
    """
    prior = RunRecord.load(run_dir)
    if prior.resume_state is None:
        raise ConfigError(f"{run_dir}: no resume state present")
    batch, record = _run_loop(prior.config, classifier, recon, stats,
                              stop_after, prior.resume_state)
    record.steps = prior.steps + record.steps
    return batch, record


def adversarial_baseline_generate(config: SamplerConfig, classifier, stats=None):
    """Ablation baseline: the identical loop with the reconstruction module
    removed from the forward path (direct input optimization)."""
    return progressive_generate(config, classifier, recon=None, stats=stats)
