"""Loss terms steering generation: classification, pairwise-similarity
diversity, and feature-distribution matching, plus estimation of real-data
class statistics.

The combined objective evaluated each sampling step is

    w_cls * mean_i CE(f(g(x_i)), target)
  + w_div * sum_{i != j} <h(g(x_i)), h(g(x_j))>
  + w_dist * (||mean(z) - mu_c||^2 + ||var(z) - var_c||^2)

with z_i = h(g(x_i)) computed once per sample and shared by all terms.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputShapeError
from .masking import STREAM_STATS, derive_rng, sample_mask, stack_pixel_masks

STATS_FORMAT = "classgen-stats"
STATS_VERSION = 1


@dataclass
class ClassStatistics:
    """Per-class feature mean and elementwise variance estimated from real data."""

    class_id: int
    mu: np.ndarray
    var: np.ndarray
    count: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mu.shape != self.var.shape or self.mu.ndim != 1:
            raise InputShapeError(
                f"mu/var must be matching vectors, got {self.mu.shape} and {self.var.shape}"
            )
        if (self.var < 0).any():
            raise ConfigError("variance vector has negative entries")
        if self.count < 2:
            raise ConfigError(f"count must be >= 2, got {self.count}")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def save(self, path: str) -> None:
        """Text record; repr() of each double round-trips bit-exactly."""
        lines = [
            f"format {STATS_FORMAT}",
            f"version {STATS_VERSION}",
            f"class_id {self.class_id}",
            f"dim {self.dim}",
            f"count {self.count}",
            "mu " + " ".join(repr(v) for v in self.mu.tolist()),
            "var " + " ".join(repr(v) for v in self.var.tolist()),
        ]
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str) -> "ClassStatistics":
        fields = {}
        with open(path) as f:
            for line in f:
                key, _, rest = line.rstrip("\n").partition(" ")
                fields[key] = rest
        if fields.get("format") != STATS_FORMAT:
            raise ConfigError(f"{path}: not a {STATS_FORMAT} file")
        if int(fields.get("version", -1)) != STATS_VERSION:
            raise ConfigError(f"{path}: unsupported version {fields.get('version')}")
        dim = int(fields["dim"])
        mu = np.array([float(v) for v in fields["mu"].split()])
        var = np.array([float(v) for v in fields["var"].split()])
        if mu.shape[0] != dim or var.shape[0] != dim:
            raise ConfigError(f"{path}: vector length disagrees with dim={dim}")
        return cls(int(fields["class_id"]), mu, var, int(fields["count"]))


@dataclass(frozen=True)
class LossWeights:
    """Per-term weights for the composite objective.

    Defaults were calibrated on the 28x28 digit setup: larger diversity /
    distribution weights drown the classification gradient and the batch
    never reaches the target class.
    """

    w_cls: float = 1.0
    w_div: float = 0.02
    w_dist: float = 0.005

    def __post_init__(self):
        if self.w_cls < 0 or self.w_div < 0 or self.w_dist < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.w_cls == self.w_div == self.w_dist == 0:
            raise ConfigError("at least one loss weight must be positive")


def classification_loss(logits: torch.Tensor, target: int) -> torch.Tensor:
    """Cross-entropy of softmax(logits) against one target class."""
    if logits.dim() != 1:
        raise InputShapeError(f"expected a logit vector, got shape {tuple(logits.shape)}")
    if not 0 <= target < logits.shape[0]:
        raise ConfigError(f"target {target} out of range [0, {logits.shape[0]})")
    tgt = torch.tensor([target], dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits.unsqueeze(0), tgt)


def distance_metric_loss(features: torch.Tensor, cosine: bool = False) -> torch.Tensor:
    """Sum of inner products over ordered pairs i != j of same-class features.

    ``cosine=True`` L2-normalizes rows first; the raw product is the default
    and is scale-sensitive by design.
    """
    if features.dim() != 2:
        raise InputShapeError(f"expected N x d features, got shape {tuple(features.shape)}")
    z = F.normalize(features, dim=1) if cosine else features
    total = z.sum(dim=0)
    # sum_{i != j} <z_i, z_j> = ||sum z||^2 - sum ||z_i||^2
    return total @ total - (z * z).sum()


def batch_statistics(features: torch.Tensor):
    """Per-dimension mean and unbiased variance (divisor N-1) of feature rows."""
    if features.dim() != 2:
        raise InputShapeError(f"expected N x d features, got shape {tuple(features.shape)}")
    n = features.shape[0]
    if n < 2:
        raise ConfigError(f"variance needs at least 2 rows, got {n}")
    mean = features.mean(dim=0)
    var = ((features - mean) ** 2).sum(dim=0) / (n - 1)
    return mean, var


def distribution_loss(gen_mean: torch.Tensor, gen_var: torch.Tensor,
                      stats: ClassStatistics) -> torch.Tensor:
    """Squared distance of generated-batch feature stats from real-class stats."""
    if gen_mean.shape[0] != stats.dim or gen_var.shape[0] != stats.dim:
        raise InputShapeError(
            f"stat dim mismatch: generated {gen_mean.shape[0]}/{gen_var.shape[0]}, "
            f"real {stats.dim}"
        )
    mu = torch.from_numpy(stats.mu).to(gen_mean.dtype)
    var = torch.from_numpy(stats.var).to(gen_var.dtype)
    return ((gen_mean - mu) ** 2).sum() + ((gen_var - var) ** 2).sum()


def reconstruct_batch(recon_module, images: torch.Tensor, masks) -> torch.Tensor:
    """Run the reconstruction module with per-sample masks; identity if absent."""
    if recon_module is None:
        return images
    if len(masks) != images.shape[0]:
        raise ConfigError(f"need one mask per sample: {len(masks)} masks, {images.shape[0]} samples")
    pixel = stack_pixel_masks(masks, images.dtype)
    return recon_module.reconstruct(images, pixel)


def composite_loss(images: torch.Tensor, target: int, model, recon_module,
                   masks, stats: ClassStatistics | None, weights: LossWeights,
                   cosine_diversity: bool = False):
    """Weighted combined objective and its per-term (pre-weighting) breakdown.

    Terms with zero weight are skipped and reported as None in the breakdown.
    """
    if weights.w_dist > 0 and stats is None:
        raise ConfigError("w_dist > 0 requires class statistics")
    if weights.w_dist > 0 and images.shape[0] < 2:
        raise ConfigError("distribution loss needs a batch of at least 2 samples")

    gx = reconstruct_batch(recon_module, images, masks)
    feats = model.features(gx)

    total = images.new_zeros(())
    breakdown = {"cls": None, "div": None, "dist": None}
    if weights.w_cls > 0:
        term = model.classification_loss_from_features(feats, target)
        breakdown["cls"] = float(term.detach())
        total = total + weights.w_cls * term
    if weights.w_div > 0:
        term = distance_metric_loss(feats, cosine=cosine_diversity)
        breakdown["div"] = float(term.detach())
        total = total + weights.w_div * term
    if weights.w_dist > 0:
        mean, var = batch_statistics(feats)
        term = distribution_loss(mean, var, stats)
        breakdown["dist"] = float(term.detach())
        total = total + weights.w_dist * term
    return total, breakdown


def estimate_class_statistics(dataset, class_id: int, model, recon_module,
                              mask_ratio: float, seed: int,
                              num_masks_per_image: int = 1) -> ClassStatistics:
    """Feature statistics of one class of real images.

    Images pass through the same masked-reconstruction pipeline as generated
    samples (``num_masks_per_image`` independent masks each), so real and
    generated statistics live in the same distribution.  Deterministic given
    ``seed``.
    """
    idx = np.flatnonzero(dataset.labels == class_id)
    if idx.size < 2:
        raise ConfigError(f"class {class_id} has {idx.size} images; need at least 2")
    if num_masks_per_image < 1:
        raise ConfigError("num_masks_per_image must be >= 1")

    dtype = next(model.parameters()).dtype
    rows = []
    with torch.no_grad():
        for j in idx:
            img = torch.from_numpy(dataset.images[j]).to(dtype).unsqueeze(0)
            for k in range(num_masks_per_image):
                if recon_module is None:
                    gx = img
                else:
                    h = img.shape[-2] // recon_module.patch_size
                    w = img.shape[-1] // recon_module.patch_size
                    rng = derive_rng(seed, int(j), k, STREAM_STATS)
                    pat = sample_mask(h, w, mask_ratio, rng, recon_module.patch_size)
                    gx = reconstruct_batch(recon_module, img, [pat])
                rows.append(model.features(gx).squeeze(0))
    feats = torch.stack(rows).to(torch.float64)
    mean, var = batch_statistics(feats)
    return ClassStatistics(class_id, mean.numpy(), var.numpy(), len(rows))


def load_stats_dir(path: str) -> dict:
    """Read every per-class statistics file from a directory."""
    if not os.path.isdir(path):
        raise ConfigError(f"statistics directory not found: {path}")
    out = {}
    for name in sorted(os.listdir(path)):
        if name.startswith("stats_") and name.endswith(".txt"):
            s = ClassStatistics.load(os.path.join(path, name))
            out[s.class_id] = s
    if not out:
        raise ConfigError(f"no stats_*.txt files found in {path}")
    return out
