"""Desk-scale generative evaluation: Frechet distance between feature
Gaussians, an inception-score analog, and a pairwise-similarity diversity
score.  All feature spaces come from the caller's extractor, so values are
internally comparable only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputShapeError

PSD_EIG_FLOOR = -1e-8


@dataclass
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise InputShapeError(
                f"covariance shape {self.covariance.shape} != ({d}, {d})"
            )
        if np.abs(self.covariance - self.covariance.T).max() > 1e-10:
            raise ConfigError("covariance is not symmetric within 1e-10")


def gaussian_summary(features: np.ndarray) -> GaussianSummary:
    """Sample mean and unbiased covariance of feature rows."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise InputShapeError(f"expected N x d features, got shape {features.shape}")
    n = features.shape[0]
    if n < 2:
        raise ConfigError(f"covariance needs at least 2 rows, got {n}")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return GaussianSummary(mean, cov, n)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root by eigendecomposition with eigenvalue clipping."""
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    if vals.min() < PSD_EIG_FLOOR:
        warnings.warn(
            f"clipping negative eigenvalue {vals.min():.3e} in matrix square root",
            RuntimeWarning,
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})."""
    if a.mean.shape != b.mean.shape:
        raise InputShapeError(
            f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}"
        )
    diff = a.mean - b.mean
    sa = _psd_sqrt(a.covariance)
    # tr sqrt(S_a S_b) = tr sqrt(sqrt(S_a) S_b sqrt(S_a)), which is symmetric PSD
    inner = sa @ b.covariance @ sa
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if vals.min() < PSD_EIG_FLOOR:
        warnings.warn(
            f"clipping negative eigenvalue {vals.min():.3e} in Frechet trace term",
            RuntimeWarning,
        )
    trace_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    return float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * trace_cross)


def inception_score(probabilities: np.ndarray, splits: int = 10):
    """exp(mean KL(p(y|x) || marginal)) per split; returns (mean, std) over splits.

    Rows must be probability vectors.  Lies in [1, K].
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2:
        raise InputShapeError(f"expected N x K probabilities, got shape {probs.shape}")
    n = probs.shape[0]
    if splits < 1 or n < splits:
        raise ConfigError(f"need at least one row per split: N={n}, splits={splits}")
    if (probs < 0).any() or np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
        raise ConfigError("rows must be probability distributions summing to 1")

    scores = []
    for chunk in np.array_split(probs, splits):
        marginal = chunk.mean(axis=0)
        # KL with 0 log 0 = 0
        ratio = np.where(chunk > 0, chunk / np.maximum(marginal, 1e-300), 1.0)
        kl = (chunk * np.log(ratio)).sum(axis=1)
        scores.append(np.exp(kl.mean()))
    scores = np.asarray(scores)
    return float(scores.mean()), float(scores.std())


def diversity_score(features: np.ndarray) -> float:
    """Mean pairwise cosine similarity over unordered row pairs, in [-1, 1].

    Zero-norm rows cannot be normalized and are excluded with a warning.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise InputShapeError(f"expected N x d features, got shape {feats.shape}")
    norms = np.linalg.norm(feats, axis=1)
    keep = norms > 0
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"diversity_score: excluded {dropped} zero-norm feature row(s)",
                      RuntimeWarning)
    feats = feats[keep]
    n = feats.shape[0]
    if n < 2:
        raise ConfigError(f"need at least 2 usable rows, got {n}")
    z = feats / norms[keep][:, None]
    gram = z @ z.T
    return float((gram.sum() - n) / (n * (n - 1)))
