"""Contracts over differentiable classifiers.

Everything downstream (losses, sampler, metrics) talks to models only
through :class:`GeneralizedClassifier`: logits plus penultimate features,
with the guarantee that ``head(features(x)) == logits(x)`` exactly.
Inputs at any stage resolution are bilinearly resized to the model's
expected resolution inside the forward path, so gradients flow through
the resize.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputShapeError, NumericalError


class GeneralizedClassifier(nn.Module):
    """A differentiable map from images to class logits with exposed features.

    ``body`` computes penultimate features h(x); ``head`` is the final
    linear layer, so logits f(x) = head(h(x)) by construction.
    """

    def __init__(self, body: nn.Module, head: nn.Linear, num_classes: int,
                 feature_dim: int, expected_input_resolution: int, in_channels: int = 1):
        super().__init__()
        self.body = body
        self.head = head
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.expected_input_resolution = expected_input_resolution
        self.in_channels = in_channels

    def prepare(self, images: torch.Tensor) -> torch.Tensor:
        """Validate shape and resize to the expected input resolution."""
        if images.dim() != 4:
            raise InputShapeError(f"expected NCHW batch, got {images.dim()}-d tensor")
        if images.shape[1] != self.in_channels:
            raise InputShapeError(
                f"expected {self.in_channels} input channel(s), got {images.shape[1]}"
            )
        r = self.expected_input_resolution
        if images.shape[-2:] != (r, r):
            images = F.interpolate(images, size=(r, r), mode="bilinear", align_corners=False)
        return images

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.body(self.prepare(images))

    def logits_from_features(self, feats: torch.Tensor) -> torch.Tensor:
        return self.head(feats)

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return self.logits_from_features(self.features(images))

    forward = logits

    def classification_loss_from_features(self, feats: torch.Tensor, target: int) -> torch.Tensor:
        """Mean cross-entropy against a single target class."""
        if not 0 <= target < self.num_classes:
            raise ConfigError(f"target {target} out of range [0, {self.num_classes})")
        logits = self.logits_from_features(feats)
        tgt = torch.full((logits.shape[0],), target, dtype=torch.long, device=logits.device)
        return F.cross_entropy(logits, tgt)

    def classification_loss(self, images: torch.Tensor, target: int) -> torch.Tensor:
        return self.classification_loss_from_features(self.features(images), target)


def predict_logits(model: GeneralizedClassifier, images: torch.Tensor) -> torch.Tensor:
    """Logit matrix, one row per image."""
    return model.logits(images)


def extract_features(model: GeneralizedClassifier, images: torch.Tensor) -> torch.Tensor:
    """Penultimate feature matrix, one row per image."""
    return model.features(images)


def input_gradient(loss_value_fn, images: torch.Tensor) -> torch.Tensor:
    """Gradient of a scalar loss with respect to the input batch."""
    x = images.detach().clone().requires_grad_(True)
    loss = loss_value_fn(x)
    if not torch.isfinite(loss):
        raise NumericalError(f"loss is non-finite: {loss.item()}")
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise NumericalError("input gradient contains non-finite entries")
    return grad


@dataclass
class EnsembleSpec:
    """Members sharing one class vocabulary plus normalized loss weights."""

    members: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.members) != len(self.weights):
            raise ConfigError(
                f"{len(self.members)} members but {len(self.weights)} weights"
            )
        if not self.members:
            raise ConfigError("ensemble needs at least one member")
        if any(w < 0 for w in self.weights):
            raise ConfigError("ensemble weights must be nonnegative")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigError(f"ensemble weights sum to {sum(self.weights)}, expected 1")
        ks = {m.num_classes for m in self.members}
        if len(ks) != 1:
            raise ConfigError(f"members disagree on class count: {sorted(ks)}")


class EnsembleClassifier(GeneralizedClassifier):
    """Loss-level ensemble: the classification loss is the weighted sum of
    member losses, and features are the concatenation of member features.

    ``logits`` returns the weighted mean of member logits; it exists for
    prediction only and is deliberately not the quantity whose
    cross-entropy equals the ensemble loss.
    """

    def __init__(self, spec: EnsembleSpec):
        feature_dim = sum(m.feature_dim for m in spec.members)
        super().__init__(
            body=None, head=None,
            num_classes=spec.members[0].num_classes,
            feature_dim=feature_dim,
            expected_input_resolution=max(m.expected_input_resolution for m in spec.members),
            in_channels=spec.members[0].in_channels,
        )
        self.members = nn.ModuleList(spec.members)
        self.member_weights = list(spec.weights)
        self._splits = [m.feature_dim for m in spec.members]

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return torch.cat([m.features(images) for m in self.members], dim=1)

    def _member_feats(self, feats: torch.Tensor):
        return torch.split(feats, self._splits, dim=1)

    def logits_from_features(self, feats: torch.Tensor) -> torch.Tensor:
        parts = self._member_feats(feats)
        return sum(
            w * m.logits_from_features(z)
            for m, w, z in zip(self.members, self.member_weights, parts)
        )

    def classification_loss_from_features(self, feats: torch.Tensor, target: int) -> torch.Tensor:
        parts = self._member_feats(feats)
        return sum(
            w * m.classification_loss_from_features(z, target)
            for m, w, z in zip(self.members, self.member_weights, parts)
        )


def make_ensemble(spec: EnsembleSpec) -> GeneralizedClassifier:
    return EnsembleClassifier(spec)


class TextPromptClassifier(GeneralizedClassifier):
    """Dual-encoder adapter: text embeddings act as final-layer weights.

    logit_k(x) = tau * <normalize(image_embed(x)), normalize(text_embed(prompt_k))>.
    Features are the raw (unnormalized) image embeddings.
    """

    def __init__(self, image_encoder: nn.Module, text_matrix: torch.Tensor,
                 prompts, temperature: float, expected_input_resolution: int,
                 in_channels: int = 1):
        embed_dim = text_matrix.shape[1]
        super().__init__(
            body=image_encoder, head=None,
            num_classes=text_matrix.shape[0],
            feature_dim=embed_dim,
            expected_input_resolution=expected_input_resolution,
            in_channels=in_channels,
        )
        self.prompts = list(prompts)
        self.temperature = temperature
        self.register_buffer("text_matrix", F.normalize(text_matrix, dim=1))

    def logits_from_features(self, feats: torch.Tensor) -> torch.Tensor:
        z = F.normalize(feats, dim=1)
        return self.temperature * (z @ self.text_matrix.to(z.dtype).t())


def text_to_classifier(image_encoder, text_encoder, prompts,
                       temperature: float = 100.0) -> GeneralizedClassifier:
    """Build a prompt-conditional classifier from a dual encoder pair.

    ``image_encoder`` and ``text_encoder`` must map into a common embedding
    space; each prompt becomes one class.
    """
    if not prompts:
        raise ConfigError("prompts must be nonempty")
    with torch.no_grad():
        text_matrix = text_encoder.encode(list(prompts))
    if text_matrix.shape[1] != image_encoder.embed_dim:
        raise ConfigError(
            f"embedding dim mismatch: text {text_matrix.shape[1]} "
            f"vs image {image_encoder.embed_dim}"
        )
    return TextPromptClassifier(
        image_encoder, text_matrix, prompts, temperature,
        expected_input_resolution=image_encoder.expected_input_resolution,
        in_channels=image_encoder.in_channels,
    )
