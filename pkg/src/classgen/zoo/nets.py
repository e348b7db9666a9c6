"""Tiny trainable architectures: two classifier presets (convolutional and
attention-based), a convolutional inpainting network serving as the
masked-reconstruction module, and a dual encoder for prompt-conditional
generation.  All networks are built in double precision; callers cast down
when speed matters.
"""

from __future__ import annotations

import re

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError
from ..models import GeneralizedClassifier

CLASSIFIER_PRESETS = ("small-convolutional", "small-attention")


def _conv_body(in_channels: int, resolution: int, feature_dim: int) -> nn.Module:
    if resolution % 4 != 0:
        raise ConfigError(f"conv preset needs resolution divisible by 4, got {resolution}")
    flat = 32 * (resolution // 4) ** 2
    return nn.Sequential(
        nn.Conv2d(in_channels, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(flat, feature_dim), nn.ReLU(),
    )


class _AttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class _AttentionBody(nn.Module):
    """Patch tokens + learned positions + two attention blocks, mean-pooled."""

    def __init__(self, in_channels: int, resolution: int, feature_dim: int,
                 patch: int = 7, dim: int = 32):
        super().__init__()
        if resolution % patch != 0:
            raise ConfigError(f"attention preset needs resolution divisible by {patch}")
        tokens = (resolution // patch) ** 2
        self.embed = nn.Conv2d(in_channels, dim, patch, stride=patch)
        self.pos = nn.Parameter(torch.zeros(1, tokens, dim))
        self.blocks = nn.Sequential(_AttentionBlock(dim, 4), _AttentionBlock(dim, 4))
        self.out = nn.Sequential(nn.Linear(dim, feature_dim), nn.ReLU())

    def forward(self, x):
        t = self.embed(x).flatten(2).transpose(1, 2) + self.pos
        t = self.blocks(t)
        return self.out(t.mean(dim=1))


def build_classifier(preset: str, num_classes: int, in_channels: int,
                     resolution: int, feature_dim: int = 64) -> GeneralizedClassifier:
    if preset == "small-convolutional":
        body = _conv_body(in_channels, resolution, feature_dim)
    elif preset == "small-attention":
        body = _AttentionBody(in_channels, resolution, feature_dim)
    else:
        raise ConfigError(f"unknown classifier preset: {preset}")
    head = nn.Linear(feature_dim, num_classes)
    model = GeneralizedClassifier(body, head, num_classes, feature_dim,
                                  resolution, in_channels)
    return model.double()


class ConvInpainter(nn.Module):
    """Convolutional reconstruction module.

    ``reconstruct`` passes visible pixels through unchanged and fills the
    masked region with the network's prediction from visible context, so
    the output shape equals the input shape and the map is differentiable
    in the image.  Hidden pixels are replaced by ``fill_value`` before the
    network sees them.
    """

    def __init__(self, in_channels: int = 1, patch_size: int = 2, width: int = 16,
                 fill_value: float = 0.0):
        super().__init__()
        self.patch_size = patch_size
        self.in_channels = in_channels
        self.fill_value = fill_value
        self.net = nn.Sequential(
            nn.Conv2d(in_channels + 1, width, 5, padding=2), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, in_channels, 3, padding=1),
        )

    def reconstruct(self, images: torch.Tensor, pixel_masks: torch.Tensor) -> torch.Tensor:
        """images: (N, C, H, W); pixel_masks: (N, 1, H, W) with 1 = masked."""
        visible = images * (1.0 - pixel_masks)
        net_in = torch.cat([visible + self.fill_value * pixel_masks, pixel_masks], dim=1)
        pred = self.net(net_in)
        return visible + pixel_masks * pred

    forward = reconstruct


def build_reconstruction(in_channels: int = 1, patch_size: int = 2,
                         width: int = 16, fill_value: float = 0.0) -> ConvInpainter:
    return ConvInpainter(in_channels, patch_size, width, fill_value).double()


class ImageEncoderNet(nn.Module):
    """Convolutional image tower of the dual encoder."""

    def __init__(self, in_channels: int, resolution: int, embed_dim: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.expected_input_resolution = resolution
        self.embed_dim = embed_dim
        self.body = _conv_body(in_channels, resolution, 64)
        self.proj = nn.Linear(64, embed_dim)

    def forward(self, images):
        return self.proj(self.body(images))


def tokenize(text: str):
    return re.findall(r"[a-z]+", text.lower())


class TextEncoderNet(nn.Module):
    """Bag-of-words text tower over a small fixed vocabulary."""

    def __init__(self, vocab: dict, embed_dim: int = 32):
        super().__init__()
        self.vocab = dict(vocab)
        self.embed_dim = embed_dim
        self.embedding = nn.Embedding(len(vocab), embed_dim)
        self.mlp = nn.Sequential(nn.Linear(embed_dim, 64), nn.ReLU(),
                                 nn.Linear(64, embed_dim))

    def encode(self, texts) -> torch.Tensor:
        dtype = self.embedding.weight.dtype
        rows = []
        for text in texts:
            ids = [self.vocab[w] for w in tokenize(text) if w in self.vocab]
            if not ids:
                raise ConfigError(f"no known words in prompt: {text!r}")
            emb = self.embedding(torch.tensor(ids)).mean(dim=0)
            rows.append(emb)
        return self.mlp(torch.stack(rows).to(dtype))

    forward = encode


def build_dual_encoder(class_names, in_channels: int, resolution: int,
                       embed_dim: int = 32):
    vocab_words = sorted({w for name in class_names for w in tokenize(name)})
    vocab = {w: i for i, w in enumerate(vocab_words)}
    image_encoder = ImageEncoderNet(in_channels, resolution, embed_dim).double()
    text_encoder = TextEncoderNet(vocab, embed_dim).double()
    return image_encoder, text_encoder
