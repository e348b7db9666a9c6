"""Random patch masks and their application to images.

A mask splits an image into a masked region (selected by ``apply_mask``)
and its visible complement (selected by ``apply_complement``).  Fresh masks
drawn every optimization step are the sole stochastic ingredient of the
sampling loop, so mask generation is fully determined by an explicit
numpy Generator; per-(sample, step) generators come from
:func:`derive_rng`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, InputShapeError

# Stream tags keep independent rng purposes (mask draws, noise init,
# statistics estimation) from colliding on the same seed material.
STREAM_MASK = 0x6D61
STREAM_INIT = 0x696E
STREAM_STATS = 0x7374


def derive_rng(seed: int, sample_index: int, step_index: int, stream: int = STREAM_MASK) -> np.random.Generator:
    """Per-sample, per-step generator: seeded from (seed, sample, step, stream).

    Stateless derivation makes interrupted runs resumable without replaying
    the rng history.
    """
    if seed < 0:
        raise ConfigError(f"seed must be nonnegative, got {seed}")
    return np.random.default_rng([seed, sample_index, step_index, stream])


@dataclass(frozen=True)
class MaskPattern:
    """A boolean patch grid; True marks a masked patch."""

    grid_h: int
    grid_w: int
    masked: np.ndarray
    ratio: float
    patch_size: int

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError(f"grid dims must be >= 1, got {self.grid_h}x{self.grid_w}")
        if self.masked.shape != (self.grid_h, self.grid_w):
            raise InputShapeError(
                f"mask grid shape {self.masked.shape} != ({self.grid_h}, {self.grid_w})"
            )
        expected = int(round(self.ratio * self.grid_h * self.grid_w))
        actual = int(self.masked.sum())
        if actual != expected:
            raise ConfigError(
                f"mask cardinality {actual} != round(ratio*cells) = {expected}"
            )

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())

    def pixel_mask(self, dtype=torch.float64) -> torch.Tensor:
        """Expand the patch grid to an (H, W) {0,1} pixel map."""
        px = np.kron(self.masked.astype(np.float64), np.ones((self.patch_size, self.patch_size)))
        return torch.from_numpy(px).to(dtype)


def sample_mask(
    grid_h: int,
    grid_w: int,
    ratio: float,
    rng: np.random.Generator,
    patch_size: int = 2,
) -> MaskPattern:
    """Draw a uniformly random mask with exactly round(ratio*cells) patches masked."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1], got {ratio}")
    if grid_h < 1 or grid_w < 1:
        raise ConfigError(f"grid dims must be >= 1, got {grid_h}x{grid_w}")
    cells = grid_h * grid_w
    k = int(round(ratio * cells))
    flat = np.zeros(cells, dtype=bool)
    flat[rng.permutation(cells)[:k]] = True
    return MaskPattern(grid_h, grid_w, flat.reshape(grid_h, grid_w), ratio, patch_size)


def _check_divisible(image: torch.Tensor, pattern: MaskPattern) -> None:
    h, w = image.shape[-2], image.shape[-1]
    eh = pattern.grid_h * pattern.patch_size
    ew = pattern.grid_w * pattern.patch_size
    if (h, w) != (eh, ew):
        raise InputShapeError(
            f"image spatial dims {h}x{w} incompatible with mask: "
            f"expected {eh}x{ew} (grid {pattern.grid_h}x{pattern.grid_w}, "
            f"patch {pattern.patch_size})"
        )


def apply_mask(image: torch.Tensor, pattern: MaskPattern) -> torch.Tensor:
    """Keep the masked region, zero the visible part."""
    _check_divisible(image, pattern)
    return image * pattern.pixel_mask(image.dtype)


def apply_complement(image: torch.Tensor, pattern: MaskPattern) -> torch.Tensor:
    """Keep the visible part, zero the masked region."""
    _check_divisible(image, pattern)
    return image * (1.0 - pattern.pixel_mask(image.dtype))


def stack_pixel_masks(patterns, dtype=torch.float64) -> torch.Tensor:
    """Stack per-sample patterns into an (N, 1, H, W) tensor of {0,1}."""
    return torch.stack([p.pixel_mask(dtype) for p in patterns]).unsqueeze(1)


def masked_reconstruct(module, image: torch.Tensor, pattern: MaskPattern) -> torch.Tensor:
    """Full-image output of a reconstruction module on one image or batch.

    Visible patches pass through untouched; masked patches are predicted
    from the visible context.  Differentiable w.r.t. ``image``.
    """
    if pattern.patch_size != module.patch_size:
        raise ConfigError(
            f"pattern patch size {pattern.patch_size} != module patch size {module.patch_size}"
        )
    _check_divisible(image, pattern)
    squeeze = image.dim() == 3
    batch = image.unsqueeze(0) if squeeze else image
    masks = stack_pixel_masks([pattern] * batch.shape[0], batch.dtype)
    out = module.reconstruct(batch, masks)
    return out.squeeze(0) if squeeze else out
