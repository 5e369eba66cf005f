"""Pixel-space augmentation used by the traditional-augmentation regime."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror an (H, W, 3) image along its width axis; an involution."""
    return np.ascontiguousarray(image[:, ::-1, :])


def traditional_augment(
    image: np.ndarray,
    rng: np.random.Generator,
    flip_prob: float = 0.5,
    jitter: float = 0.2,
) -> np.ndarray:
    """Random horizontal flip plus brightness/contrast/saturation jitter.

    Factors are drawn uniformly from [1 - jitter, 1 + jitter]; output stays
    clamped to [0, 1].  With ``jitter=0`` and ``flip_prob=0`` this is the
    identity.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValidationError(f"expected (H, W, 3) image, got {image.shape}")
    out = image
    if rng.random() < flip_prob:
        out = hflip(out)
    if jitter > 0.0:
        brightness, contrast, saturation = rng.uniform(1.0 - jitter, 1.0 + jitter, size=3)
        out = out * brightness
        mean = out.mean()
        out = (out - mean) * contrast + mean
        gray = out.mean(axis=2, keepdims=True)
        out = gray + (out - gray) * saturation
    return np.clip(out, 0.0, 1.0).astype(np.float32)
