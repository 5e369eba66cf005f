"""Feature-space Fréchet distance, EMA smoothing, and checkpoint selection.

The distance between two Gaussian moment fits (mean ``mu``, covariance
``sigma``) is

    ||mu_r - mu_f||^2 + Tr(sigma_r + sigma_f - 2 (sigma_r sigma_f)^{1/2})

The matrix square-root trace is evaluated through the symmetric form
``sigma_f^{1/2} sigma_r sigma_f^{1/2}`` with eigenvalues clamped at zero,
which is exact for the product root yet stays finite on the rank-deficient
covariances that tiny sample sets produce.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InsufficientSamplesError, NumericalError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MomentSummary:
    """Sample mean and unbiased covariance of a feature batch."""

    mean: np.ndarray  # (F,)
    covariance: np.ndarray  # (F, F)
    sample_count: int

    def __post_init__(self):
        cov = np.asarray(self.covariance)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValidationError(f"covariance must be square, got {cov.shape}")
        if np.asarray(self.mean).shape != (cov.shape[0],):
            raise ValidationError("mean length must match covariance dimension")
        if self.sample_count < 2:
            raise InsufficientSamplesError("moment summaries need at least 2 samples")
        if np.abs(cov - cov.T).max() > 1e-8:
            raise ValidationError("covariance must be symmetric within 1e-8")


def summarize_moments(features: np.ndarray) -> MomentSummary:
    """Fit mean and unbiased covariance to rows of ``features`` (n, F)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValidationError(f"features must be 2-D, got shape {features.shape}")
    n = features.shape[0]
    if n < 2:
        raise InsufficientSamplesError(f"need >= 2 samples to estimate covariance, got {n}")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) / 2.0
    return MomentSummary(mean=mean, covariance=cov, sample_count=n)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def compute_fid(real: MomentSummary, fake: MomentSummary) -> float:
    """Fréchet distance between two moment summaries; clamped to be >= 0."""
    if real.mean.shape != fake.mean.shape:
        raise ValidationError(
            f"feature dimensions differ: {real.mean.shape[0]} vs {fake.mean.shape[0]}"
        )
    mu_r = np.asarray(real.mean, dtype=np.float64)
    mu_f = np.asarray(fake.mean, dtype=np.float64)
    sig_r = np.asarray(real.covariance, dtype=np.float64)
    sig_f = np.asarray(fake.covariance, dtype=np.float64)

    try:
        half = _psd_sqrt((sig_f + sig_f.T) / 2.0)
        inner = half @ sig_r @ half
        inner = (inner + inner.T) / 2.0
        cross_vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance square root failed to converge: {exc}") from exc

    diff = mu_r - mu_f
    value = float(diff @ diff + np.trace(sig_r) + np.trace(sig_f) - 2.0 * np.sqrt(cross_vals).sum())
    if not np.isfinite(value):
        raise NumericalError("Fréchet distance evaluated to a non-finite value")
    return max(value, 0.0)


def ema_smooth(raw, alpha: float) -> list[float]:
    """Exponentially smooth a series: first value kept, then
    ``s_t = alpha * s_{t-1} + (1 - alpha) * d_t``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    raw = list(raw)
    if not raw:
        raise ValidationError("cannot smooth an empty series")
    out = [float(raw[0])]
    for value in raw[1:]:
        out.append(alpha * out[-1] + (1.0 - alpha) * float(value))
    return out


@dataclass(frozen=True)
class FidSeries:
    epochs: tuple[int, ...]
    raw: tuple[float, ...]
    smoothed: tuple[float, ...]
    alpha: float

    def __post_init__(self):
        if not (len(self.epochs) == len(self.raw) == len(self.smoothed)):
            raise ValidationError("epochs, raw and smoothed series must have equal length")


def pick_best_epoch(epochs, raw, alpha: float) -> tuple[int, FidSeries]:
    """Smooth the raw score series and return the epoch minimising it.

    Ties pick the earliest epoch.  Raises :class:`NumericalError` when no
    finite smoothed score exists.
    """
    smoothed = ema_smooth(raw, alpha)
    arr = np.asarray(smoothed, dtype=np.float64)
    if not np.isfinite(arr).any():
        raise NumericalError("all smoothed scores are non-finite")
    best = int(np.nanargmin(arr))
    series = FidSeries(
        epochs=tuple(int(e) for e in epochs),
        raw=tuple(float(v) for v in raw),
        smoothed=tuple(float(v) for v in smoothed),
        alpha=alpha,
    )
    return series.epochs[best], series


def write_fid_series(series: FidSeries, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "raw_fid", "smoothed_fid"])
        for epoch, raw, smoothed in zip(series.epochs, series.raw, series.smoothed):
            writer.writerow([epoch, f"{raw:.10g}", f"{smoothed:.10g}"])


def select_checkpoint(checkpoints, real_images, extractor, config, device="cpu"):
    """Score every checkpoint by feature-space FID and return the best one.

    For each checkpoint a fixed-size batch is generated (classes sampled
    proportionally to the train-split class sizes), pooled penultimate
    features are extracted, and the FID against the real train-split features
    is smoothed with the configured EMA weight.  Returns
    ``(best_checkpoint, FidSeries)``; ties resolve to the earliest epoch.
    """
    from .data import largest_remainder
    from .extractor import pooled_features
    from .gan.train import generate_images

    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValidationError("select_checkpoint needs at least one checkpoint")

    real_x, _ = _train_arrays(real_images)
    real_feats = pooled_features(extractor, real_x, device=device)
    real_moments = summarize_moments(real_feats)

    sizes = np.asarray(real_images.class_sizes, dtype=np.int64)
    sample_count = int(min(sizes.sum(), config.selection.fid_sample_cap))
    per_class = largest_remainder(sample_count, sizes)
    labels = np.repeat(np.arange(len(sizes)), per_class)

    raw_scores = []
    epochs = []
    for ckpt in checkpoints:
        fake = generate_images(
            ckpt, labels, seed=config.seed * 100003 + ckpt.epoch, device=device
        )
        fake_feats = pooled_features(extractor, fake, device=device)
        score = compute_fid(real_moments, summarize_moments(fake_feats))
        raw_scores.append(score)
        epochs.append(ckpt.epoch)
        logger.debug("fid epoch=%d raw=%.4f", ckpt.epoch, score)

    best_epoch, series = pick_best_epoch(epochs, raw_scores, config.selection.ema_alpha)
    best = next(c for c in checkpoints if c.epoch == best_epoch)
    return best, series


def _train_arrays(dataset):
    from .data import dataset_arrays

    return dataset_arrays(dataset, "train")
