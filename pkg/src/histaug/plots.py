"""Plot emission from a run directory's persisted artifacts.

Emits the raw/smoothed FID curves, a 2-D t-SNE embedding of real versus
selected versus rejected features, and per-class attention overlays from
the first generation stage.  Each plot is skipped with a warning when its
inputs are missing, so partial runs still render what they can.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
from sklearn.manifold import TSNE

from .config import load_config
from .data import dataset_arrays, load_dataset
from .errors import HistaugError
from .extractor import load_extractor, pooled_features
from .gan.train import CHECKPOINT_PATTERN, generator_from_checkpoint, load_checkpoint
from .selection import generate_pool

logger = logging.getLogger(__name__)


def emit_plots(run_dir: str | Path, device: str = "cpu") -> list[Path]:
    run_dir = Path(run_dir)
    plot_dir = run_dir / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)
    emitted: list[Path] = []

    for name, fn in (
        ("fid_curve.png", _plot_fid),
        ("tsne.png", _plot_tsne),
        ("attention.png", _plot_attention),
    ):
        target = plot_dir / name
        try:
            ok = fn(run_dir, target, device)
        except (FileNotFoundError, HistaugError) as exc:
            logger.warning("skipping %s: missing artifact (%s)", name, exc)
            continue
        if ok:
            emitted.append(target)
    return emitted


def _best_checkpoint(run_dir: Path):
    import json

    index_path = run_dir / "run_index.json"
    if not index_path.exists():
        raise FileNotFoundError(index_path)
    index = json.loads(index_path.read_text())
    best_epoch = index.get("best_epoch")
    if best_epoch is None:
        raise FileNotFoundError("run index has no best_epoch record")
    path = run_dir / "checkpoints" / CHECKPOINT_PATTERN.format(epoch=best_epoch)
    if not path.exists():
        raise FileNotFoundError(path)
    return load_checkpoint(path)


def _plot_fid(run_dir: Path, target: Path, device: str) -> bool:
    series_path = run_dir / "fid_series.csv"
    if not series_path.exists():
        raise FileNotFoundError(series_path)
    epochs, raw, smoothed = [], [], []
    with series_path.open() as fh:
        for row in csv.DictReader(fh):
            epochs.append(int(row["epoch"]))
            raw.append(float(row["raw_fid"]))
            smoothed.append(float(row["smoothed_fid"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, raw, label="raw", color="tab:gray", alpha=0.7)
    ax.plot(epochs, smoothed, label="smoothed", color="tab:blue", linewidth=2)
    best = epochs[int(np.argmin(smoothed))]
    ax.axvline(best, color="tab:red", linestyle="--", label=f"selected epoch {best}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("feature-space FID")
    ax.legend()
    fig.tight_layout()
    fig.savefig(target, dpi=120)
    plt.close(fig)
    return True


def _plot_tsne(run_dir: Path, target: Path, device: str) -> bool:
    config_path = run_dir / "config.yaml"
    extractor_path = run_dir / "extractor.pt"
    selection_path = run_dir / "selection.csv"
    for p in (config_path, extractor_path, selection_path):
        if not p.exists():
            raise FileNotFoundError(p)
    config = load_config(config_path)
    extractor = load_extractor(extractor_path, device=device)
    best = _best_checkpoint(run_dir)
    dataset = load_dataset(config.data_root, config.profile)

    real_x, _ = dataset_arrays(dataset, "train")
    # the candidate pool is a pure function of (checkpoint, seed, config)
    pool = generate_pool(
        best,
        config.selection.ratio,
        dataset.class_sizes,
        multiplier=config.selection.pool_multiplier,
        seed=config.seed,
        device=device,
    )
    selected_ids = set()
    with selection_path.open() as fh:
        for row in csv.DictReader(fh):
            if row["passed_distance"] == "True":
                selected_ids.add(row["id"])

    pool_x = np.stack([c.image for c in pool])
    feats = pooled_features(extractor, np.concatenate([real_x, pool_x]), device=device)
    n_samples = feats.shape[0]
    perplexity = max(2, min(30, (n_samples - 1) // 3))
    embedding = TSNE(
        n_components=2, perplexity=perplexity, max_iter=1000, random_state=config.seed, init="pca"
    ).fit_transform(feats)

    real_emb = embedding[: len(real_x)]
    pool_emb = embedding[len(real_x) :]
    is_selected = np.asarray([c.candidate_id in selected_ids for c in pool])

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(real_emb[:, 0], real_emb[:, 1], s=8, c="tab:gray", label="real", alpha=0.6)
    ax.scatter(
        pool_emb[~is_selected, 0], pool_emb[~is_selected, 1], s=8, c="tab:red",
        label="rejected", alpha=0.6,
    )
    ax.scatter(
        pool_emb[is_selected, 0], pool_emb[is_selected, 1], s=8, c="tab:green",
        label="selected", alpha=0.8,
    )
    ax.set_title("t-SNE of penultimate features")
    ax.legend()
    fig.tight_layout()
    fig.savefig(target, dpi=120)
    plt.close(fig)
    return True


def _plot_attention(run_dir: Path, target: Path, device: str, per_class: int = 3) -> bool:
    best = _best_checkpoint(run_dir)
    gen = generator_from_checkpoint(best, device)
    class_count = best.class_count
    rng = torch.Generator().manual_seed(1234)

    rows = class_count
    fig, axes = plt.subplots(rows, per_class, figsize=(3 * per_class, 3 * rows), squeeze=False)
    with torch.no_grad():
        for label in range(class_count):
            z = torch.randn(per_class, gen.noise_dim, generator=rng).to(device)
            y = torch.full((per_class,), label, dtype=torch.long, device=device)
            pyramid, attention = gen(z, y, return_attention=True)
            imgs = ((pyramid.final.clamp(-1, 1) + 1) / 2).permute(0, 2, 3, 1).cpu().numpy()
            h1, w1 = pyramid.images[0].shape[-2:]
            # how much each location is attended to, averaged over queries
            mass = attention.mean(dim=1).reshape(per_class, 1, h1, w1)
            mass = torch.nn.functional.interpolate(
                mass, size=imgs.shape[1:3], mode="bilinear", align_corners=False
            )[:, 0].cpu().numpy()
            for j in range(per_class):
                m = mass[j]
                span = m.max() - m.min()
                m = (m - m.min()) / span if span > 0 else np.zeros_like(m)
                ax = axes[label][j]
                ax.imshow(imgs[j])
                ax.imshow(m, cmap="jet", alpha=0.4)
                ax.set_axis_off()
                if j == 0:
                    name = best.class_names[label] if best.class_names else str(label)
                    ax.set_title(name, fontsize=9)
    fig.tight_layout()
    fig.savefig(target, dpi=120)
    plt.close(fig)
    return True
