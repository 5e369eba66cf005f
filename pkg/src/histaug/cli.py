"""Command-line interface.

Global flags select the config file, seed, and run directory; each
subcommand drives one pipeline stage against that run directory, so stages
can be run separately or all at once with ``run-all``::

    histaug --config cfg.yaml --out runs/exp0 prepare-data --toy
    histaug --config cfg.yaml --out runs/exp0 run-all
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from .config import ExperimentConfig, apply_overrides, load_config, save_config
from .data import (
    build_toy_dataset,
    load_dataset,
    save_dataset,
    split_by_patient,
    subset_fraction,
)
from .metrics import REGIMES, MetricsReport, write_results_csv

logger = logging.getLogger(__name__)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(), default=None, help="YAML config file.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_dir", type=click.Path(), default="run", help="Run directory.")
@click.option("--device", default=None, help="torch device (default: cpu, or cuda when available).")
@click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Dotted config override, e.g. gan.epochs=20 (repeatable).",
)
@click.pass_context
def main(ctx, config_path, seed, out_dir, device, overrides):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    config = load_config(config_path) if config_path else ExperimentConfig()
    parsed = {}
    for item in overrides:
        if "=" not in item:
            raise click.BadParameter(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        parsed[key] = yaml.safe_load(value)
    if parsed:
        config = apply_overrides(config, parsed)
    if seed is not None:
        config.seed = seed
    ctx.obj = {
        "config": config,
        "out": Path(out_dir),
        "device": device or "cpu",
    }


def _ctx(ctx):
    return ctx.obj["config"], ctx.obj["out"], ctx.obj["device"]


def _dataset(config):
    if not config.data_root:
        raise click.ClickException("config.data_root is not set; run prepare-data first")
    return load_dataset(config.data_root, config.profile)


def _extractor(config, out, dataset, device):
    from .extractor import load_extractor, save_extractor, train_extractor

    path = out / "extractor.pt"
    if path.exists():
        return load_extractor(path, device=device)
    extractor = train_extractor(dataset, config.classifier, seed=config.seed, device=device)
    save_extractor(extractor, path)
    return extractor


def _update_index(out: Path, **fields):
    path = out / "run_index.json"
    index = json.loads(path.read_text()) if path.exists() else {"stages": {}, "artifacts": {}}
    for key, value in fields.items():
        if isinstance(value, dict) and isinstance(index.get(key), dict):
            index[key].update(value)
        else:
            index[key] = value
    out.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(index, indent=2, sort_keys=True))


def _best_checkpoint(out):
    from .gan.train import CHECKPOINT_PATTERN, load_checkpoint

    index_path = out / "run_index.json"
    if not index_path.exists():
        raise click.ClickException("run index not found; run select-model first")
    best_epoch = json.loads(index_path.read_text()).get("best_epoch")
    if best_epoch is None:
        raise click.ClickException("no best_epoch recorded; run select-model first")
    return load_checkpoint(out / "checkpoints" / CHECKPOINT_PATTERN.format(epoch=best_epoch))


@main.command("prepare-data")
@click.option("--toy", is_flag=True, help="Generate the built-in toy dataset.")
@click.option("--root", "source_root", type=click.Path(), default=None, help="Existing dataset to re-split.")
@click.option("--ratios", default="0.7,0.1,0.2", show_default=True)
@click.option("--fraction", type=float, default=None, help="Stratified train-split fraction to keep.")
@click.option("--n-per-class", default="120,120", show_default=True, help="Toy class sizes.")
@click.option("--patients-per-class", type=int, default=10, show_default=True)
@click.pass_context
def prepare_data(ctx, toy, source_root, ratios, fraction, n_per_class, patients_per_class):
    """Build or re-split a dataset and write it to config.data_root."""
    config, out, _ = _ctx(ctx)
    ratios_t = tuple(float(x) for x in ratios.split(","))
    if not config.data_root:
        config.data_root = str(out / "data")
    if toy:
        sizes = tuple(int(x) for x in n_per_class.split(","))
        ds = build_toy_dataset(
            n_per_class=sizes,
            patients_per_class=patients_per_class,
            seed=config.seed,
            profile=config.profile,
            ratios=ratios_t,
        )
    elif source_root:
        ds = load_dataset(source_root, config.profile)
        ds = split_by_patient(ds, ratios_t, seed=config.seed)
    else:
        raise click.ClickException("pass --toy or --root DIR")
    if fraction is not None:
        ds = subset_fraction(ds, fraction, seed=config.seed)
    save_dataset(ds, config.data_root)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.yaml")
    click.echo(
        f"wrote {len(ds.patches)} patches ({ds.class_count} classes, "
        f"train sizes {ds.class_sizes}) to {config.data_root}"
    )


@main.command("train-gan")
@click.pass_context
def train_gan_cmd(ctx):
    """Train the multi-stage conditional GAN and save per-epoch checkpoints."""
    from .gan.train import train_gan

    config, out, device = _ctx(ctx)
    ds = _dataset(config)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.yaml")
    checkpoints = train_gan(ds, config, out_dir=out, device=device)
    _update_index(out, artifacts={"checkpoints": "checkpoints/", "gan_index": "gan_index.csv"})
    click.echo(f"trained GAN; {len(checkpoints)} checkpoints under {out / 'checkpoints'}")


@main.command("select-model")
@click.pass_context
def select_model(ctx):
    """Score checkpoints with smoothed feature-space FID and pick the best."""
    from .fid import select_checkpoint, write_fid_series
    from .gan.train import load_checkpoint_series

    config, out, device = _ctx(ctx)
    ds = _dataset(config)
    extractor = _extractor(config, out, ds, device)
    checkpoints = load_checkpoint_series(out / "checkpoints")
    best, series = select_checkpoint(checkpoints, ds, extractor, config, device=device)
    write_fid_series(series, out / "fid_series.csv")
    _update_index(out, best_epoch=best.epoch, artifacts={"fid_series": "fid_series.csv"})
    click.echo(f"best epoch {best.epoch} (smoothed FID {min(series.smoothed):.4f})")


@main.command("generate")
@click.pass_context
def generate_cmd(ctx):
    """Generate the per-class candidate pool from the selected checkpoint."""
    from .data import save_image
    from .selection import generate_pool

    config, out, device = _ctx(ctx)
    ds = _dataset(config)
    best = _best_checkpoint(out)
    pool = generate_pool(
        best,
        config.selection.ratio,
        ds.class_sizes,
        multiplier=config.selection.pool_multiplier,
        seed=config.seed,
        device=device,
    )
    pool_dir = out / "pool"
    with_pool_csv = pool_dir / "pool.csv"
    pool_dir.mkdir(parents=True, exist_ok=True)
    with with_pool_csv.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "class", "index", "score_seed"])
        for cand in pool:
            name = ds.class_names[cand.assigned_label]
            save_image(cand.image, pool_dir / name / f"{cand.candidate_id}.png")
            writer.writerow([cand.candidate_id, name, cand.index, cand.score_seed])
    click.echo(f"generated {len(pool)} candidates under {pool_dir}")


def _load_pool(out, ds):
    from .data import load_image
    from .selection import CandidateSample

    pool_csv = out / "pool" / "pool.csv"
    if not pool_csv.exists():
        raise click.ClickException("no candidate pool found; run generate first")
    name_to_label = {name: i for i, name in enumerate(ds.class_names)}
    pool = []
    with pool_csv.open() as fh:
        for row in csv.DictReader(fh):
            label = name_to_label[row["class"]]
            image = load_image(out / "pool" / row["class"] / f"{row['id']}.png")
            pool.append(
                CandidateSample(
                    image=image,
                    assigned_label=label,
                    candidate_id=row["id"],
                    index=int(row["index"]),
                    score_seed=int(row["score_seed"]),
                )
            )
    return pool


@main.command("select-images")
@click.pass_context
def select_images(ctx):
    """Score the pool and apply the entropy and centroid-distance filters."""
    import torch

    from .selection import build_centroids, select_candidates, write_selection_artifacts

    config, out, device = _ctx(ctx)
    ds = _dataset(config)
    extractor = _extractor(config, out, ds, device)
    pool = _load_pool(out, ds)
    centroids_path = out / "centroids.pt"
    if centroids_path.exists():
        centroids = torch.load(centroids_path, weights_only=False)
    else:
        centroids = build_centroids(ds, extractor, config, device=device)
        torch.save(centroids, centroids_path)
    selected, report = select_candidates(
        pool, extractor, centroids, ds.class_sizes, config, device=device
    )
    write_selection_artifacts(pool, report, ds.class_names, out, selected)
    _update_index(
        out,
        artifacts={
            "selection_report": "selection_report.txt",
            "selection_csv": "selection.csv",
            "selected_images": "selected/",
        },
    )
    click.echo(f"selected {len(selected)} of {len(pool)} candidates")


@main.command("train-classifier")
@click.option("--regime", type=click.Choice(REGIMES), default="baseline", show_default=True)
@click.pass_context
def train_classifier_cmd(ctx, regime):
    """Train and evaluate the downstream classifier under one regime."""
    from .data import load_image
    from .extractor import save_extractor
    from .harness import round_seed, train_classifier
    from .metrics import evaluate

    config, out, device = _ctx(ctx)
    ds = _dataset(config)
    extra = None
    if regime == "selective":
        selected_dir = out / "selected"
        if not selected_dir.exists():
            raise click.ClickException("no selected images; run select-images first")
        images, labels = [], []
        for label, name in enumerate(ds.class_names):
            for path in sorted((selected_dir / name).glob("*.png")):
                images.append(load_image(path))
                labels.append(label)
        if not images:
            raise click.ClickException("selected image set is empty")
        extra = (np.stack(images), np.asarray(labels, dtype=np.int64))
    elif regime == "gan_aug":
        from .gan.train import generate_images
        from .selection import class_quotas

        best = _best_checkpoint(out)
        quotas = class_quotas(ds.class_sizes, config.selection.ratio)
        labels = np.repeat(np.arange(ds.class_count), quotas)
        images = generate_images(best, labels, seed=config.seed, device=device)
        extra = (images, labels)

    report = MetricsReport(regime=regime)
    for rnd in range(config.classifier.runs):
        seed = round_seed(config.seed, rnd)
        clf = train_classifier(ds, extra, regime, config, seed=seed, device=device)
        save_extractor(clf, out / "classifiers" / f"{regime}_round{rnd}.pt")
        report.runs.append(evaluate(clf, ds, device=device, seed=seed))
    write_results_csv([report], out / f"results_{regime}.csv")
    agg = report.aggregate()
    click.echo(
        f"{regime}: "
        + "  ".join(f"{k}={mean:.4f}±{std:.4f}" for k, (mean, std) in agg.items())
    )


@main.command("evaluate")
@click.option("--classifier", "classifier_path", type=click.Path(exists=True), required=True)
@click.pass_context
def evaluate_cmd(ctx, classifier_path):
    """Evaluate a saved classifier on the test split."""
    from .extractor import load_extractor
    from .metrics import evaluate

    config, out, device = _ctx(ctx)
    ds = _dataset(config)
    clf = load_extractor(classifier_path, device=device)
    metrics = evaluate(clf, ds, device=device)
    for name, value in metrics.as_dict().items():
        click.echo(f"{name}: {value:.4f}")


@main.command("sweep")
@click.option("--pools", default="2,4,6,8", show_default=True, help="Pool multipliers (xN).")
@click.option("--ratios", default="0.4,0.5,0.6,0.8,1.0", show_default=True)
@click.option("--no-train", is_flag=True, help="Only compute feasibility and selections.")
@click.pass_context
def sweep_cmd(ctx, pools, ratios, no_train):
    """Ablate candidate pool sizes against augmentation ratios."""
    import torch

    from .harness import sweep_ablation
    from .selection import build_centroids

    config, out, device = _ctx(ctx)
    ds = _dataset(config)
    extractor = _extractor(config, out, ds, device)
    best = _best_checkpoint(out)
    centroids_path = out / "centroids.pt"
    if centroids_path.exists():
        centroids = torch.load(centroids_path, weights_only=False)
    else:
        centroids = build_centroids(ds, extractor, config, device=device)
        torch.save(centroids, centroids_path)
    grid = sweep_ablation(
        config,
        [int(x) for x in pools.split(",")],
        [float(x) for x in ratios.split(",")],
        ds,
        best,
        extractor,
        centroids,
        device=device,
        out_dir=out,
        train_cells=not no_train,
    )
    feasible = sum(1 for v in grid.cells.values() if v is not None)
    click.echo(f"sweep done: {feasible}/{len(grid.cells)} feasible cells -> {out / 'ablation.csv'}")


@main.command("plot")
@click.pass_context
def plot_cmd(ctx):
    """Emit FID curves, t-SNE embedding, and attention overlays."""
    from .plots import emit_plots

    config, out, device = _ctx(ctx)
    emitted = emit_plots(out, device=device)
    for path in emitted:
        click.echo(f"wrote {path}")
    if not emitted:
        click.echo("no plots emitted (missing artifacts)")


@main.command("run-all")
@click.pass_context
def run_all(ctx):
    """Run the whole pipeline: extractor, GAN, selection, classifiers, plots."""
    from .harness import run_experiment

    config, out, device = _ctx(ctx)
    result = run_experiment(config, out, device=device)
    failed = {k: v for k, v in result.run_index["stages"].items() if v.startswith("failed")}
    for report in result.reports:
        agg = report.aggregate()
        click.echo(
            f"{report.regime}: "
            + "  ".join(f"{k}={mean:.4f}±{std:.4f}" for k, (mean, std) in agg.items())
        )
    if failed:
        click.echo(f"stages failed: {failed}", err=True)
        sys.exit(1)
    click.echo(f"run complete; artifacts under {out}")


if __name__ == "__main__":
    main()
