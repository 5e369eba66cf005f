"""End-to-end experiment orchestration.

A run directory accumulates: a config snapshot, GAN checkpoints and their
loss index, the FID series, the candidate pool and selection artifacts,
per-regime classifiers, a per-run results table with a mean/std summary,
and plots.  ``run_experiment`` executes the stages in order; a stage
failure is recorded in ``run_index.json`` and later stages are skipped.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .augment import traditional_augment
from .config import ExperimentConfig, config_fingerprint, save_config
from .data import PatchDataset, dataset_arrays, load_dataset
from .errors import ValidationError
from .extractor import (
    PatchClassifier,
    TrainedExtractor,
    save_extractor,
    to_chw,
    train_extractor,
    write_feature_records,
)
from .fid import select_checkpoint, write_fid_series
from .metrics import (
    REGIMES,
    MetricsReport,
    evaluate,
    write_results_csv,
    write_summary_csv,
)
from .selection import (
    ablation_selections,
    build_centroids,
    class_quotas,
    entropy_filter,
    generate_pool,
    run_selection,
    score_distances,
    score_entropies,
)

logger = logging.getLogger(__name__)

AUGMENTED_REGIMES = ("gan_aug", "selective")


def build_training_multiset(
    dataset: PatchDataset,
    extra: tuple[np.ndarray, np.ndarray] | None,
    regime: str,
):
    """Combine the train split with regime-specific extra images.

    Only the training multiset differs between regimes; architecture and
    hyperparameters stay identical.
    """
    if regime not in REGIMES:
        raise ValidationError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    train_x, train_y = dataset_arrays(dataset, "train")
    if regime in AUGMENTED_REGIMES:
        if extra is None or len(extra[0]) == 0:
            raise ValidationError(f"regime {regime!r} requires extra images")
        extra_x, extra_y = extra
        return (
            np.concatenate([train_x, np.asarray(extra_x, dtype=np.float32)]),
            np.concatenate([train_y, np.asarray(extra_y, dtype=np.int64)]),
        )
    if extra is not None and len(extra[0]) > 0:
        raise ValidationError(f"regime {regime!r} must not receive extra images")
    return train_x, train_y


def train_classifier(
    dataset: PatchDataset,
    extra,
    regime: str,
    config: ExperimentConfig,
    seed: int,
    device: str = "cpu",
) -> TrainedExtractor:
    """Train one downstream classifier under the given augmentation regime.

    The traditional regime re-draws flip/jitter transforms every epoch; the
    other regimes train on their (fixed) multisets directly.  Keeps the
    best-validation-accuracy parameters.
    """
    cls_cfg = config.classifier
    train_x, train_y = build_training_multiset(dataset, extra, regime)
    val_x, val_y = dataset_arrays(dataset, "val")
    if val_x.shape[0] == 0:
        val_x, val_y = train_x, train_y

    torch.manual_seed(seed)
    model = PatchClassifier(
        class_count=dataset.class_count,
        stage_blocks=cls_cfg.stage_blocks,
        stage_channels=cls_cfg.stage_channels,
        dropout_rate=cls_cfg.dropout_rate,
    ).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=cls_cfg.learning_rate)
    ys = torch.from_numpy(train_y).to(device)
    shuffler = torch.Generator().manual_seed(seed)
    aug_rng = np.random.default_rng(seed)

    best_acc, best_state = -1.0, None
    for epoch in range(cls_cfg.epochs):
        if regime == "traditional":
            epoch_x = np.stack([traditional_augment(img, aug_rng) for img in train_x])
        else:
            epoch_x = train_x
        xs = to_chw(epoch_x).to(device)
        model.train()
        order = torch.randperm(len(ys), generator=shuffler)
        for start in range(0, len(ys), cls_cfg.batch_size):
            idx = order[start : start + cls_cfg.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(model(xs[idx]), ys[idx])
            loss.backward()
            opt.step()
        acc = _val_accuracy(model, val_x, val_y, cls_cfg.batch_size, device)
        if acc > best_acc:
            best_acc = acc
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    model.load_state_dict(best_state)
    model.eval()
    return TrainedExtractor(model=model, class_names=dataset.class_names, val_accuracy=best_acc)


def _val_accuracy(model, images, labels, batch_size, device):
    model.eval()
    xs = to_chw(images).to(device)
    hits = 0
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            pred = model(xs[start : start + batch_size]).argmax(dim=1).cpu().numpy()
            hits += int((pred == labels[start : start + batch_size]).sum())
    return hits / max(len(labels), 1)


def round_seed(base_seed: int, round_index: int) -> int:
    """Per-round training seed, shared across regimes, never repeated."""
    return base_seed + 1000 * (round_index + 1)


@dataclass
class ExperimentResult:
    reports: list[MetricsReport] = field(default_factory=list)
    best_epoch: int | None = None
    run_index: dict = field(default_factory=dict)
    selected_count: int = 0


def run_experiment(
    config: ExperimentConfig,
    out_dir: str | Path,
    regimes=REGIMES,
    device: str = "cpu",
    dataset: PatchDataset | None = None,
    with_plots: bool = True,
) -> ExperimentResult:
    """Execute the full pipeline: data, extractor, GAN, model selection,
    candidate selection, per-regime classifier training, results, plots."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = ExperimentResult()
    index: dict = {"profile": config.profile, "seed": config.seed, "stages": {}, "artifacts": {}}
    result.run_index = index

    def record(stage: str, status: str):
        index["stages"][stage] = status
        (out_dir / "run_index.json").write_text(json.dumps(index, indent=2, sort_keys=True))

    save_config(config, out_dir / "config.yaml")
    index["artifacts"]["config"] = "config.yaml"

    stages = [
        "dataset",
        "extractor",
        "gan",
        "model_selection",
        "image_selection",
        "classifiers",
        "plots",
    ]
    state: dict = {"dataset": dataset}
    for stage in stages:
        if stage == "plots" and not with_plots:
            record(stage, "skipped")
            continue
        try:
            _run_stage(stage, state, config, out_dir, regimes, device, index, result)
            record(stage, "ok")
        except Exception as exc:  # record the failure, skip the rest
            logger.exception("stage %s failed", stage)
            record(stage, f"failed: {exc}")
            for later in stages[stages.index(stage) + 1 :]:
                record(later, "skipped")
            break
    return result


def _run_stage(stage, state, config, out_dir, regimes, device, index, result):
    if stage == "dataset":
        if state.get("dataset") is None:
            state["dataset"] = load_dataset(config.data_root, config.profile)
        state["dataset"].validate()

    elif stage == "extractor":
        extractor = train_extractor(state["dataset"], config.classifier, seed=config.seed, device=device)
        save_extractor(extractor, out_dir / "extractor.pt")
        index["artifacts"]["extractor"] = "extractor.pt"
        state["extractor"] = extractor

    elif stage == "gan":
        from .gan.train import train_gan

        state["checkpoints"] = train_gan(state["dataset"], config, out_dir=out_dir, device=device)
        index["artifacts"]["checkpoints"] = "checkpoints/"
        index["artifacts"]["gan_index"] = "gan_index.csv"

    elif stage == "model_selection":
        best, series = select_checkpoint(
            state["checkpoints"], state["dataset"], state["extractor"], config, device=device
        )
        write_fid_series(series, out_dir / "fid_series.csv")
        index["artifacts"]["fid_series"] = "fid_series.csv"
        index["best_epoch"] = best.epoch
        result.best_epoch = best.epoch
        state["best"] = best

    elif stage == "image_selection":
        ds = state["dataset"]
        centroids = build_centroids(ds, state["extractor"], config, device=device)
        torch.save(centroids, out_dir / "centroids.pt")
        index["artifacts"]["centroids"] = "centroids.pt"
        selected, report = run_selection(
            state["best"],
            state["extractor"],
            centroids,
            ds.class_sizes,
            config,
            out_dir=out_dir,
            device=device,
        )
        state["selected"] = selected
        state["report"] = report
        result.selected_count = len(selected)
        index["artifacts"]["selection_report"] = "selection_report.txt"
        index["artifacts"]["selection_csv"] = "selection.csv"
        index["artifacts"]["selected_images"] = "selected/"
        _write_feature_export(report, out_dir, config)
        index["artifacts"]["features"] = "features.csv"

    elif stage == "classifiers":
        ds = state["dataset"]
        reports = _train_regimes(ds, state, config, regimes, device, out_dir)
        result.reports = reports
        write_results_csv(reports, out_dir / "results.csv")
        write_summary_csv(reports, out_dir / "results_summary.csv")
        index["artifacts"]["results"] = "results.csv"
        index["artifacts"]["results_summary"] = "results_summary.csv"

    elif stage == "plots":
        from .plots import emit_plots

        emitted = emit_plots(out_dir, device=device)
        index["artifacts"]["plots"] = [str(p.relative_to(out_dir)) for p in emitted]

    else:  # pragma: no cover
        raise ValidationError(f"unknown stage {stage}")


def _write_feature_export(report, out_dir, config):
    import csv as _csv

    records = []
    with (out_dir / "selection.csv").open() as fh:
        for row in _csv.DictReader(fh):
            records.append(
                {
                    "id": row["id"],
                    "label": row["class"],
                    "entropy": float(row["entropy"]) if row["entropy"] else None,
                    "distance": float(row["distance"]) if row["distance"] else None,
                    "K": config.selection.mc_runs,
                }
            )
    write_feature_records(records, out_dir / "features.csv")


def _train_regimes(ds, state, config, regimes, device, out_dir):
    fingerprints = set()
    reports = []
    for regime in regimes:
        report = MetricsReport(regime=regime)
        for rnd in range(config.classifier.runs):
            seed = round_seed(config.seed, rnd)
            extra = _regime_extra(regime, state, ds, config, seed, device)
            clf = train_classifier(ds, extra, regime, config, seed=seed, device=device)
            save_extractor(clf, out_dir / "classifiers" / f"{regime}_round{rnd}.pt")
            metrics = evaluate(clf, ds, device=device, seed=seed)
            report.runs.append(metrics)
            logger.info("regime=%s round=%d acc=%.4f", regime, rnd, metrics.accuracy)
        fingerprints.add(config_fingerprint(config.classifier))
        reports.append(report)
    if len(fingerprints) != 1:
        raise ValidationError("classifier config differed between regimes")
    return reports


def _regime_extra(regime, state, ds, config, seed, device):
    """Extra training images for a regime: the selected set, or an unselected
    random draw of the same per-class sizes for plain GAN augmentation."""
    if regime not in AUGMENTED_REGIMES:
        return None
    selected = state.get("selected", [])
    if regime == "selective":
        if not selected:
            raise ValidationError("selective regime needs a non-empty selected set")
        images = np.stack([c.image for c in selected])
        labels = np.asarray([c.assigned_label for c in selected], dtype=np.int64)
        return images, labels

    # gan_aug: same quota per class, random draw from the same pool, no filters
    from .gan.train import generate_images

    quotas = class_quotas(ds.class_sizes, config.selection.ratio)
    labels = np.repeat(np.arange(ds.class_count), quotas)
    images = generate_images(state["best"], labels, seed=seed, device=device)
    return images, labels


@dataclass
class AblationGrid:
    pool_sizes: tuple[int, ...]
    ratios: tuple[float, ...]
    cells: dict[tuple[int, float], MetricsReport | None] = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        import csv as _csv

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["pool_multiplier", "ratio", "feasible", "accuracy_mean", "accuracy_std"])
            for (m, r), report in sorted(self.cells.items()):
                if report is None:
                    writer.writerow([m, f"{r:.10g}", "no", "", ""])
                elif not report.runs:
                    writer.writerow([m, f"{r:.10g}", "yes", "", ""])
                else:
                    mean, std = report.aggregate()["accuracy"]
                    writer.writerow([m, f"{r:.10g}", "yes", f"{mean:.10g}", f"{std:.10g}"])


def sweep_ablation(
    config: ExperimentConfig,
    pool_sizes,
    ratios,
    dataset: PatchDataset,
    best,
    extractor: TrainedExtractor,
    centroids,
    device: str = "cpu",
    out_dir: str | Path | None = None,
    train_cells: bool = True,
) -> AblationGrid:
    """Ablate pool size and augmentation ratio.

    For each pool multiplier ``m`` one pool of ``m * N_i`` candidates per
    class is generated and scored once; every ratio then draws its nested
    quota from that same pool.  Ratios whose quota cannot be met after the
    two halvings are marked infeasible.  With ``train_cells=False`` the grid
    carries feasibility/selection only (no classifier training).
    """
    grid = AblationGrid(pool_sizes=tuple(pool_sizes), ratios=tuple(ratios))
    sizes = dataset.class_sizes
    for m in pool_sizes:
        pool = generate_pool(
            best, 1.0, sizes, multiplier=m, seed=config.seed * 31 + m, device=device
        )
        score_entropies(pool, extractor, config.selection.mc_runs, device=device)
        x1 = entropy_filter(pool)
        score_distances(x1, extractor, centroids, config.selection.mc_runs, device=device)
        selections = ablation_selections(pool, sizes, ratios, centroids)
        by_id = {c.candidate_id: c for c in pool}

        for r in ratios:
            ids = selections[r]
            if ids is None:
                grid.cells[(m, r)] = None
                logger.warning("ablation cell pool=%dN ratio=%.3g infeasible", m, r)
                continue
            report = MetricsReport(regime=f"selective_pool{m}_r{r:g}")
            if train_cells:
                chosen = [by_id[i] for i in ids]
                images = np.stack([c.image for c in chosen])
                labels = np.asarray([c.assigned_label for c in chosen], dtype=np.int64)
                for rnd in range(config.classifier.runs):
                    seed = round_seed(config.seed * 17 + m * 5 + int(r * 1000), rnd)
                    clf = train_classifier(
                        dataset, (images, labels), "selective", config, seed=seed, device=device
                    )
                    report.runs.append(evaluate(clf, dataset, device=device, seed=seed))
            grid.cells[(m, r)] = report
    if out_dir is not None:
        grid.to_csv(Path(out_dir) / "ablation.csv")
    return grid
