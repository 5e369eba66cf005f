"""Candidate pool generation and two-stage selection of synthetic samples.

The pipeline over-generates a per-class candidate pool, keeps the
lower-entropy half of each class, then keeps the centroid-nearer half of
the survivors, and finally truncates each class to its quota
``round_half_up(ratio * N_i)``.  Filters keep exactly ``floor(n/2)``
members (rank-based rather than a strict below-median predicate, so tied
scores cannot shrink the kept set) with ties broken by ascending candidate
index.  Scoring is a pure function of (checkpoint, seed, config), so a
repeated run reproduces its report byte for byte.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import round_half_up, save_image
from .errors import ValidationError
from .extractor import (
    ClassCentroid,
    TrainedExtractor,
    class_centroid,
    feature_distance,
    mc_forward,
    predictive_entropy,
)

logger = logging.getLogger(__name__)


@dataclass
class CandidateSample:
    image: np.ndarray  # float32 (H, W, 3) in [0, 1]
    assigned_label: int
    candidate_id: str
    index: int
    score_seed: int
    entropy: float | None = None
    distance: float | None = None
    passed_entropy: bool = False
    passed_distance: bool = False


@dataclass
class ClassSelectionStats:
    pool_size: int
    entropy_median: float | None = None
    distance_median: float | None = None
    quota: int = 0
    selected_count: int = 0


@dataclass
class SelectionReport:
    ratio: float
    mc_runs: int
    pool_multiplier: int
    seed: int
    class_names: tuple[str, ...]
    per_class: dict[int, ClassSelectionStats]
    x1_ids: tuple[str, ...] = ()
    selected_ids: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()
    failure: str | None = None

    def to_text(self) -> str:
        lines = [
            "selection report",
            "================",
            f"ratio: {self.ratio:.10g}",
            f"mc_runs: {self.mc_runs}",
            f"pool_multiplier: {self.pool_multiplier}",
            f"seed: {self.seed}",
        ]
        for label in sorted(self.per_class):
            stats = self.per_class[label]
            lines.append(f"class {self.class_names[label]}:")
            lines.append(f"  pool_size: {stats.pool_size}")
            lines.append(f"  entropy_median: {_fmt(stats.entropy_median)}")
            lines.append(f"  distance_median: {_fmt(stats.distance_median)}")
            lines.append(f"  quota: {stats.quota}")
            lines.append(f"  selected_count: {stats.selected_count}")
        lines.append(f"x1_ids: {','.join(self.x1_ids)}")
        lines.append(f"selected_ids: {','.join(self.selected_ids)}")
        for warning in self.warnings:
            lines.append(f"warning: {warning}")
        if self.failure:
            lines.append(f"FAILED: {self.failure}")
        return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    return "none" if value is None else f"{value:.10g}"


def pool_count(ratio: float, class_size: int, multiplier: int) -> int:
    return multiplier * math.ceil(ratio * class_size)


def class_quotas(class_sizes, ratio: float) -> list[int]:
    """Per-class selection target: ratio * N_i rounded half-up."""
    if ratio <= 0:
        raise ValidationError("ratio must be > 0")
    return [round_half_up(ratio * int(n)) for n in class_sizes]


def generate_pool(
    best,
    ratio: float,
    class_sizes,
    multiplier: int = 4,
    seed: int = 0,
    device: str = "cpu",
) -> list[CandidateSample]:
    """Sample ``multiplier * ceil(ratio * N_i)`` candidates per class from the
    chosen checkpoint, tagging each with its conditioning label and seeds."""
    from .gan.train import generate_images, generator_from_checkpoint

    if ratio <= 0:
        raise ValidationError("ratio must be > 0")
    if multiplier < 1:
        raise ValidationError("multiplier must be >= 1")
    if best.class_count != len(class_sizes):
        raise ValidationError(
            f"checkpoint has {best.class_count} classes but got {len(class_sizes)} class sizes"
        )
    gen = generator_from_checkpoint(best, device)
    class_names = best.class_names or tuple(str(i) for i in range(best.class_count))

    candidates: list[CandidateSample] = []
    index = 0
    for label, size in enumerate(class_sizes):
        count = pool_count(ratio, int(size), multiplier)
        gen_seed = seed * 1000003 + label
        images = generate_images(
            best, np.full(count, label, dtype=np.int64), seed=gen_seed, device=device, generator=gen
        )
        for j in range(count):
            candidates.append(
                CandidateSample(
                    image=images[j],
                    assigned_label=label,
                    candidate_id=f"{class_names[label]}_{j:05d}",
                    index=index,
                    score_seed=_derive_seed(seed, index),
                )
            )
            index += 1
    return candidates


def _derive_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([abs(int(base_seed)), int(index)]).generate_state(1)[0])


def _by_class(candidates) -> dict[int, list[CandidateSample]]:
    groups: dict[int, list[CandidateSample]] = {}
    for cand in candidates:
        groups.setdefault(cand.assigned_label, []).append(cand)
    return groups


def score_entropies(
    candidates, extractor: TrainedExtractor, mc_runs: int, device: str = "cpu"
) -> None:
    """Fill each candidate's mean predictive entropy over its MC runs."""
    for cand in candidates:
        runs = mc_forward(extractor, cand.image, mc_runs, seed=cand.score_seed, device=device)
        cand.entropy = predictive_entropy(runs)


def score_distances(
    candidates,
    extractor: TrainedExtractor,
    centroids: dict[int, ClassCentroid],
    mc_runs: int,
    device: str = "cpu",
) -> None:
    """Fill centroid distances; reuses each candidate's seed so the MC draws
    match the entropy pass exactly."""
    for cand in candidates:
        if cand.assigned_label not in centroids:
            raise ValidationError(f"no centroid for class {cand.assigned_label}")
        runs = mc_forward(extractor, cand.image, mc_runs, seed=cand.score_seed, device=device)
        cand.distance = feature_distance(runs, centroids[cand.assigned_label])


def entropy_filter(pool) -> list[CandidateSample]:
    """Keep exactly floor(n/2) lowest-entropy candidates per class."""
    pool = list(pool)
    if not pool:
        raise ValidationError("entropy_filter got an empty pool")
    survivors = []
    for label, members in sorted(_by_class(pool).items()):
        if any(c.entropy is None for c in members):
            raise ValidationError(f"class {label} has unscored candidates")
        ranked = sorted(members, key=lambda c: (c.entropy, c.index))
        keep = len(members) // 2
        for cand in ranked[:keep]:
            cand.passed_entropy = True
            survivors.append(cand)
    survivors.sort(key=lambda c: c.index)
    return survivors


def distance_filter(survivors, centroids: dict[int, ClassCentroid]) -> list[CandidateSample]:
    """Keep exactly floor(n/2) smallest-distance survivors per class."""
    survivors = list(survivors)
    if not survivors:
        raise ValidationError("distance_filter got an empty survivor set")
    kept = []
    for label, members in sorted(_by_class(survivors).items()):
        if label not in centroids:
            raise ValidationError(f"no centroid for class {label}")
        if any(c.distance is None for c in members):
            raise ValidationError(f"class {label} has survivors without distances")
        ranked = sorted(members, key=lambda c: (c.distance, c.index))
        keep = len(members) // 2
        for cand in ranked[:keep]:
            cand.passed_distance = True
            kept.append(cand)
    kept.sort(key=lambda c: c.index)
    return kept


def select_candidates(
    candidates,
    extractor: TrainedExtractor,
    centroids: dict[int, ClassCentroid],
    class_sizes,
    config: ExperimentConfig,
    seed: int | None = None,
    device: str = "cpu",
) -> tuple[list[CandidateSample], SelectionReport]:
    """Run the full scoring and filtering chain over an existing pool.

    Returns the selected candidates (quota-truncated per class) and an audit
    report.  Scores already present on candidates are kept, so synthetic
    pools with hand-assigned scores can exercise the filter chain directly.
    """
    sel = config.selection
    seed = config.seed if seed is None else seed
    candidates = list(candidates)

    if any(c.entropy is None for c in candidates):
        score_entropies(candidates, extractor, sel.mc_runs, device=device)
    x1 = entropy_filter(candidates)
    if any(c.distance is None for c in x1):
        score_distances(x1, extractor, centroids, sel.mc_runs, device=device)
    x_full = distance_filter(x1, centroids)

    quotas = class_quotas(class_sizes, sel.ratio)
    groups = _by_class(x_full)
    warnings: list[str] = []
    selected: list[CandidateSample] = []
    per_class: dict[int, ClassSelectionStats] = {}
    class_names = extractor.class_names if extractor is not None else tuple(
        str(i) for i in range(len(class_sizes))
    )

    for label, members in sorted(_by_class(candidates).items()):
        quota = quotas[label] if label < len(quotas) else 0
        stats = ClassSelectionStats(
            pool_size=len(members),
            entropy_median=float(np.median([c.entropy for c in members])),
            quota=quota,
        )
        survivors = [c for c in x1 if c.assigned_label == label]
        if survivors:
            stats.distance_median = float(np.median([c.distance for c in survivors]))
        final = sorted(groups.get(label, []), key=lambda c: (c.distance, c.index))
        if quota == 0:
            warnings.append(f"class {class_names[label]} has quota 0; contributes no images")
        if quota > len(final):
            warnings.append(
                f"class {class_names[label]} quota {quota} exceeds available "
                f"{len(final)} filtered candidates; selecting {len(final)}"
            )
        take = final[: min(quota, len(final))]
        stats.selected_count = len(take)
        selected.extend(take)
        per_class[label] = stats

    selected.sort(key=lambda c: c.index)
    report = SelectionReport(
        ratio=sel.ratio,
        mc_runs=sel.mc_runs,
        pool_multiplier=sel.pool_multiplier,
        seed=seed,
        class_names=tuple(class_names),
        per_class=per_class,
        x1_ids=tuple(c.candidate_id for c in x1),
        selected_ids=tuple(c.candidate_id for c in selected),
        warnings=tuple(warnings),
    )
    for warning in warnings:
        logger.warning(warning)
    return selected, report


def run_selection(
    best,
    extractor: TrainedExtractor,
    centroids: dict[int, ClassCentroid],
    class_sizes,
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    seed: int | None = None,
    device: str = "cpu",
) -> tuple[list[CandidateSample], SelectionReport]:
    """Generate a pool from the chosen checkpoint, select, and write artifacts.

    On a scoring failure the report is still written with a failure marker
    before the error propagates.
    """
    sel = config.selection
    seed = config.seed if seed is None else seed
    pool = generate_pool(
        best, sel.ratio, class_sizes, multiplier=sel.pool_multiplier, seed=seed, device=device
    )
    try:
        selected, report = select_candidates(
            pool, extractor, centroids, class_sizes, config, seed=seed, device=device
        )
    except Exception as exc:
        if out_dir is not None:
            report = SelectionReport(
                ratio=sel.ratio,
                mc_runs=sel.mc_runs,
                pool_multiplier=sel.pool_multiplier,
                seed=seed,
                class_names=extractor.class_names,
                per_class={
                    label: ClassSelectionStats(pool_size=len(members))
                    for label, members in sorted(_by_class(pool).items())
                },
                failure=str(exc),
            )
            write_selection_artifacts(pool, report, extractor.class_names, out_dir)
        raise
    if out_dir is not None:
        write_selection_artifacts(pool, report, extractor.class_names, out_dir, selected)
    return selected, report


def write_selection_artifacts(
    pool, report: SelectionReport, class_names, out_dir: str | Path, selected=None
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "selection_report.txt").write_text(report.to_text())
    write_selection_csv(pool, class_names, out_dir / "selection.csv")
    for cand in selected or []:
        name = class_names[cand.assigned_label]
        save_image(cand.image, out_dir / "selected" / name / f"{cand.candidate_id}.png")


def write_selection_csv(candidates, class_names, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "class", "entropy", "distance", "passed_entropy", "passed_distance"])
        for cand in sorted(candidates, key=lambda c: c.index):
            writer.writerow(
                [
                    cand.candidate_id,
                    class_names[cand.assigned_label],
                    "" if cand.entropy is None else f"{cand.entropy:.10g}",
                    "" if cand.distance is None else f"{cand.distance:.10g}",
                    str(cand.passed_entropy),
                    str(cand.passed_distance),
                ]
            )


def ablation_selections(
    scored_pool, class_sizes, ratios, centroids: dict[int, ClassCentroid]
) -> dict[float, tuple[str, ...] | None]:
    """Nested ratio draws from one fixed, fully scored pool.

    Entropy and distance halvings run once on the pool; each ratio then takes
    its per-class quota from the same final ranking, so smaller ratios select
    subsets of larger ones.  A ratio whose quota exceeds the post-halving
    availability for any class maps to ``None`` (infeasible).
    """
    pool = [c for c in scored_pool]
    x1 = entropy_filter(pool)
    x_full = distance_filter(x1, centroids)
    ranked = {
        label: sorted(members, key=lambda c: (c.distance, c.index))
        for label, members in _by_class(x_full).items()
    }
    out: dict[float, tuple[str, ...] | None] = {}
    for ratio in ratios:
        quotas = class_quotas(class_sizes, ratio)
        feasible = all(
            quotas[label] <= len(ranked.get(label, []))
            for label in range(len(class_sizes))
        )
        if not feasible:
            out[ratio] = None
            continue
        chosen: list[CandidateSample] = []
        for label in sorted(ranked):
            chosen.extend(ranked[label][: quotas[label]])
        chosen.sort(key=lambda c: c.index)
        out[ratio] = tuple(c.candidate_id for c in chosen)
    return out


def build_centroids(
    dataset,
    extractor: TrainedExtractor,
    config: ExperimentConfig,
    device: str = "cpu",
) -> dict[int, ClassCentroid]:
    """Frozen per-class centroids from the train split (one MC pass each)."""
    from .data import dataset_arrays

    images, labels = dataset_arrays(dataset, "train")
    centroids = {}
    for label in range(dataset.class_count):
        members = images[labels == label]
        centroids[label] = class_centroid(
            members,
            extractor,
            label,
            seed=_derive_seed(config.seed, 900000 + label),
            dropout_active=config.selection.centroid_dropout,
            device=device,
        )
    return centroids
