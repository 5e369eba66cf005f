"""Labeled image-patch datasets: loading, patient-level splits, subsets.

On-disk layout is a directory of class-named subfolders of PNG files plus a
``manifest.csv`` with header ``filename,label,patient_id,split``.  The
``filename`` column is the path relative to the dataset root (including the
class folder).  Images decode to float32 arrays in [0, 1], shaped
``(height, width, 3)``.

Datasets are immutable after load and safe to share across concurrent
readers; every sampling operation is a pure function of its inputs and seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, InfeasibleSplitError, ValidationError

SPLITS = ("train", "val", "test")

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ["filename", "label", "patient_id", "split"]


@dataclass(frozen=True)
class DatasetProfile:
    """Patch geometry and generation depth for one dataset family."""

    name: str
    height: int
    width: int
    stage_count: int


PROFILES = {
    "cervical": DatasetProfile("cervical", 256, 128, 3),
    "pcam": DatasetProfile("pcam", 96, 96, 2),
    "toy": DatasetProfile("toy", 32, 32, 2),
}


def get_profile(profile: str | DatasetProfile) -> DatasetProfile:
    if isinstance(profile, DatasetProfile):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise ValidationError(
            f"unknown profile {profile!r}; known: {sorted(PROFILES)}"
        ) from None


@dataclass(frozen=True)
class LabeledPatch:
    """One image patch with its class label, source patient and split tag."""

    image: np.ndarray  # float32, (height, width, 3), values in [0, 1]
    label: int
    patient_id: str
    split: str
    filename: str = ""


@dataclass(frozen=True)
class PatchDataset:
    patches: tuple[LabeledPatch, ...]
    class_names: tuple[str, ...]
    profile: DatasetProfile
    description: str = ""

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def class_sizes(self) -> tuple[int, ...]:
        """Per-class patch counts over the train split."""
        counts = [0] * self.class_count
        for p in self.patches:
            if p.split == "train":
                counts[p.label] += 1
        return tuple(counts)

    def split_patches(self, split: str) -> tuple[LabeledPatch, ...]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        return tuple(p for p in self.patches if p.split == split)

    def only(self, split: str) -> "PatchDataset":
        return replace(self, patches=self.split_patches(split))

    def validate(self) -> None:
        prof = self.profile
        patients: dict[str, str] = {}
        for p in self.patches:
            if p.image.shape != (prof.height, prof.width, 3):
                raise ValidationError(
                    f"patch {p.filename!r} has shape {p.image.shape}, expected "
                    f"({prof.height}, {prof.width}, 3) for profile {prof.name!r}"
                )
            if not 0 <= p.label < self.class_count:
                raise ValidationError(f"label {p.label} out of range for C={self.class_count}")
            if not p.patient_id:
                raise ValidationError(f"patch {p.filename!r} has an empty patient_id")
            if p.split not in SPLITS:
                raise ValidationError(f"patch {p.filename!r} has unknown split {p.split!r}")
            seen = patients.setdefault(p.patient_id, p.split)
            if seen != p.split:
                raise ValidationError(
                    f"patient {p.patient_id!r} appears in splits {seen!r} and {p.split!r}"
                )


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(arr: np.ndarray, path: Path) -> None:
    data = np.clip(arr, 0.0, 1.0)
    img = Image.fromarray((data * 255.0 + 0.5).astype(np.uint8))
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def load_dataset(root: str | Path, profile: str | DatasetProfile) -> PatchDataset:
    """Read a manifest-described dataset from ``root`` and validate it.

    Raises :class:`FormatError` when the manifest is missing or malformed and
    :class:`ValidationError` on dimension mismatches or unknown class names.
    """
    root = Path(root)
    prof = get_profile(profile)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise FormatError(f"no {MANIFEST_NAME} found in {root}")

    with manifest.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise FormatError(
                f"manifest header {reader.fieldnames} != expected {MANIFEST_HEADER}"
            )
        rows = list(reader)
    if not rows:
        raise FormatError(f"manifest {manifest} lists no patches")

    class_names = tuple(sorted({row["label"] for row in rows}))
    class_index = {name: i for i, name in enumerate(class_names)}
    known_dirs = {d.name for d in root.iterdir() if d.is_dir()}
    unknown = set(class_names) - known_dirs
    if unknown:
        raise ValidationError(f"manifest lists class names without folders: {sorted(unknown)}")

    patches = []
    for row in rows:
        rel = row["filename"]
        folder = Path(rel).parts[0] if len(Path(rel).parts) > 1 else ""
        if folder != row["label"]:
            raise ValidationError(
                f"manifest row {rel!r} is not stored under its class folder {row['label']!r}"
            )
        path = root / rel
        if not path.exists():
            raise FormatError(f"image listed in manifest is missing: {path}")
        patches.append(
            LabeledPatch(
                image=load_image(path),
                label=class_index[row["label"]],
                patient_id=row["patient_id"],
                split=row["split"],
                filename=rel,
            )
        )

    ds = PatchDataset(patches=tuple(patches), class_names=class_names, profile=prof)
    ds.validate()
    return ds


def save_dataset(dataset: PatchDataset, root: str | Path) -> Path:
    """Write images and manifest under ``root``; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    counters: dict[str, int] = {}
    for p in dataset.patches:
        cls = dataset.class_names[p.label]
        if p.filename:
            rel = p.filename
        else:
            idx = counters.get(cls, 0)
            counters[cls] = idx + 1
            rel = f"{cls}/patch_{idx:05d}.png"
        save_image(p.image, root / rel)
        rows.append([rel, cls, p.patient_id, p.split])
    manifest = root / MANIFEST_NAME
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return manifest


def round_half_up(x: float) -> int:
    """Nearest integer with .5 rounded away from zero (for non-negative x)."""
    return int(math.floor(x + 0.5))


def largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Apportion ``total`` integer units proportionally to ``weights``.

    Floors the exact shares, then hands out the remaining units by largest
    fractional remainder (ties broken by lower index).
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() <= 0:
        raise ValidationError("weights must have positive sum")
    exact = weights / weights.sum() * total
    base = np.floor(exact).astype(int)
    remainder = exact - base
    missing = total - int(base.sum())
    order = np.lexsort((np.arange(len(weights)), -remainder))
    for i in order[:missing]:
        base[i] += 1
    return base


def split_by_patient(
    dataset: PatchDataset,
    ratios: tuple[float, float, float],
    seed: int,
) -> PatchDataset:
    """Reassign train/val/test tags at patient granularity.

    The assignment is a deterministic function of the patient roster and the
    seed; all patches of a patient land in the same split.  Patient counts
    per split follow largest-remainder apportionment of the ratios, and a
    greedy pass keeps per-split class proportions near the global ones.
    """
    if len(ratios) != len(SPLITS):
        raise ValidationError("ratios must name (train, val, test)")
    if any(r <= 0 for r in ratios):
        raise ValidationError("all split ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)}")

    patients = sorted({p.patient_id for p in dataset.patches})
    if len(patients) < len(SPLITS):
        raise InfeasibleSplitError(
            f"{len(patients)} patients cannot populate {len(SPLITS)} splits"
        )

    quotas = largest_remainder(len(patients), np.asarray(ratios))
    # every split got a positive ratio, so none may end up empty
    while (quotas == 0).any():
        donor = int(np.argmax(quotas))
        taker = int(np.argmin(quotas))
        quotas[donor] -= 1
        quotas[taker] += 1

    per_patient = {pid: np.zeros(dataset.class_count, dtype=np.int64) for pid in patients}
    for p in dataset.patches:
        per_patient[p.patient_id][p.label] += 1
    class_totals = sum(per_patient.values())

    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(patients)))
    # big patients first so the class-balance greedy has room to correct
    order.sort(key=lambda i: -int(per_patient[patients[i]].sum()))

    targets = [np.asarray(ratios)[s] * class_totals for s in range(len(SPLITS))]
    assigned_counts = [np.zeros(dataset.class_count, dtype=np.int64) for _ in SPLITS]
    assigned_patients = [0] * len(SPLITS)
    assignment: dict[str, str] = {}
    for i in order:
        pid = patients[i]
        counts = per_patient[pid]
        best_s, best_cost = None, None
        for s in range(len(SPLITS)):
            if assigned_patients[s] >= quotas[s]:
                continue
            overshoot = np.maximum(assigned_counts[s] + counts - targets[s], 0.0)
            cost = float((overshoot**2).sum())
            fill = assigned_patients[s] / max(int(quotas[s]), 1)
            key = (cost, fill, s)
            if best_cost is None or key < best_cost:
                best_cost, best_s = key, s
        assignment[pid] = SPLITS[best_s]
        assigned_counts[best_s] += counts
        assigned_patients[best_s] += 1

    patches = tuple(replace(p, split=assignment[p.patient_id]) for p in dataset.patches)
    out = replace(dataset, patches=patches)
    out.validate()
    return out


def subset_fraction(dataset: PatchDataset, fraction: float, seed: int) -> PatchDataset:
    """Keep a class-stratified random fraction of the train split.

    Val and test patches pass through unchanged.  The kept train count is
    ``fraction * N`` rounded half-up, apportioned per class by largest
    remainder; sampling within a class is without replacement and
    deterministic for a fixed seed.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must lie in (0, 1], got {fraction}")
    train = [p for p in dataset.patches if p.split == "train"]
    rest = [p for p in dataset.patches if p.split != "train"]
    if fraction == 1.0:
        return dataset

    sizes = np.asarray(dataset.class_sizes, dtype=np.int64)
    total_target = round_half_up(fraction * int(sizes.sum()))
    per_class = np.minimum(largest_remainder(total_target, sizes), sizes)

    rng = np.random.default_rng(seed)
    kept: list[LabeledPatch] = []
    for label in range(dataset.class_count):
        members = [p for p in train if p.label == label]
        take = int(per_class[label])
        idx = rng.choice(len(members), size=take, replace=False) if members else []
        kept.extend(members[i] for i in sorted(idx))

    out = replace(dataset, patches=tuple(kept + rest))
    out.validate()
    return out


def dataset_arrays(dataset: PatchDataset, split: str | None = None):
    """Stack a dataset (or one split) into ``(images, labels)`` numpy arrays."""
    patches = dataset.patches if split is None else dataset.split_patches(split)
    if not patches:
        return (
            np.zeros((0, dataset.profile.height, dataset.profile.width, 3), np.float32),
            np.zeros((0,), np.int64),
        )
    images = np.stack([p.image for p in patches]).astype(np.float32)
    labels = np.asarray([p.label for p in patches], dtype=np.int64)
    return images, labels


def build_toy_dataset(
    n_per_class: tuple[int, ...] = (120, 120),
    patients_per_class: int = 10,
    seed: int = 0,
    profile: str | DatasetProfile = "toy",
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
) -> PatchDataset:
    """Small colour-separable dataset for smoke runs and demos.

    Each class has a distinct base colour plus stripe texture and per-patient
    tint, so a tiny classifier separates it within a few epochs while the
    patches still have enough structure to train a small generator on.
    """
    prof = get_profile(profile)
    rng = np.random.default_rng(seed)
    base_colors = [
        (0.75, 0.35, 0.40),
        (0.30, 0.50, 0.75),
        (0.40, 0.70, 0.35),
        (0.70, 0.65, 0.30),
    ]
    if len(n_per_class) > len(base_colors):
        raise ValidationError(f"toy dataset supports at most {len(base_colors)} classes")

    yy = np.arange(prof.height)[:, None, None]
    patches = []
    for label, count in enumerate(n_per_class):
        color = np.asarray(base_colors[label], dtype=np.float32)
        tints = rng.normal(0.0, 0.03, size=(patients_per_class, 3))
        for j in range(count):
            patient = j % patients_per_class
            phase = rng.uniform(0, 2 * np.pi)
            stripes = 0.08 * np.sin(2 * np.pi * yy / 8.0 + phase)
            img = color[None, None, :] + tints[patient][None, None, :] + stripes
            img = img + rng.normal(0.0, 0.05, size=(prof.height, prof.width, 3))
            patches.append(
                LabeledPatch(
                    image=np.clip(img, 0.0, 1.0).astype(np.float32),
                    label=label,
                    patient_id=f"c{label}_p{patient:02d}",
                    split="train",
                    filename=f"class{label}/patch_{j:05d}.png",
                )
            )

    class_names = tuple(f"class{i}" for i in range(len(n_per_class)))
    ds = PatchDataset(patches=tuple(patches), class_names=class_names, profile=prof)
    return split_by_patient(ds, ratios, seed=seed)
