"""Classification metrics with multi-run aggregation.

Multi-class AUC, sensitivity and specificity are one-vs-rest macro averages
over the classes present in the test labels; the binary case uses the
standard definitions with class 1 as positive.  Accuracy is the confusion
matrix trace over its total.
"""

from __future__ import annotations

import csv
import warnings as _warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import roc_auc_score

from .errors import ValidationError

METRIC_NAMES = ("accuracy", "auc", "sensitivity", "specificity")
REGIMES = ("baseline", "traditional", "gan_aug", "selective")


@dataclass(frozen=True)
class RunMetrics:
    accuracy: float
    auc: float
    sensitivity: float
    specificity: float
    seed: int = 0

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass
class MetricsReport:
    regime: str
    runs: list[RunMetrics] = field(default_factory=list)

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """Mean and sample std (ddof=1) per metric over the runs."""
        if not self.runs:
            raise ValidationError("no runs to aggregate")
        out = {}
        for name in METRIC_NAMES:
            values = np.asarray([getattr(r, name) for r in self.runs], dtype=np.float64)
            std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
            out[name] = (float(values.mean()), std)
        return out


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, class_count: int) -> np.ndarray:
    cm = np.zeros((class_count, class_count), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[t, p] += 1
    return cm


def metrics_from_scores(y_true, probabilities, seed: int = 0) -> RunMetrics:
    """Compute the metric set from per-class probability scores.

    Classes absent from ``y_true`` are excluded from the macro averages with
    a warning.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    probs = np.asarray(probabilities, dtype=np.float64)
    if y_true.shape[0] == 0:
        raise ValidationError("cannot evaluate on an empty test set")
    if probs.ndim != 2 or probs.shape[0] != y_true.shape[0]:
        raise ValidationError(f"probabilities shape {probs.shape} does not match labels")
    class_count = probs.shape[1]
    y_pred = probs.argmax(axis=1)

    cm = confusion_matrix(y_true, y_pred, class_count)
    accuracy = float(np.trace(cm)) / float(cm.sum())

    present = [c for c in range(class_count) if (y_true == c).any()]
    absent = sorted(set(range(class_count)) - set(present))
    if absent:
        _warnings.warn(
            f"classes {absent} absent from the test labels; excluded from macro averages",
            stacklevel=2,
        )

    if class_count == 2 and len(present) == 2:
        auc = float(roc_auc_score(y_true, probs[:, 1]))
        tp = int(cm[1, 1])
        fn = int(cm[1, 0])
        tn = int(cm[0, 0])
        fp = int(cm[0, 1])
        sensitivity = tp / (tp + fn)
        specificity = tn / (tn + fp)
    else:
        aucs, sens, specs = [], [], []
        for c in present:
            positives = y_true == c
            if positives.all():
                _warnings.warn(
                    f"class {c} is the only class present; AUC undefined, skipped",
                    stacklevel=2,
                )
            else:
                aucs.append(float(roc_auc_score(positives, probs[:, c])))
            tp = int(cm[c, c])
            fn = int(cm[c].sum() - tp)
            fp = int(cm[:, c].sum() - tp)
            tn = int(cm.sum() - tp - fn - fp)
            sens.append(tp / (tp + fn))
            specs.append(tn / (tn + fp) if (tn + fp) else 0.0)
        auc = float(np.mean(aucs)) if aucs else float("nan")
        sensitivity = float(np.mean(sens))
        specificity = float(np.mean(specs))

    return RunMetrics(
        accuracy=accuracy,
        auc=auc,
        sensitivity=float(sensitivity),
        specificity=float(specificity),
        seed=seed,
    )


def evaluate(classifier, test_dataset, device: str = "cpu", seed: int = 0) -> RunMetrics:
    """Score a trained classifier on a dataset's test split."""
    from .data import dataset_arrays
    from .extractor import TrainedExtractor, predict_probabilities

    test_x, test_y = dataset_arrays(test_dataset, "test")
    if test_x.shape[0] == 0:
        raise ValidationError("test split is empty")
    wrapper = (
        classifier
        if isinstance(classifier, TrainedExtractor)
        else TrainedExtractor(model=classifier, class_names=test_dataset.class_names, val_accuracy=0.0)
    )
    probs = predict_probabilities(wrapper, test_x, device=device)
    return metrics_from_scores(test_y, probs, seed=seed)


def write_results_csv(reports: list[MetricsReport], path: str | Path) -> None:
    """Per-run rows: regime, seed, then one column per metric."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["regime", "seed", *METRIC_NAMES])
        for report in reports:
            for run in report.runs:
                writer.writerow(
                    [report.regime, run.seed] + [f"{getattr(run, m):.10g}" for m in METRIC_NAMES]
                )


def write_summary_csv(reports: list[MetricsReport], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["regime"]
        for name in METRIC_NAMES:
            header += [f"{name}_mean", f"{name}_std"]
        writer.writerow(header)
        for report in reports:
            agg = report.aggregate()
            row = [report.regime]
            for name in METRIC_NAMES:
                mean, std = agg[name]
                row += [f"{mean:.10g}", f"{std:.10g}"]
            writer.writerow(row)
