"""Selective synthetic augmentation for image-patch classification.

The pipeline: train a multi-stage conditional GAN on a small labeled patch
dataset, pick the best checkpoint by an EMA-smoothed feature-space FID,
over-generate a per-class candidate pool, keep only high-confidence
centroid-near samples, and use them to augment a downstream classifier.
"""

from .config import (
    ClassifierConfig,
    ExperimentConfig,
    GanConfig,
    SelectionConfig,
    apply_overrides,
    load_config,
    save_config,
)
from .data import (
    PROFILES,
    DatasetProfile,
    LabeledPatch,
    PatchDataset,
    build_toy_dataset,
    load_dataset,
    save_dataset,
    split_by_patient,
    subset_fraction,
)
from .errors import (
    FormatError,
    HistaugError,
    InfeasibleSplitError,
    InsufficientSamplesError,
    NumericalError,
    ValidationError,
)
from .extractor import (
    ClassCentroid,
    FeatureStack,
    McRunSet,
    PatchClassifier,
    TrainedExtractor,
    class_centroid,
    feature_distance,
    mc_forward,
    predictive_entropy,
    train_extractor,
)
from .fid import (
    FidSeries,
    MomentSummary,
    compute_fid,
    ema_smooth,
    pick_best_epoch,
    select_checkpoint,
    summarize_moments,
)
from .metrics import MetricsReport, RunMetrics, evaluate, metrics_from_scores
from .selection import (
    CandidateSample,
    SelectionReport,
    build_centroids,
    distance_filter,
    entropy_filter,
    generate_pool,
    run_selection,
    select_candidates,
)

__version__ = "0.1.0"
