"""Residual patch classifier doubling as the MC-dropout feature extractor.

The network is a plain residual stack (4 stages of basic blocks) with a
dropout layer inserted before the last stage.  Activations are tapped after
each residual stage; those four maps form the per-image feature stack used
for class centroids and feature distances.  Predictive uncertainty comes
from running the same network several times with dropout active and a
caller-owned RNG stream, so the whole scoring pass is reproducible.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import ClassifierConfig
from .data import PatchDataset, dataset_arrays
from .errors import ValidationError

logger = logging.getLogger(__name__)


def to_chw(images: np.ndarray) -> torch.Tensor:
    """Convert float [0,1] HWC image arrays (single or batched) to NCHW tensors."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValidationError(f"expected (n, H, W, 3) images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


class McDropout(nn.Module):
    """Dropout that can also run in eval mode from an explicit generator."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x, generator: torch.Generator | None = None):
        if generator is not None and self.p > 0.0:
            mask = (torch.rand(x.shape, generator=generator) >= self.p).to(
                x.dtype
            ) / (1.0 - self.p)
            return x * mask.to(x.device)
        if self.training and self.p > 0.0:
            return F.dropout(x, self.p, training=True)
        return x


class BasicBlock(nn.Module):
    # batch norms use cumulative running averages so eval-mode statistics
    # are already usable after very short training runs
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch, momentum=None)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch, momentum=None)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch, momentum=None),
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.skip(x))


class PatchClassifier(nn.Module):
    """Residual classifier with feature taps after each of the 4 stages."""

    def __init__(
        self,
        class_count: int,
        stage_blocks=(3, 4, 6, 3),
        stage_channels=(64, 128, 256, 512),
        dropout_rate: float = 0.5,
    ):
        super().__init__()
        if class_count < 2:
            raise ValidationError("classifier needs at least 2 classes")
        if len(stage_blocks) != len(stage_channels):
            raise ValidationError("stage_blocks and stage_channels must align")
        self.class_count = class_count
        self.stage_blocks = tuple(stage_blocks)
        self.stage_channels = tuple(stage_channels)
        self.dropout_rate = dropout_rate

        c0 = stage_channels[0]
        self.stem = nn.Sequential(
            nn.Conv2d(3, c0, 3, padding=1, bias=False), nn.BatchNorm2d(c0, momentum=None), nn.ReLU()
        )
        stages = []
        in_ch = c0
        for s, (blocks, out_ch) in enumerate(zip(stage_blocks, stage_channels)):
            layers = []
            for b in range(blocks):
                stride = 2 if (b == 0 and s > 0) else 1
                layers.append(BasicBlock(in_ch, out_ch, stride))
                in_ch = out_ch
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        # stochastic layer sits right before the last residual stage
        self.dropout = McDropout(dropout_rate)
        self.fc = nn.Linear(stage_channels[-1], class_count)

    def forward_with_features(self, x, mc_generator: torch.Generator | None = None):
        """Return (logits, per-stage activation list)."""
        out = self.stem(x)
        feats = []
        last = len(self.stages) - 1
        for s, stage in enumerate(self.stages):
            if s == last:
                out = self.dropout(out, generator=mc_generator)
            out = stage(out)
            feats.append(out)
        pooled = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.fc(pooled), feats

    def forward(self, x, mc_generator: torch.Generator | None = None):
        logits, _ = self.forward_with_features(x, mc_generator)
        return logits

    def pooled(self, x):
        """Penultimate (pre-classification) pooled feature vectors."""
        _, feats = self.forward_with_features(x)
        return F.adaptive_avg_pool2d(feats[-1], 1).flatten(1)


@dataclass(frozen=True)
class FeatureStack:
    """Per-layer activation maps for one image, each shaped (A_l, H_l, W_l)."""

    layers: tuple[np.ndarray, ...]

    def __post_init__(self):
        for arr in self.layers:
            if np.asarray(arr).ndim != 3:
                raise ValidationError("feature stack layers must be (channels, H, W)")
            if not np.isfinite(arr).all():
                raise ValidationError("feature stack contains non-finite values")


@dataclass(frozen=True)
class ClassCentroid:
    """Per-layer mean activations of one class's training images."""

    layers: tuple[np.ndarray, ...]
    class_index: int


@dataclass(frozen=True)
class McRun:
    probabilities: np.ndarray  # (C,), on the simplex
    features: FeatureStack


@dataclass(frozen=True)
class McRunSet:
    runs: tuple[McRun, ...]

    def __post_init__(self):
        if not self.runs:
            raise ValidationError("McRunSet needs at least one run")
        for run in self.runs:
            p = np.asarray(run.probabilities)
            if (p < 0).any() or abs(float(p.sum()) - 1.0) > 1e-6:
                raise ValidationError("probability vector is not on the simplex")


@dataclass
class TrainedExtractor:
    model: PatchClassifier
    class_names: tuple[str, ...]
    val_accuracy: float


def _batches(n: int, batch_size: int, generator: torch.Generator | None = None):
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_extractor(
    dataset: PatchDataset,
    config: ClassifierConfig,
    seed: int = 0,
    device: str = "cpu",
) -> TrainedExtractor:
    """Train the residual classifier on the train split with cross-entropy.

    Keeps the parameters of the epoch with the best validation accuracy
    (train accuracy when the dataset has no val split).
    """
    train_x, train_y = dataset_arrays(dataset, "train")
    if train_x.shape[0] == 0:
        raise ValidationError("train split is empty")
    if len(np.unique(train_y)) < 2:
        raise ValidationError("training an extractor needs at least 2 classes present")
    val_x, val_y = dataset_arrays(dataset, "val")
    if val_x.shape[0] == 0:
        logger.warning("no val split; reporting accuracy on the train split")
        val_x, val_y = train_x, train_y

    torch.manual_seed(seed)
    model = PatchClassifier(
        class_count=dataset.class_count,
        stage_blocks=config.stage_blocks,
        stage_channels=config.stage_channels,
        dropout_rate=config.dropout_rate,
    ).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    xs = to_chw(train_x).to(device)
    ys = torch.from_numpy(train_y).to(device)
    shuffler = torch.Generator().manual_seed(seed)

    best_acc, best_state = -1.0, None
    for epoch in range(config.epochs):
        model.train()
        for idx in _batches(len(ys), config.batch_size, shuffler):
            opt.zero_grad()
            loss = F.cross_entropy(model(xs[idx]), ys[idx])
            loss.backward()
            opt.step()
        acc = _accuracy(model, val_x, val_y, config.batch_size, device)
        logger.debug("extractor epoch=%d val_acc=%.4f", epoch, acc)
        if acc > best_acc:
            best_acc = acc
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    model.load_state_dict(best_state)
    model.eval()
    return TrainedExtractor(model=model, class_names=dataset.class_names, val_accuracy=best_acc)


def _accuracy(model, images, labels, batch_size, device):
    model.eval()
    xs = to_chw(images).to(device)
    hits = 0
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            logits = model(xs[start : start + batch_size])
            hits += int((logits.argmax(dim=1).cpu().numpy() == labels[start : start + batch_size]).sum())
    return hits / max(len(labels), 1)


def predict_probabilities(
    extractor: TrainedExtractor, images: np.ndarray, device: str = "cpu", batch_size: int = 64
) -> np.ndarray:
    """Deterministic (dropout-free) softmax probabilities, shape (n, C)."""
    model = extractor.model
    model.eval()
    xs = to_chw(images).to(device)
    out = []
    with torch.no_grad():
        for start in range(0, xs.shape[0], batch_size):
            out.append(F.softmax(model(xs[start : start + batch_size]), dim=1).cpu().numpy())
    return np.concatenate(out, axis=0)


def pooled_features(
    extractor: TrainedExtractor, images: np.ndarray, device: str = "cpu", batch_size: int = 64
) -> np.ndarray:
    """Penultimate pooled features for a batch of images, shape (n, F)."""
    model = extractor.model
    model.eval()
    xs = to_chw(images).to(device)
    out = []
    with torch.no_grad():
        for start in range(0, xs.shape[0], batch_size):
            out.append(model.pooled(xs[start : start + batch_size]).cpu().numpy())
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.stage_channels[-1]))


def mc_forward(
    extractor: TrainedExtractor, image: np.ndarray, mc_runs: int, seed: int = 0, device: str = "cpu"
) -> McRunSet:
    """Run ``mc_runs`` stochastic forward passes on one image.

    All dropout masks are drawn from one generator seeded with ``seed``, so
    the run set is a pure function of (image, seed).  Batch statistics come
    from the frozen running estimates, so runs are independent realisations.
    """
    if mc_runs < 1:
        raise ValidationError("mc_runs must be >= 1")
    model = extractor.model
    model.eval()
    x = to_chw(image).to(device)
    if x.shape[0] != 1:
        raise ValidationError("mc_forward scores exactly one image")
    gen = torch.Generator().manual_seed(seed)
    batch = x.expand(mc_runs, -1, -1, -1)
    with torch.no_grad():
        logits, feats = model.forward_with_features(batch, mc_generator=gen)
        probs = F.softmax(logits, dim=1).cpu().numpy()
    runs = []
    for k in range(mc_runs):
        stack = FeatureStack(tuple(f[k].cpu().numpy() for f in feats))
        runs.append(McRun(probabilities=probs[k], features=stack))
    return McRunSet(runs=tuple(runs))


def predictive_entropy(runs: McRunSet) -> float:
    """Mean over MC runs of the per-run entropy -sum(p ln p), with 0 ln 0 = 0."""
    total = 0.0
    for run in runs.runs:
        p = np.asarray(run.probabilities, dtype=np.float64)
        terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
        total += float(-terms.sum())
    return total / len(runs.runs)


def class_centroid(
    images: np.ndarray,
    extractor: TrainedExtractor,
    class_index: int,
    seed: int = 0,
    dropout_active: bool = True,
    device: str = "cpu",
) -> ClassCentroid:
    """Per-layer mean activations over one class's images.

    Each image contributes a single stochastic pass (one MC sample); the
    result is frozen and reused for every later distance computation.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] == 0:
        raise ValidationError(f"class {class_index} has no images to build a centroid from")
    model = extractor.model
    model.eval()
    gen = torch.Generator().manual_seed(seed) if dropout_active else None
    sums: list[np.ndarray] | None = None
    with torch.no_grad():
        for i in range(images.shape[0]):
            x = to_chw(images[i]).to(device)
            _, feats = model.forward_with_features(x, mc_generator=gen)
            maps = [f[0].cpu().numpy().astype(np.float64) for f in feats]
            if sums is None:
                sums = maps
            else:
                sums = [a + b for a, b in zip(sums, maps)]
    layers = tuple(s / images.shape[0] for s in sums)
    return ClassCentroid(layers=layers, class_index=class_index)


def _unit_normalize(arr: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Scale each spatial site's channel vector to unit length.

    Zero vectors stay zero: the norm is clamped below by ``eps`` instead of
    dividing by zero.
    """
    arr = np.asarray(arr, dtype=np.float64)
    norms = np.sqrt((arr**2).sum(axis=0, keepdims=True))
    return arr / np.maximum(norms, eps)


def feature_distance(runs: McRunSet, centroid: ClassCentroid) -> float:
    """Mean over MC runs of the per-layer normalized feature distance.

    Per layer, every spatial site's channel vector is unit-normalized, the
    squared difference to the (once-normalized) centroid is summed over
    channels and sites, and divided by the site count H*W.  Layer terms add
    up; for a single site this equals 2 - 2 cos(angle).
    """
    centroid_hat = [_unit_normalize(layer) for layer in centroid.layers]
    total = 0.0
    for run in runs.runs:
        if len(run.features.layers) != len(centroid_hat):
            raise ValidationError("feature stack and centroid have different layer counts")
        for phi, c_hat in zip(run.features.layers, centroid_hat):
            if phi.shape != c_hat.shape:
                raise ValidationError(
                    f"layer shape mismatch: {phi.shape} vs centroid {c_hat.shape}"
                )
            phi_hat = _unit_normalize(phi)
            sites = phi.shape[1] * phi.shape[2]
            total += float(((phi_hat - c_hat) ** 2).sum()) / sites
    return total / len(runs.runs)


def write_feature_records(records, path: str | Path, include_probabilities: bool = False) -> None:
    """Write per-image score records as CSV ``id,label,entropy,distance,K``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["id", "label", "entropy", "distance", "K"]
    if include_probabilities:
        header.append("probabilities")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in records:
            row = [
                rec["id"],
                rec["label"],
                _fmt(rec.get("entropy")),
                _fmt(rec.get("distance")),
                rec["K"],
            ]
            if include_probabilities:
                probs = rec.get("probabilities", [])
                row.append(";".join(f"{p:.8g}" for p in probs))
            writer.writerow(row)


def _fmt(value) -> str:
    return "" if value is None else f"{value:.10g}"


def save_extractor(extractor: TrainedExtractor, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model = extractor.model
    torch.save(
        {
            "state_dict": model.state_dict(),
            "class_count": model.class_count,
            "stage_blocks": model.stage_blocks,
            "stage_channels": model.stage_channels,
            "dropout_rate": model.dropout_rate,
            "class_names": extractor.class_names,
            "val_accuracy": extractor.val_accuracy,
        },
        path,
    )


def load_extractor(path: str | Path, device: str = "cpu") -> TrainedExtractor:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"extractor checkpoint not found: {path}")
    blob = torch.load(path, map_location=device, weights_only=False)
    model = PatchClassifier(
        class_count=blob["class_count"],
        stage_blocks=blob["stage_blocks"],
        stage_channels=blob["stage_channels"],
        dropout_rate=blob["dropout_rate"],
    ).to(device)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return TrainedExtractor(
        model=model,
        class_names=tuple(blob["class_names"]),
        val_accuracy=float(blob["val_accuracy"]),
    )
