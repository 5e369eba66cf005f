"""Adversarial training loop, checkpoint files, and generation helpers.

Each epoch alternates critic and generator updates over shuffled batches.
Real images are area-downsampled to every intermediate stage resolution so
each stage's critic trains at its own scale.  Checkpoints are emitted once
per epoch after the warm-up threshold, named ``gan_epoch_{NNNN}``, and the
run writes a loss-curve index CSV ``epoch,critic_loss,gen_loss``.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from ..config import ExperimentConfig, GanConfig, config_fingerprint
from ..data import DatasetProfile, PatchDataset, dataset_arrays
from ..errors import FormatError, NumericalError, ValidationError
from .losses import critic_loss, generator_loss, gradient_penalty_norms
from .networks import MultiStageGenerator, build_discriminators, stage_resolutions

logger = logging.getLogger(__name__)

CHECKPOINT_PATTERN = "gan_epoch_{epoch:04d}"
INDEX_NAME = "gan_index.csv"


@dataclass
class GanCheckpoint:
    epoch: int
    generator_params: dict
    discriminator_params: list
    stage_count: int
    class_count: int
    profile: DatasetProfile
    gan_config: GanConfig
    class_names: tuple[str, ...] = ()
    fingerprint: str = ""

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = config_fingerprint(self.gan_config)


def save_checkpoint(ckpt: GanCheckpoint, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CHECKPOINT_PATTERN.format(epoch=ckpt.epoch)
    torch.save(
        {
            "epoch": ckpt.epoch,
            "generator_params": ckpt.generator_params,
            "discriminator_params": ckpt.discriminator_params,
            "stage_count": ckpt.stage_count,
            "class_count": ckpt.class_count,
            "profile": vars(ckpt.profile),
            "gan_config": vars(ckpt.gan_config),
            "class_names": list(ckpt.class_names),
            "fingerprint": ckpt.fingerprint,
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> GanCheckpoint:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    return GanCheckpoint(
        epoch=blob["epoch"],
        generator_params=blob["generator_params"],
        discriminator_params=blob["discriminator_params"],
        stage_count=blob["stage_count"],
        class_count=blob["class_count"],
        profile=DatasetProfile(**blob["profile"]),
        gan_config=GanConfig(**blob["gan_config"]),
        class_names=tuple(blob["class_names"]),
        fingerprint=blob["fingerprint"],
    )


def generator_from_checkpoint(ckpt: GanCheckpoint, device: str = "cpu") -> MultiStageGenerator:
    gen = MultiStageGenerator(ckpt.class_count, ckpt.profile, ckpt.gan_config).to(device)
    gen.load_state_dict(ckpt.generator_params)
    gen.eval()
    return gen


def generate_images(
    ckpt: GanCheckpoint,
    labels,
    seed: int = 0,
    device: str = "cpu",
    batch_size: int = 64,
    generator: MultiStageGenerator | None = None,
) -> np.ndarray:
    """Sample final-stage images for the given labels, returned as float
    arrays in [0, 1], shape (n, H, W, 3).  Deterministic in (labels, seed)."""
    gen = generator if generator is not None else generator_from_checkpoint(ckpt, device)
    labels = np.asarray(labels, dtype=np.int64)
    rng = torch.Generator().manual_seed(seed)
    out = []
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            y = torch.from_numpy(labels[start : start + batch_size]).to(device)
            z = torch.randn(len(y), gen.noise_dim, generator=rng).to(device)
            pyramid = gen(z, y)
            imgs = (pyramid.final.clamp(-1, 1) + 1.0) / 2.0
            out.append(imgs.permute(0, 2, 3, 1).cpu().numpy())
    return np.concatenate(out, axis=0) if out else np.zeros((0,), np.float32)


def real_pyramid(images: torch.Tensor, resolutions) -> list[torch.Tensor]:
    """Area-downsample a [-1, 1] image batch to every stage resolution."""
    out = []
    for h, w in resolutions:
        if images.shape[-2:] == (h, w):
            out.append(images)
        else:
            out.append(F.interpolate(images, size=(h, w), mode="area"))
    return out


def train_gan(
    dataset: PatchDataset,
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    device: str = "cpu",
) -> list[GanCheckpoint]:
    """Train the multi-stage conditional GAN on the train split.

    Returns the checkpoint series (epochs strictly increasing).  When the
    step budget ends before any post-warm-up epoch, the final state is still
    emitted (with a warning) so downstream selection has a model to use.
    """
    gan_cfg = config.gan
    profile = dataset.profile
    if gan_cfg.stage_count != profile.stage_count:
        raise ValidationError(
            f"config stage_count={gan_cfg.stage_count} does not match profile "
            f"{profile.name!r} (stage_count={profile.stage_count})"
        )
    train_x, train_y = dataset_arrays(dataset, "train")
    if train_x.shape[0] == 0:
        raise ValidationError("train split is empty")

    torch.manual_seed(config.seed)
    gen = MultiStageGenerator(dataset.class_count, profile, gan_cfg).to(device)
    discs = build_discriminators(dataset.class_count, profile, gan_cfg).to(device)
    opt_g = torch.optim.Adam(gen.parameters(), lr=gan_cfg.learning_rate, betas=(gan_cfg.beta1, gan_cfg.beta2))
    opt_d = torch.optim.Adam(
        itertools.chain.from_iterable(d.parameters() for d in discs),
        lr=gan_cfg.learning_rate,
        betas=(gan_cfg.beta1, gan_cfg.beta2),
    )

    resolutions = stage_resolutions(profile, gan_cfg.stage_count)
    xs = torch.from_numpy(train_x.transpose(0, 3, 1, 2)).to(device) * 2.0 - 1.0
    ys = torch.from_numpy(train_y).to(device)
    n = xs.shape[0]
    shuffler = torch.Generator().manual_seed(config.seed)

    checkpoints: list[GanCheckpoint] = []
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    loss_rows = []
    steps_done = 0
    budget = gan_cfg.max_steps if gan_cfg.max_steps is not None else float("inf")

    epoch = 0
    while epoch < gan_cfg.epochs and steps_done < budget:
        epoch += 1
        gen.train()
        discs.train()
        d_losses, g_losses = [], []
        order = torch.randperm(n, generator=shuffler)
        for start in range(0, n, gan_cfg.batch_size):
            if steps_done >= budget:
                break
            idx = order[start : start + gan_cfg.batch_size]
            real = xs[idx]
            labels = ys[idx]
            reals = real_pyramid(real, resolutions)

            for _ in range(gan_cfg.critic_steps):
                z = torch.randn(len(idx), gan_cfg.noise_dim, device=device)
                with torch.no_grad():
                    fakes = gen(z, labels).images
                opt_d.zero_grad()
                d_loss = None
                for disc, real_s, fake_s in zip(discs, reals, fakes):
                    norms = gradient_penalty_norms(disc, real_s, fake_s, labels)
                    term = critic_loss(
                        disc(real_s, labels), disc(fake_s, labels), norms, gan_cfg.gp_weight
                    )
                    d_loss = term if d_loss is None else d_loss + term
                d_loss.backward()
                opt_d.step()

            z = torch.randn(len(idx), gan_cfg.noise_dim, device=device)
            pyramid = gen(z, labels)
            g_loss = generator_loss([disc(img, labels) for disc, img in zip(discs, pyramid.images)])
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            steps_done += 1
            d_losses.append(float(d_loss.detach()))
            g_losses.append(float(g_loss.detach()))

        epoch_d = float(np.mean(d_losses)) if d_losses else float("nan")
        epoch_g = float(np.mean(g_losses)) if g_losses else float("nan")
        loss_rows.append((epoch, epoch_d, epoch_g))
        logger.info("gan epoch=%d critic_loss=%.4f gen_loss=%.4f", epoch, epoch_d, epoch_g)
        if not (np.isfinite(epoch_d) and np.isfinite(epoch_g)):
            raise NumericalError(
                f"non-finite losses for epoch {epoch}: critic={epoch_d}, gen={epoch_g}"
            )

        if epoch > gan_cfg.warmup_epochs:
            checkpoints.append(_snapshot(epoch, gen, discs, dataset, gan_cfg))

    if not checkpoints:
        logger.warning(
            "step budget ended during warm-up (epoch %d <= %d); emitting final state",
            epoch,
            gan_cfg.warmup_epochs,
        )
        checkpoints.append(_snapshot(epoch, gen, discs, dataset, gan_cfg))

    if ckpt_dir is not None:
        for ckpt in checkpoints:
            save_checkpoint(ckpt, ckpt_dir)
        write_loss_index(loss_rows, Path(out_dir) / INDEX_NAME)
    return checkpoints


def _snapshot(epoch, gen, discs, dataset, gan_cfg) -> GanCheckpoint:
    return GanCheckpoint(
        epoch=epoch,
        generator_params={k: v.detach().cpu().clone() for k, v in gen.state_dict().items()},
        discriminator_params=[
            {k: v.detach().cpu().clone() for k, v in d.state_dict().items()} for d in discs
        ],
        stage_count=gan_cfg.stage_count,
        class_count=dataset.class_count,
        profile=dataset.profile,
        gan_config=gan_cfg,
        class_names=dataset.class_names,
    )


def write_loss_index(rows, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "critic_loss", "gen_loss"])
        for epoch, d, g in rows:
            writer.writerow([epoch, f"{d:.10g}", f"{g:.10g}"])


def load_checkpoint_series(directory: str | Path) -> list[GanCheckpoint]:
    """Load all ``gan_epoch_*`` files in a directory, ordered by epoch."""
    directory = Path(directory)
    paths = sorted(directory.glob("gan_epoch_*"))
    if not paths:
        raise FormatError(f"no checkpoints found under {directory}")
    return [load_checkpoint(p) for p in paths]
