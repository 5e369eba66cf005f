"""Progressive conditional generator and per-stage critics.

The generator grows images coarse-to-fine: stage one maps a noise/label
embedding to the lowest resolution through four bilinear-upsample conv
blocks, self attention is applied to its hidden features, and each further
stage refines with residual blocks plus one more 2x upsample.  Every stage
has its own critic operating at that stage's resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from ..config import GanConfig
from ..data import DatasetProfile
from ..errors import ValidationError
from .layers import ConditionalBatchNorm2d, MinibatchDiscrimination, SelfAttention, SpectralNormConv2d

STAGE1_UP_BLOCKS = 4
# insert critic self attention once feature maps are at most this many sites
ATTENTION_MAX_SITES = 1024


def stage_resolutions(profile: DatasetProfile, stage_count: int) -> list[tuple[int, int]]:
    """Spatial sizes per stage; each stage doubles the previous one."""
    if stage_count < 1:
        raise ValidationError("stage_count must be >= 1")
    factor = 2 ** (stage_count - 1)
    if profile.height % factor or profile.width % factor:
        raise ValidationError(
            f"profile {profile.name!r} ({profile.height}x{profile.width}) does not divide "
            f"into {stage_count} stages"
        )
    return [
        (profile.height // 2 ** (stage_count - 1 - s), profile.width // 2 ** (stage_count - 1 - s))
        for s in range(stage_count)
    ]


@dataclass
class ImagePyramid:
    """One image tensor per stage, finest last, pixel values in [-1, 1]."""

    images: list[torch.Tensor]

    @property
    def final(self) -> torch.Tensor:
        return self.images[-1]


class LabelEmbedding(nn.Module):
    """One-hot class labels embedded through a transposed 1x1 convolution."""

    def __init__(self, class_count: int, embed_dim: int):
        super().__init__()
        self.class_count = class_count
        self.embed = nn.ConvTranspose2d(class_count, embed_dim, 1)

    def forward(self, labels):
        labels = torch.as_tensor(labels, dtype=torch.long)
        if labels.numel() and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValidationError(f"label out of range [0, {self.class_count})")
        onehot = F.one_hot(labels, self.class_count).float()
        return self.embed(onehot.unsqueeze(-1).unsqueeze(-1)).flatten(1)


class UpBlock(nn.Module):
    def __init__(self, in_ch, out_ch, class_count):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.cbn = ConditionalBatchNorm2d(out_ch, class_count)

    def forward(self, x, labels):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return F.relu(self.cbn(self.conv(x), labels))


class ResidualGenBlock(nn.Module):
    def __init__(self, channels, class_count):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.cbn1 = ConditionalBatchNorm2d(channels, class_count)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.cbn2 = ConditionalBatchNorm2d(channels, class_count)

    def forward(self, x, labels):
        h = F.relu(self.cbn1(self.conv1(x), labels))
        h = self.cbn2(self.conv2(h), labels)
        return F.relu(x + h)


class RefineStage(nn.Module):
    """Residual blocks followed by one 2x upsample block."""

    def __init__(self, in_ch, out_ch, class_count):
        super().__init__()
        self.res1 = ResidualGenBlock(in_ch, class_count)
        self.res2 = ResidualGenBlock(in_ch, class_count)
        self.up = UpBlock(in_ch, out_ch, class_count)

    def forward(self, x, labels):
        x = self.res1(x, labels)
        x = self.res2(x, labels)
        return self.up(x, labels)


class MultiStageGenerator(nn.Module):
    def __init__(self, class_count: int, profile: DatasetProfile, config: GanConfig):
        super().__init__()
        self.class_count = class_count
        self.noise_dim = config.noise_dim
        self.profile = profile
        self.stage_res = stage_resolutions(profile, config.stage_count)
        h1, w1 = self.stage_res[0]
        scale = 2**STAGE1_UP_BLOCKS
        if h1 % scale or w1 % scale:
            raise ValidationError(
                f"stage-1 resolution {h1}x{w1} must be a multiple of {scale} "
                f"({STAGE1_UP_BLOCKS} upsample blocks)"
            )
        self.base_h = h1 // scale
        self.base_w = w1 // scale

        gf = config.base_channels
        c1 = gf * 2**STAGE1_UP_BLOCKS
        self.embed = LabelEmbedding(class_count, config.noise_dim)
        self.fc = nn.Linear(2 * config.noise_dim, c1 * self.base_h * self.base_w)
        ups = []
        ch = c1
        for _ in range(STAGE1_UP_BLOCKS):
            ups.append(UpBlock(ch, ch // 2, class_count))
            ch //= 2
        self.stage1 = nn.ModuleList(ups)
        self.attention = SelfAttention(ch)

        refines = []
        to_image = [nn.Conv2d(ch, 3, 3, padding=1)]
        for _ in range(config.stage_count - 1):
            out_ch = max(ch // 2, 8)
            refines.append(RefineStage(ch, out_ch, class_count))
            to_image.append(nn.Conv2d(out_ch, 3, 3, padding=1))
            ch = out_ch
        self.refines = nn.ModuleList(refines)
        self.to_image = nn.ModuleList(to_image)

    def forward(self, z, labels, return_attention: bool = False):
        z = torch.as_tensor(z, dtype=torch.float32, device=self.fc.weight.device)
        if z.ndim != 2 or z.shape[1] != self.noise_dim:
            raise ValidationError(
                f"noise must be (batch, {self.noise_dim}), got {tuple(z.shape)}"
            )
        labels = torch.as_tensor(labels, dtype=torch.long, device=z.device)
        h = self.fc(torch.cat([z, self.embed(labels)], dim=1))
        h = h.view(z.shape[0], -1, self.base_h, self.base_w)
        for block in self.stage1:
            h = block(h, labels)
        h, attention = self.attention(h)

        images = [torch.tanh(self.to_image[0](h))]
        for s, refine in enumerate(self.refines):
            h = refine(h, labels)
            images.append(torch.tanh(self.to_image[s + 1](h)))
        pyramid = ImagePyramid(images=images)
        return (pyramid, attention) if return_attention else pyramid


class StageDiscriminator(nn.Module):
    """Critic for one pyramid stage: strided conv trunk with class-conditional
    batch norm, self attention at a small resolution, then a spectrally
    normalized conv head, minibatch discrimination, and a linear score."""

    def __init__(self, resolution: tuple[int, int], class_count: int, config: GanConfig):
        super().__init__()
        self.resolution = tuple(resolution)
        self.class_count = class_count
        df = config.disc_channels

        blocks = []
        h, w = resolution
        in_ch, ch = 3, df
        attention_at = None
        while min(h, w) > 4:
            blocks.append(
                nn.ModuleDict(
                    {
                        "conv": nn.Conv2d(in_ch, ch, 4, stride=2, padding=1, bias=False),
                        "cbn": ConditionalBatchNorm2d(ch, class_count),
                    }
                )
            )
            h, w = h // 2, w // 2
            if attention_at is None and h * w <= ATTENTION_MAX_SITES:
                attention_at = len(blocks) - 1
                self.attention = SelfAttention(ch)
            in_ch, ch = ch, min(ch * 2, df * 8)
        if attention_at is None:
            attention_at = len(blocks) - 1
            self.attention = SelfAttention(in_ch)
        self.blocks = nn.ModuleList(blocks)
        self.attention_at = attention_at

        self.head_conv = SpectralNormConv2d(in_ch, in_ch, 3, padding=1, bias=False)
        self.head_bn = nn.BatchNorm2d(in_ch, momentum=None)
        flat = in_ch * h * w
        self.minibatch = MinibatchDiscrimination(flat)
        self.fc = nn.Linear(flat + self.minibatch.extra_features, 1)

    def forward(self, images, labels):
        if tuple(images.shape[-2:]) != self.resolution:
            raise ValidationError(
                f"discriminator for {self.resolution} got images of {tuple(images.shape[-2:])}"
            )
        h = images
        for i, block in enumerate(self.blocks):
            h = F.leaky_relu(block["cbn"](block["conv"](h), labels), 0.2)
            if i == self.attention_at:
                h, _ = self.attention(h)
        h = F.leaky_relu(self.head_bn(self.head_conv(h)), 0.2)
        h = self.minibatch(h.flatten(1))
        return self.fc(h).squeeze(1)


def build_discriminators(
    class_count: int, profile: DatasetProfile, config: GanConfig
) -> nn.ModuleList:
    return nn.ModuleList(
        StageDiscriminator(res, class_count, config)
        for res in stage_resolutions(profile, config.stage_count)
    )
