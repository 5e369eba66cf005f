"""Multi-stage conditional GAN: layers, networks, losses, training loop."""

from .layers import (
    ConditionalBatchNorm2d,
    MinibatchDiscrimination,
    PowerIterationState,
    SelfAttention,
    SpectralNormConv2d,
    attention_forward,
    spectral_normalize,
)
from .losses import critic_loss, generator_loss, gradient_penalty_norms
from .networks import (
    ImagePyramid,
    MultiStageGenerator,
    StageDiscriminator,
    build_discriminators,
    stage_resolutions,
)
from .train import (
    GanCheckpoint,
    generate_images,
    generator_from_checkpoint,
    load_checkpoint,
    save_checkpoint,
    train_gan,
)

__all__ = [
    "ConditionalBatchNorm2d",
    "MinibatchDiscrimination",
    "PowerIterationState",
    "SelfAttention",
    "SpectralNormConv2d",
    "attention_forward",
    "spectral_normalize",
    "critic_loss",
    "generator_loss",
    "gradient_penalty_norms",
    "ImagePyramid",
    "MultiStageGenerator",
    "StageDiscriminator",
    "build_discriminators",
    "stage_resolutions",
    "GanCheckpoint",
    "generate_images",
    "generator_from_checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "train_gan",
]
