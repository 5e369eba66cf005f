"""Building blocks shared by the generators and discriminators."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from ..errors import ValidationError


class SelfAttention(nn.Module):
    """Pixel-wise self attention over a feature map.

    Query/key/value projections are 1x1 convolutions; the logit for output
    position j against position i is q(x_i)^T k(x_j), each row of the
    attention map is a softmax over i, and the attended values are scaled by
    a learned scalar (initialised to 0) and added back to the input.
    """

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        inner = max(channels // reduction, 1)
        self.query = nn.Conv2d(channels, inner, 1, bias=False)
        self.key = nn.Conv2d(channels, inner, 1, bias=False)
        self.value = nn.Conv2d(channels, channels, 1, bias=False)
        self.gamma = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        """Return ``(out, attention)`` with out shaped like x and attention
        shaped (batch, N, N), N = H*W, rows summing to 1."""
        b, c, h, w = x.shape
        n = h * w
        q = self.query(x).flatten(2)  # (b, c', n), location i in column i
        k = self.key(x).flatten(2)
        v = self.value(x).flatten(2)
        logits = torch.bmm(k.transpose(1, 2), q)  # (b, j, i) = k(x_j) . q(x_i)
        attention = F.softmax(logits, dim=2)
        attended = torch.bmm(v, attention.transpose(1, 2))  # (b, c, j)
        out = x + self.gamma * attended.view(b, c, h, w)
        return out, attention


def attention_forward(features, layer: SelfAttention):
    """Single-image convenience wrapper: (C, H, W) -> (out, attention (N, N))."""
    x = torch.as_tensor(features, dtype=torch.float32)
    if x.ndim != 3:
        raise ValidationError(f"expected (channels, H, W) features, got {tuple(x.shape)}")
    with torch.no_grad():
        out, att = layer(x.unsqueeze(0))
    return out[0], att[0]


class ConditionalBatchNorm2d(nn.Module):
    """Batch normalization with a per-class affine transform."""

    def __init__(self, num_features: int, class_count: int, eps: float = 1e-5):
        super().__init__()
        self.class_count = class_count
        # cumulative running averages: eval statistics stay usable even for
        # checkpoints taken after only a few optimizer steps
        self.bn = nn.BatchNorm2d(num_features, eps=eps, affine=False, momentum=None)
        self.gain = nn.Embedding(class_count, num_features)
        self.bias = nn.Embedding(class_count, num_features)
        nn.init.ones_(self.gain.weight)
        nn.init.zeros_(self.bias.weight)

    def forward(self, x, labels):
        labels = torch.as_tensor(labels, dtype=torch.long, device=x.device)
        if labels.numel() and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValidationError(
                f"label out of range [0, {self.class_count}) in conditional batch norm"
            )
        h = self.bn(x)
        gain = self.gain(labels).unsqueeze(-1).unsqueeze(-1)
        bias = self.bias(labels).unsqueeze(-1).unsqueeze(-1)
        return gain * h + bias


@dataclass
class PowerIterationState:
    """Persistent left/right singular-vector estimates for one weight."""

    u: torch.Tensor
    v: torch.Tensor

    @classmethod
    def fresh(cls, rows: int, cols: int, seed: int = 0) -> "PowerIterationState":
        gen = torch.Generator().manual_seed(seed)
        u = F.normalize(torch.randn(rows, generator=gen), dim=0, eps=1e-12)
        v = F.normalize(torch.randn(cols, generator=gen), dim=0, eps=1e-12)
        return cls(u=u, v=v)


SIGMA_FLOOR = 1e-12


def spectral_normalize(
    weight: torch.Tensor, power_iters: int = 1, state: PowerIterationState | None = None
) -> tuple[torch.Tensor, PowerIterationState]:
    """Divide a weight by its power-iteration largest-singular-value estimate.

    The weight is flattened to (rows, -1).  The returned state carries the
    updated left/right vectors for warm-started reuse.  A zero weight comes
    back unchanged: the estimate is clamped below at a tiny floor instead of
    dividing by zero.
    """
    if power_iters < 1:
        raise ValidationError("power_iters must be >= 1")
    mat = weight.reshape(weight.shape[0], -1)
    if state is None:
        state = PowerIterationState.fresh(mat.shape[0], mat.shape[1])
    u, v = state.u.to(mat.device), state.v.to(mat.device)
    with torch.no_grad():
        m = mat.detach()
        for _ in range(power_iters):
            v = F.normalize(m.t() @ u, dim=0, eps=1e-12)
            u = F.normalize(m @ v, dim=0, eps=1e-12)
    state.u, state.v = u, v
    sigma = torch.clamp(u @ (mat @ v), min=SIGMA_FLOOR)
    return (mat / sigma).reshape(weight.shape), state


class _SpectralNormMixin:
    def _init_sn(self, weight: torch.Tensor, power_iters: int):
        self.power_iters = power_iters
        rows = weight.shape[0]
        cols = weight.numel() // rows
        state = PowerIterationState.fresh(rows, cols)
        self.register_buffer("sn_u", state.u)
        self.register_buffer("sn_v", state.v)

    def _normalized_weight(self, weight: torch.Tensor) -> torch.Tensor:
        state = PowerIterationState(u=self.sn_u, v=self.sn_v)
        if self.training:
            normalized, state = spectral_normalize(weight, self.power_iters, state)
            self.sn_u, self.sn_v = state.u, state.v
            return normalized
        mat = weight.reshape(weight.shape[0], -1)
        sigma = torch.clamp(self.sn_u @ (mat @ self.sn_v), min=SIGMA_FLOOR)
        return weight / sigma


class SpectralNormConv2d(nn.Conv2d, _SpectralNormMixin):
    """Conv2d whose weight is spectrally normalized at every forward pass."""

    def __init__(self, *args, power_iters: int = 1, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_sn(self.weight, power_iters)

    def forward(self, x):
        return self._conv_forward(x, self._normalized_weight(self.weight), self.bias)


class SpectralNormLinear(nn.Linear, _SpectralNormMixin):
    def __init__(self, *args, power_iters: int = 1, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_sn(self.weight, power_iters)

    def forward(self, x):
        return F.linear(x, self._normalized_weight(self.weight), self.bias)


class MinibatchDiscrimination(nn.Module):
    """Append cross-batch similarity statistics to each sample's features.

    Every sample is mapped to ``kernels`` rows of length ``kernel_dim``; the
    appended statistic per kernel is the sum over the *other* batch members
    of exp(-L1 distance) between rows.  A batch of one appends zeros (empty
    sum).
    """

    def __init__(self, in_features: int, kernels: int = 16, kernel_dim: int = 8):
        super().__init__()
        self.kernels = kernels
        self.kernel_dim = kernel_dim
        self.T = nn.Parameter(torch.randn(in_features, kernels * kernel_dim) * 0.1)

    @property
    def extra_features(self) -> int:
        return self.kernels

    def forward(self, x):
        if x.ndim != 2:
            raise ValidationError(f"minibatch discrimination expects (batch, F), got {tuple(x.shape)}")
        n = x.shape[0]
        m = (x @ self.T).view(n, self.kernels, self.kernel_dim)
        l1 = (m.unsqueeze(0) - m.unsqueeze(1)).abs().sum(dim=3)  # (n, n, kernels)
        closeness = torch.exp(-l1)
        eye = torch.eye(n, device=x.device, dtype=x.dtype).unsqueeze(-1)
        stats = (closeness * (1.0 - eye)).sum(dim=1)
        return torch.cat([x, stats], dim=1)
