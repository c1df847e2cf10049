"""Conditional image-to-image GAN with one self-attention layer per network.

The generator is an encoder-decoder of residual blocks: four downsampling
blocks without normalization, then four upsampling blocks whose batchnorm
gains and biases come from a linear projection of (z, class embedding).
The discriminator mirrors the decoder (downsampling, spectral-normalized)
and scores class membership through a projection layer: psi(phi) plus the
inner product of the pooled features with a class embedding row.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "ShapeMismatch",
    "NonDivisibleSpatialDims",
    "EmptyBatch",
    "NegativeLambda",
    "GANModelConfig",
    "SelfAttention2d",
    "ConditionalBatchNorm2d",
    "Generator",
    "Discriminator",
    "hinge_d_loss",
    "hinge_g_loss",
    "GANLosses",
    "combine_losses",
]


class ShapeMismatch(ValueError):
    pass


class NonDivisibleSpatialDims(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


class NegativeLambda(ValueError):
    pass


@dataclass(frozen=True)
class GANModelConfig:
    """Shared architecture hyperparameters for generator and discriminator."""

    widths: tuple[int, ...] = (32, 64, 128, 256)
    z_dim: int = 128
    class_embed_dim: int = 16
    num_classes: int = 2
    attention_reduction: int = 8
    spectral_norm: bool = True  # discriminator convolutions only
    in_channels: int = 1

    @classmethod
    def tiny(cls) -> "GANModelConfig":
        """Desk-scale preset for smoke tests and CPU runs."""
        return cls(widths=(8, 12, 16, 24), z_dim=16, class_embed_dim=8)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GANModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def _orthogonal_conv(conv: nn.Conv2d) -> nn.Conv2d:
    nn.init.orthogonal_(conv.weight)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)
    return conv


def _conv3(c_in: int, c_out: int) -> nn.Conv2d:
    return _orthogonal_conv(nn.Conv2d(c_in, c_out, 3, padding=1))


def _conv1(c_in: int, c_out: int) -> nn.Conv2d:
    return _orthogonal_conv(nn.Conv2d(c_in, c_out, 1))


class SelfAttention2d(nn.Module):
    """Softmax-weighted feature mixing over all spatial positions.

    y = gamma * o + x, where o_j = sum_i beta_{j,i} h(x_i) and beta is the
    softmax over source positions i of f(x_i)^T g(x_j).  With gamma at its
    zero initialization the layer is exactly the identity.
    """

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        reduced = max(1, channels // reduction)
        self.channels = channels
        self.f = _orthogonal_conv(nn.Conv2d(channels, reduced, 1, bias=False))
        self.g = _orthogonal_conv(nn.Conv2d(channels, reduced, 1, bias=False))
        self.h = _orthogonal_conv(nn.Conv2d(channels, channels, 1, bias=False))
        self.gamma = nn.Parameter(torch.zeros(()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"expected (B,{self.channels},H,W), got {tuple(x.shape)}")
        b, c, hgt, wid = x.shape
        n = hgt * wid
        fx = self.f(x).flatten(2)  # B x C' x N, column i holds f(x_i)
        gx = self.g(x).flatten(2)
        hx = self.h(x).flatten(2)
        scores = torch.einsum("bci,bcj->bij", fx, gx)  # s_ij
        beta = torch.softmax(scores, dim=1)  # normalize over source index i
        o = torch.einsum("bci,bij->bcj", hx, beta)
        return (self.gamma * o + x.flatten(2)).view(b, c, hgt, wid)


class ConditionalBatchNorm2d(nn.Module):
    """Batchnorm whose per-channel gain/bias are affine in a condition vector."""

    def __init__(self, num_features: int, cond_dim: int, momentum: float = 0.1):
        super().__init__()
        self.bn = nn.BatchNorm2d(num_features, affine=False, momentum=momentum)
        self.gain = nn.Linear(cond_dim, num_features)
        self.bias = nn.Linear(cond_dim, num_features)
        nn.init.orthogonal_(self.gain.weight)
        nn.init.ones_(self.gain.bias)  # start at unit gain
        nn.init.orthogonal_(self.bias.weight)
        nn.init.zeros_(self.bias.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        out = self.bn(x)
        g = self.gain(cond).unsqueeze(-1).unsqueeze(-1)
        b = self.bias(cond).unsqueeze(-1).unsqueeze(-1)
        return g * out + b


class DownBlock(nn.Module):
    """Residual block halving H and W: Conv3x3 - ReLU - AvgPool - Conv3x3."""

    def __init__(self, c_in: int, c_out: int, spectral: bool = False):
        super().__init__()
        wrap = nn.utils.spectral_norm if spectral else (lambda m: m)
        self.conv1 = wrap(_conv3(c_in, c_out))
        self.conv2 = wrap(_conv3(c_out, c_out))
        self.skip = wrap(_conv1(c_in, c_out)) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv2(F.avg_pool2d(F.relu(self.conv1(x)), 2))
        return h + self.skip(F.avg_pool2d(x, 2))


class UpBlock(nn.Module):
    """Residual block doubling H and W with conditional batchnorm."""

    def __init__(self, c_in: int, c_out: int, cond_dim: int):
        super().__init__()
        self.bn1 = ConditionalBatchNorm2d(c_in, cond_dim)
        self.conv1 = _conv3(c_in, c_out)
        self.bn2 = ConditionalBatchNorm2d(c_out, cond_dim)
        self.conv2 = _conv3(c_out, c_out)
        self.skip = _conv1(c_in, c_out) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = F.interpolate(F.relu(self.bn1(x, cond)), scale_factor=2, mode="nearest")
        h = self.conv2(F.relu(self.bn2(self.conv1(h), cond)))
        return h + self.skip(F.interpolate(x, scale_factor=2, mode="nearest"))


class Generator(nn.Module):
    """Encoder-decoder translator conditioned on (z, target class) via CBN."""

    DOWNSAMPLE_FACTOR = 16  # four halvings

    def __init__(self, cfg: GANModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.encoder = nn.ModuleList(
            [DownBlock(cfg.in_channels, w[0]), DownBlock(w[0], w[1]), DownBlock(w[1], w[2]), DownBlock(w[2], w[3])]
        )
        cond_dim = cfg.z_dim + cfg.class_embed_dim
        dec_out = (w[2], w[1], w[0], w[0])
        dec_in = (w[3], w[2], w[1], w[0])
        self.decoder = nn.ModuleList(UpBlock(ci, co, cond_dim) for ci, co in zip(dec_in, dec_out))
        self.attention = SelfAttention2d(w[1], cfg.attention_reduction)  # after second up block
        self.class_embed = nn.Embedding(cfg.num_classes, cfg.class_embed_dim)
        nn.init.orthogonal_(self.class_embed.weight)
        self.final_bn = nn.BatchNorm2d(w[0])
        self.final_conv = _conv3(w[0], cfg.in_channels)

    def forward(self, x: torch.Tensor, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeMismatch(f"expected (B,{self.cfg.in_channels},H,W) input, got {tuple(x.shape)}")
        b, _, hgt, wid = x.shape
        if hgt % self.DOWNSAMPLE_FACTOR or wid % self.DOWNSAMPLE_FACTOR:
            raise NonDivisibleSpatialDims(f"H and W must divide {self.DOWNSAMPLE_FACTOR}, got {hgt}x{wid}")
        if z.shape != (b, self.cfg.z_dim) or c.shape != (b,):
            raise ShapeMismatch("z or c batch shape does not match input batch")
        cond = torch.cat([z, self.class_embed(c)], dim=1)
        h = x
        for block in self.encoder:
            h = block(h)
        for i, block in enumerate(self.decoder):
            h = block(h, cond)
            if i == 1:
                h = self.attention(h)
        h = self.final_conv(F.relu(self.final_bn(h)))
        # Clamp keeps the sigmoid strictly inside (0, 1) in float32.
        return torch.sigmoid(torch.clamp(h, -12.0, 12.0))

    def sample_z(self, batch: int, generator: torch.Generator | None = None) -> torch.Tensor:
        return torch.randn(batch, self.cfg.z_dim, generator=generator)


class Discriminator(nn.Module):
    """Projection discriminator over domain classes."""

    def __init__(self, cfg: GANModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        sn = cfg.spectral_norm
        self.blocks = nn.ModuleList(
            [
                DownBlock(cfg.in_channels, w[0], spectral=sn),
                DownBlock(w[0], w[1], spectral=sn),
                DownBlock(w[1], w[2], spectral=sn),
                DownBlock(w[2], w[3], spectral=sn),
            ]
        )
        self.attention = SelfAttention2d(w[1], cfg.attention_reduction)  # after second block
        self.psi = nn.Linear(w[3], 1)
        nn.init.orthogonal_(self.psi.weight)
        nn.init.zeros_(self.psi.bias)
        self.class_embed = nn.Embedding(cfg.num_classes, w[3])
        nn.init.orthogonal_(self.class_embed.weight)
        self._settle_spectral_estimates()

    def _settle_spectral_estimates(self, iterations: int = 10) -> None:
        """Run power iterations at construction so the sigma estimates start
        near the true spectral norms instead of a random Rayleigh quotient."""
        if not self.cfg.spectral_norm:
            return
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d) and hasattr(m, "weight_orig"):
                    dummy = torch.zeros(1, m.in_channels, 4, 4)
                    for _ in range(iterations):
                        m(dummy)  # each training-mode forward is one iteration

    def pooled_features(self, y: torch.Tensor) -> torch.Tensor:
        """Global sum-pooled final features phi(y)."""
        if y.dim() != 4 or y.shape[1] != self.cfg.in_channels:
            raise ShapeMismatch(f"expected (B,{self.cfg.in_channels},H,W) input, got {tuple(y.shape)}")
        h = y
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i == 1:
                h = self.attention(h)
        return F.relu(h).sum(dim=(2, 3))

    def forward(self, y: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        phi = self.pooled_features(y)
        if c.shape != (y.shape[0],):
            raise ShapeMismatch("class batch shape does not match input batch")
        return self.psi(phi).squeeze(1) + (self.class_embed(c) * phi).sum(dim=1)


def _as_batch(scores) -> torch.Tensor:
    t = torch.as_tensor(scores, dtype=torch.get_default_dtype() if not torch.is_tensor(scores) else None)
    t = t.reshape(-1)
    if t.numel() == 0:
        raise EmptyBatch("score batch is empty")
    return t


def hinge_d_loss(real_scores, fake_scores) -> torch.Tensor:
    """Margin loss pushing real scores above +1 and fake scores below -1."""
    real = _as_batch(real_scores)
    fake = _as_batch(fake_scores)
    return F.relu(1.0 - real).mean() + F.relu(1.0 + fake).mean()


def hinge_g_loss(fake_scores) -> torch.Tensor:
    """Generator wants large discriminator scores on its samples."""
    return -_as_batch(fake_scores).mean()


@dataclass(frozen=True)
class GANLosses:
    """Per-step loss scalars; the combined values satisfy
    l_dt = l_d + lam*l_t and l_gt = l_g + lam*l_t exactly."""

    l_d: float
    l_g: float
    l_t: float
    l_dt: float
    l_gt: float
    lam: float

    def is_finite(self) -> bool:
        vals = (self.l_d, self.l_g, self.l_t, self.l_dt, self.l_gt)
        return all(v == v and abs(v) != float("inf") for v in vals)


def combine_losses(l_d: float, l_g: float, l_t: float, lam: float) -> GANLosses:
    if lam < 0:
        raise NegativeLambda(f"lambda must be >= 0, got {lam}")
    return GANLosses(l_d=l_d, l_g=l_g, l_t=l_t, l_dt=l_d + lam * l_t, l_gt=l_g + lam * l_t, lam=lam)
