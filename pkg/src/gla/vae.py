"""Convolutional VAE over RA frames and its two ELBO loss terms."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import StructuralError, ValidationError

LOG_VAR_RANGE = (-10.0, 10.0)
BCE_EPS = 1e-7


@dataclass
class VAEArch:
    input_channels: int = 3
    input_hw: tuple[int, int] = (64, 64)
    conv_channels: tuple[int, ...] = (32, 64, 128, 256)
    latent_dim: int = 32
    encoder_bias: bool = False

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        if len(self.conv_channels) != 4:
            raise ValidationError("conv_channels must list exactly four widths")
        h, w = self.input_hw
        if h % 16 or w % 16 or h < 16 or w < 16:
            raise ValidationError(f"input_hw must be divisible by 16 (four stride-2 blocks), got {self.input_hw}")
        if self.latent_dim < 2:
            raise ValidationError("latent_dim must be >= 2")

    @property
    def bottleneck_hw(self) -> tuple[int, int]:
        return self.input_hw[0] // 16, self.input_hw[1] // 16

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VAEArch":
        return cls(**d)


@dataclass
class LatentCode:
    mu: torch.Tensor
    log_var: torch.Tensor
    z: torch.Tensor | None = None

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


def reparameterize(code: LatentCode, epsilon: torch.Tensor) -> torch.Tensor:
    """z = mu + sigma * epsilon."""
    if epsilon.shape != code.mu.shape:
        raise StructuralError(f"epsilon shape {tuple(epsilon.shape)} != mu shape {tuple(code.mu.shape)}")
    return code.mu + torch.exp(0.5 * code.log_var) * epsilon


class RadarVAE(nn.Module):
    """Four stride-2 conv blocks -> (mu, log_var) heads; mirrored transposed-conv decoder."""

    def __init__(self, arch: VAEArch | None = None):
        super().__init__()
        self.arch = arch or VAEArch()
        a = self.arch
        widths = (a.input_channels,) + a.conv_channels
        self.enc_blocks = nn.ModuleList(
            nn.Sequential(nn.Conv2d(widths[i], widths[i + 1], 4, 2, 1, bias=a.encoder_bias), nn.ReLU())
            for i in range(4)
        )
        bh, bw = a.bottleneck_hw
        flat = a.conv_channels[-1] * bh * bw
        self.fc_mu = nn.Linear(flat, a.latent_dim)
        self.fc_log_var = nn.Linear(flat, a.latent_dim)

        self.dec_fc = nn.Linear(a.latent_dim, flat)
        rev = a.conv_channels[::-1] + (a.input_channels,)
        blocks = []
        for i in range(4):
            layers = [nn.ConvTranspose2d(rev[i], rev[i + 1], 4, 2, 1)]
            if i < 3:
                layers.append(nn.ReLU())
            blocks.append(nn.Sequential(*layers))
        self.dec_blocks = nn.ModuleList(blocks)

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        expected = (self.arch.input_channels,) + self.arch.input_hw
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise StructuralError(f"input shape {tuple(x.shape)} does not match arch {expected}")
        return x

    def encode(self, x: torch.Tensor) -> tuple[LatentCode, list[torch.Tensor]]:
        """Posterior parameters plus the activations of every conv block."""
        h = self._check_input(x)
        features = []
        for block in self.enc_blocks:
            h = block(h)
            features.append(h)
        flat = h.flatten(1)
        log_var = self.fc_log_var(flat).clamp(*LOG_VAR_RANGE)
        return LatentCode(self.fc_mu(flat), log_var), features

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.arch.latent_dim:
            raise StructuralError(f"z has length {z.shape[-1]}, expected {self.arch.latent_dim}")
        squeeze = z.dim() == 1
        z = z.unsqueeze(0) if squeeze else z
        bh, bw = self.arch.bottleneck_hw
        h = torch.relu(self.dec_fc(z)).view(z.shape[0], self.arch.conv_channels[-1], bh, bw)
        for block in self.dec_blocks:
            h = block(h)
        out = torch.sigmoid(h)
        return out[0] if squeeze else out

    def forward(self, x: torch.Tensor, epsilon: torch.Tensor | None = None):
        code, features = self.encode(x)
        if epsilon is None:
            epsilon = torch.randn_like(code.mu)
        code.z = reparameterize(code, epsilon)
        return self.decode(code.z), code, features


def _batched(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(1, -1) if t.dim() <= 1 else t.reshape(t.shape[0], -1)


def recon_loss_bce(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Per-pixel BCE summed over pixels and channels, averaged over the batch."""
    if x.shape != x_hat.shape:
        raise StructuralError(f"target shape {tuple(x.shape)} != reconstruction shape {tuple(x_hat.shape)}")
    if torch.any(x < 0) or torch.any(x > 1) or not torch.all(torch.isfinite(x)):
        raise ValidationError("BCE targets must lie in [0, 1]")
    xh = x_hat.clamp(BCE_EPS, 1.0 - BCE_EPS)
    per_elem = -(x * torch.log(xh) + (1.0 - x) * torch.log1p(-xh))
    return _batched(per_elem).sum(dim=1).mean()


def kld_loss(code_or_mu, log_var: torch.Tensor | None = None) -> torch.Tensor:
    """KL(q || N(0, I)) summed over latent dims, averaged over the batch."""
    if isinstance(code_or_mu, LatentCode):
        mu, log_var = code_or_mu.mu, code_or_mu.log_var
    else:
        mu = code_or_mu
    per_dim = -0.5 * (1.0 + log_var - mu.pow(2) - log_var.exp())
    return _batched(per_dim).sum(dim=1).mean()
