"""Perceptual distance and patch discriminator with hinge losses."""

from __future__ import annotations

import torch
from torch import Tensor

from .semantic import FrozenConvTrunk
from .vq import ContractViolation


class PerceptualNet(torch.nn.Module):
    """LPIPS-style distance over a frozen conv trunk.

    Per layer: unit-normalize channels at each spatial position, take the
    mean squared difference, then average layers with equal weights. Not
    true LPIPS (no shipped pretrained weights) but shares its structure.
    """

    def __init__(self, trunk: FrozenConvTrunk | None = None, seed: int = 7):
        super().__init__()
        self.trunk = trunk if trunk is not None else FrozenConvTrunk(seed=seed)
        for p in self.parameters():
            p.requires_grad_(False)

    @staticmethod
    def _normalize(feat: Tensor) -> Tensor:
        return feat / (feat.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-8)

    def forward(self, x: Tensor, x_hat: Tensor) -> Tensor:
        """Perceptual distance between (N, 3, H, W) batches in [0, 1]."""
        if x.shape != x_hat.shape:
            raise ContractViolation("perceptual loss needs equal shapes")
        fx = self.trunk.features(x)
        fy = self.trunk.features(x_hat)
        total = x.new_zeros(())
        for a, b in zip(fx, fy):
            total = total + (self._normalize(a) - self._normalize(b)).pow(2).mean()
        return total / len(fx)


class PatchDiscriminator(torch.nn.Module):
    """PatchGAN: 3 stride-2 conv layers, 64 base channels, logit map output."""

    def __init__(self, base_channels: int = 64):
        super().__init__()
        c = base_channels
        self.net = torch.nn.Sequential(
            torch.nn.Conv2d(3, c, 4, stride=2, padding=1),
            torch.nn.LeakyReLU(0.2),
            torch.nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            torch.nn.LeakyReLU(0.2),
            torch.nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            torch.nn.LeakyReLU(0.2),
            torch.nn.Conv2d(4 * c, 1, 3, stride=1, padding=1),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


def hinge_d_loss(disc: PatchDiscriminator, x_real: Tensor, x_fake: Tensor) -> Tensor:
    """Hinge discriminator loss; the fake branch is detached."""
    if x_real.shape != x_fake.shape:
        raise ContractViolation("real/fake batches must share a shape")
    logits_real = disc(x_real)
    logits_fake = disc(x_fake.detach())
    return (torch.relu(1.0 - logits_real).mean()
            + torch.relu(1.0 + logits_fake).mean())


def hinge_g_loss(disc: PatchDiscriminator, x_fake: Tensor) -> Tensor:
    """Generator side of the hinge objective: -mean D(x_fake)."""
    return -disc(x_fake).mean()


def gan_losses(disc: PatchDiscriminator, x_real: Tensor,
               x_fake: Tensor) -> tuple[Tensor, Tensor]:
    return hinge_d_loss(disc, x_real, x_fake), hinge_g_loss(disc, x_fake)
