import hashlib

import pytest
import torch

from sdetok.adversarial import (PatchDiscriminator, PerceptualNet, gan_losses,
                                hinge_d_loss, hinge_g_loss)


def _params_hash(module):
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def perceptual():
    return PerceptualNet(seed=1)


def test_perceptual_zero_on_identical(perceptual):
    x = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    assert float(perceptual(x, x)) == 0.0


def test_perceptual_symmetric(perceptual):
    gen = torch.Generator().manual_seed(1)
    x = torch.rand(1, 3, 32, 32, generator=gen)
    y = torch.rand(1, 3, 32, 32, generator=gen)
    assert float(perceptual(x, y)) == pytest.approx(float(perceptual(y, x)), rel=1e-6)


def test_perceptual_monotone_in_noise(perceptual):
    gen = torch.Generator().manual_seed(2)
    hits = 0
    for _ in range(20):
        x = torch.rand(1, 3, 32, 32, generator=gen)
        noise = torch.randn(1, 3, 32, 32, generator=gen)
        vals = [float(perceptual(x, (x + eps * noise).clamp(0, 1)))
                for eps in (0.0, 0.1, 0.2)]
        if vals[0] <= vals[1] <= vals[2]:
            hits += 1
    assert hits >= 18


def test_hinge_disc_zero_for_perfect_disc():
    class Fixed(torch.nn.Module):
        def __init__(self, value):
            super().__init__()
            self.value = value

        def forward(self, x):
            return torch.full((x.shape[0], 1, 4, 4), self.value)

    x = torch.rand(2, 3, 32, 32)

    # D = +1 on real, -1 on fake: relu(1-1) + relu(1-1) = 0
    logits_real = torch.relu(1.0 - Fixed(1.0)(x)).mean()
    logits_fake = torch.relu(1.0 + Fixed(-1.0)(x)).mean()
    assert float(logits_real + logits_fake) == 0.0

    # D = 0 everywhere
    zero = Fixed(0.0)
    assert float(hinge_d_loss(zero, x, x)) == pytest.approx(2.0)
    assert float(hinge_g_loss(zero, x)) == 0.0


def test_generator_gets_gradient_through_gan_loss():
    disc = PatchDiscriminator(base_channels=8)
    x_fake = torch.rand(1, 3, 32, 32, requires_grad=True)
    l_gen = hinge_g_loss(disc, x_fake)
    l_gen.backward()
    assert x_fake.grad is not None
    assert float(x_fake.grad.abs().sum()) > 0


def test_disc_update_leaves_generator_untouched():
    disc = PatchDiscriminator(base_channels=8)
    gen_net = torch.nn.Conv2d(3, 3, 1)
    before = _params_hash(gen_net)
    x = torch.rand(2, 3, 32, 32)
    fake = torch.rand(2, 3, 32, 32)
    opt = torch.optim.SGD(disc.parameters(), lr=0.1)
    opt.zero_grad()
    hinge_d_loss(disc, x, fake).backward()
    opt.step()
    assert _params_hash(gen_net) == before


def test_gen_update_leaves_disc_untouched():
    disc = PatchDiscriminator(base_channels=8)
    gen_net = torch.nn.Conv2d(3, 3, 1)
    before = _params_hash(disc)
    x = torch.rand(2, 3, 32, 32)
    fake = torch.sigmoid(gen_net(x))
    opt = torch.optim.SGD(gen_net.parameters(), lr=0.1)
    opt.zero_grad()
    hinge_g_loss(disc, fake).backward()
    opt.step()
    assert _params_hash(disc) == before


def test_gan_losses_pair():
    disc = PatchDiscriminator(base_channels=8)
    x = torch.rand(1, 3, 32, 32)
    fake = torch.rand(1, 3, 32, 32)
    l_d, l_g = gan_losses(disc, x, fake)
    assert torch.isfinite(l_d) and torch.isfinite(l_g)
