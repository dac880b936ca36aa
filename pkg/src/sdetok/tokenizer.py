"""The semantics-constrained tokenizer: encoder, fusion, quantization,
semantic decoder with cosine distillation, image decoder, loss assembly,
and the training step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from . import vq
from .adversarial import PatchDiscriminator, PerceptualNet, hinge_d_loss, hinge_g_loss
from .semantic import SemanticTarget
from .vq import Codebook, ContractViolation, InvalidInput


class DivergenceError(RuntimeError):
    """A loss term or gradient went non-finite during training."""

    def __init__(self, term: str):
        super().__init__(f"non-finite value in term '{term}'")
        self.term = term


@dataclass
class SDEConfig:
    K: int = 512               # codebook size
    d: int = 8                 # codebook vector dimension
    f: int = 8                 # encoder downsample factor, power of two
    beta: float = 0.25
    w_sem: float = 1.0
    lambda_g: float = 0.5
    disc_start: int = 400
    d_sem: int = 64
    image_size: int = 64
    enc_width: int = 32        # base channel count, doubled per stride-2 level
    sem_dec_width: int = 128
    sem_dec_layers: int = 2
    dead_code_restart: bool = False
    dead_code_interval: int = 200

    def __post_init__(self):
        for name in ("K", "d", "f", "disc_start", "d_sem", "image_size"):
            if getattr(self, name) < 0 or (name != "disc_start" and getattr(self, name) == 0):
                raise ContractViolation(f"{name} must be positive")
        if self.w_sem < 0 or self.lambda_g < 0 or self.beta < 0:
            raise ContractViolation("loss weights must be >= 0")
        if self.f & (self.f - 1):
            raise ContractViolation("downsample factor must be a power of two")


@dataclass
class LossReport:
    l_sem: float
    l_l2: float
    l_perceptual: float
    l_gen: float
    l_vq: float
    l_total: float
    lambda_g: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def check_image(image: Tensor, f: int) -> None:
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ContractViolation("image must be (H, W, 3)")
    if image.shape[0] % f or image.shape[1] % f:
        raise ContractViolation(f"image dims must be divisible by f={f}")
    if not torch.isfinite(image).all() or image.min() < 0 or image.max() > 1:
        raise InvalidInput("image values must be finite and in [0, 1]")


class SemanticDecoder(torch.nn.Module):
    """Small transformer from quantized codes back to teacher-feature space."""

    def __init__(self, d_code: int, d_sem: int, width: int, num_layers: int,
                 max_positions: int = 4096):
        super().__init__()
        self.in_proj = torch.nn.Linear(d_code, width)
        self.pos = torch.nn.Parameter(torch.zeros(max_positions, width))
        torch.nn.init.normal_(self.pos, std=0.02)
        layer = torch.nn.TransformerEncoderLayer(
            d_model=width, nhead=4, dim_feedforward=2 * width,
            dropout=0.0, batch_first=True)
        self.blocks = torch.nn.TransformerEncoder(layer, num_layers=num_layers)
        self.head = torch.nn.Linear(width, d_sem)

    def forward(self, zq: Tensor) -> Tensor:
        """(N, h, w, d) -> (N, h, w, d_sem)."""
        n, h, w, d = zq.shape
        tok = self.in_proj(zq.reshape(n, h * w, d)) + self.pos[: h * w]
        out = self.head(self.blocks(tok))
        return out.reshape(n, h, w, -1)


class SDEModel(torch.nn.Module):
    """Conv encoder + additive semantic fusion + VQ + twin decoders."""

    def __init__(self, config: SDEConfig, seed: int = 0):
        super().__init__()
        self.config = config
        torch.manual_seed(seed)
        levels = int(math.log2(config.f))
        widths = [config.enc_width * 2 ** i for i in range(levels)]

        enc = []
        c_in = 3
        for c_out in widths:
            enc += [torch.nn.Conv2d(c_in, c_out, 4, stride=2, padding=1),
                    torch.nn.SiLU()]
            c_in = c_out
        enc += [torch.nn.Conv2d(c_in, c_in, 3, padding=1), torch.nn.SiLU()]
        self.encoder = torch.nn.Sequential(*enc)
        self.enc_channels = c_in

        self.sem_proj = torch.nn.Linear(config.d_sem, c_in)
        self.to_code = torch.nn.Conv2d(c_in, config.d, 1)
        self.codebook = Codebook(config.K, config.d,
                                 generator=torch.Generator().manual_seed(seed + 1))
        self.sem_decoder = SemanticDecoder(
            config.d, config.d_sem, config.sem_dec_width, config.sem_dec_layers)

        rev = list(reversed(widths))
        dec = [torch.nn.Conv2d(config.d, rev[0], 3, padding=1), torch.nn.SiLU()]
        c_in = rev[0]
        for c_out in rev[1:] + [rev[-1]]:
            dec += [torch.nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1),
                    torch.nn.SiLU()]
            c_in = c_out
        dec += [torch.nn.Conv2d(c_in, 3, 3, padding=1)]
        self.decoder = torch.nn.Sequential(*dec)

    # batched internals ---------------------------------------------------

    def encode_batch(self, images: Tensor, targets: Tensor | None) -> Tensor:
        """(N, H, W, 3) [+ (N, h, w, d_sem)] -> (N, h, w, d) pre-quantization."""
        feat = self.encoder(images.permute(0, 3, 1, 2))          # (N, C, h, w)
        if targets is not None:
            t = self.sem_proj(targets)                           # (N, h, w, C)
            if t.shape[1:3] != feat.shape[2:4]:
                raise ContractViolation(
                    f"target grid {tuple(t.shape[1:3])} != encoder grid "
                    f"{tuple(feat.shape[2:4])}")
            feat = feat + t.permute(0, 3, 1, 2)
        z = self.to_code(feat)                                   # (N, d, h, w)
        return z.permute(0, 2, 3, 1)

    def decode_batch(self, zq: Tensor) -> Tensor:
        """(N, h, w, d) -> (N, H, W, 3) in (0, 1)."""
        out = self.decoder(zq.permute(0, 3, 1, 2))
        return torch.sigmoid(out).permute(0, 2, 3, 1)


# single-image operations -------------------------------------------------


def encode_fused(model: SDEModel, image: Tensor, target: SemanticTarget | None) -> Tensor:
    """Fused pre-quantization feature grid for one image."""
    check_image(image, model.config.f)
    t = target.features.unsqueeze(0) if target is not None else None
    return model.encode_batch(image.unsqueeze(0), t)[0]


def cosine_distill_loss(decoded: Tensor, target: Tensor, eps: float = 1e-8) -> Tensor:
    """Mean over positions of 1 - cos(decoded, target); always in [0, 2]."""
    if decoded.shape != target.shape:
        raise ContractViolation("decoded/target feature shapes differ")
    num = (decoded * target).sum(-1)
    den = decoded.norm(dim=-1) * target.norm(dim=-1) + eps
    return (1.0 - num / den).mean()


def semantic_loss(model: SDEModel, zq: Tensor, target: SemanticTarget) -> Tensor:
    decoded = model.sem_decoder(zq.unsqueeze(0))[0]
    return cosine_distill_loss(decoded, target.features)


def tokenize(model: SDEModel, image: Tensor, target: SemanticTarget | None) -> Tensor:
    """Integer code grid (H/f, W/f) for one image."""
    with torch.no_grad():
        z = encode_fused(model, image, target)
        return vq.quantize(z, model.codebook, model.config.beta).codes


def reconstruct(model: SDEModel, codes: Tensor) -> Tensor:
    """Decode a code grid back to an (H, W, 3) image in [0, 1]."""
    if codes.min() < 0 or codes.max() >= model.config.K:
        raise InvalidInput("code out of range")
    with torch.no_grad():
        zq = model.codebook.entries[codes.reshape(-1)].reshape(
            codes.shape[0], codes.shape[1], model.config.d)
        return model.decode_batch(zq.unsqueeze(0))[0].clamp(0.0, 1.0)


# loss assembly -----------------------------------------------------------


@dataclass
class LossTensors:
    """Scalar loss tensors with live autograd graphs."""

    l_sem: Tensor
    l_l2: Tensor
    l_perceptual: Tensor
    l_gen: Tensor
    l_vq: Tensor
    l_total: Tensor
    lambda_g: float

    def report(self) -> LossReport:
        vals = {k: float(getattr(self, k).item())
                for k in ("l_sem", "l_l2", "l_perceptual", "l_gen", "l_vq", "l_total")}
        for name, v in vals.items():
            if not math.isfinite(v):
                raise DivergenceError(name)
        return LossReport(lambda_g=self.lambda_g, **vals)


def compute_losses(model: SDEModel, images: Tensor, targets: Tensor,
                   perceptual: PerceptualNet, disc: PatchDiscriminator | None,
                   step: int) -> tuple[LossTensors, Tensor]:
    """All tokenizer loss terms for an (N, H, W, 3) batch.

    Returns the loss tensors and the reconstruction (for the discriminator
    update). The adversarial term only participates once ``step`` reaches
    ``disc_start``; before that it is reported as 0 with lambda_g 0.
    """
    cfg = model.config
    z = model.encode_batch(images, targets)
    # fold the batch into rows so the (h, w, d) quantizer applies as-is
    result = vq.quantize(z.reshape(z.shape[0] * z.shape[1], z.shape[2], cfg.d),
                         model.codebook, cfg.beta)
    zq = result.quantized.reshape(z.shape)
    zq_st = vq.straight_through(z, zq)
    l_vq = vq.vq_loss(result)

    # distillation input keeps both gradient paths live: codebook entries
    # through zq, encoder through the pass-through on z
    decoded_sem = model.sem_decoder(zq + z - z.detach())
    l_sem = cosine_distill_loss(decoded_sem, targets)

    recon = model.decode_batch(zq_st)
    l_l2 = (images - recon).pow(2).mean()
    x_nchw = images.permute(0, 3, 1, 2)
    r_nchw = recon.permute(0, 3, 1, 2)
    l_perc = perceptual(x_nchw, r_nchw)

    gan_on = disc is not None and step >= cfg.disc_start
    if gan_on:
        l_gen = hinge_g_loss(disc, r_nchw)
        lambda_g = cfg.lambda_g
    else:
        l_gen = images.new_zeros(())
        lambda_g = 0.0

    l_total = (cfg.w_sem * l_sem + l_l2 + l_perc + lambda_g * l_gen + l_vq)
    tensors = LossTensors(l_sem=l_sem, l_l2=l_l2, l_perceptual=l_perc,
                          l_gen=l_gen, l_vq=l_vq, l_total=l_total,
                          lambda_g=lambda_g)
    return tensors, recon


def total_loss(model: SDEModel, images: Tensor, targets: Tensor,
               perceptual: PerceptualNet, disc: PatchDiscriminator | None,
               step: int) -> LossReport:
    tensors, _ = compute_losses(model, images, targets, perceptual, disc, step)
    return tensors.report()


# optimization ------------------------------------------------------------


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup to ``peak`` then cosine decay to zero."""
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total <= warmup:
        return peak
    frac = (step - warmup) / (total - warmup)
    return 0.5 * peak * (1.0 + math.cos(math.pi * min(frac, 1.0)))


@dataclass
class TrainState:
    opt: torch.optim.AdamW
    disc_opt: torch.optim.AdamW | None
    step: int = 0
    peak_lr: float = 1e-4
    warmup: int = 100
    total_steps: int = 2000
    last_used: Tensor | None = None     # per-code step of last use

    @classmethod
    def create(cls, model: SDEModel, disc: PatchDiscriminator | None,
               peak_lr: float = 1e-4, warmup: int = 100, total_steps: int = 2000,
               betas: tuple[float, float] = (0.9, 0.95)) -> "TrainState":
        opt = torch.optim.AdamW(model.parameters(), lr=peak_lr, betas=betas)
        disc_opt = (torch.optim.AdamW(disc.parameters(), lr=peak_lr, betas=betas)
                    if disc is not None else None)
        return cls(opt=opt, disc_opt=disc_opt, peak_lr=peak_lr,
                   warmup=warmup, total_steps=total_steps)


def train_step(model: SDEModel, disc: PatchDiscriminator | None,
               images: Tensor, targets: Tensor, perceptual: PerceptualNet,
               state: TrainState) -> LossReport:
    """One AdamW update of the tokenizer (and the discriminator once active)."""
    if images.shape[0] == 0:
        raise ContractViolation("empty batch")
    lr = lr_at(state.step, state.peak_lr, state.warmup, state.total_steps)
    for g in state.opt.param_groups:
        g["lr"] = lr

    tensors, recon = compute_losses(model, images, targets, perceptual, disc, state.step)
    report = tensors.report()
    state.opt.zero_grad()
    tensors.l_total.backward()
    for p in model.parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise DivergenceError("gradient")
    state.opt.step()

    if disc is not None and state.step >= model.config.disc_start:
        for g in state.disc_opt.param_groups:
            g["lr"] = lr
        d_loss = hinge_d_loss(disc, images.permute(0, 3, 1, 2),
                              recon.detach().permute(0, 3, 1, 2))
        state.disc_opt.zero_grad()
        d_loss.backward()
        state.disc_opt.step()

    if model.config.dead_code_restart:
        _maybe_restart_dead_codes(model, images, targets, state)

    state.step += 1
    return report


def _maybe_restart_dead_codes(model: SDEModel, images: Tensor, targets: Tensor,
                              state: TrainState) -> None:
    cfg = model.config
    if state.last_used is None:
        state.last_used = torch.zeros(cfg.K, dtype=torch.long)
    with torch.no_grad():
        z = model.encode_batch(images, targets)
        flat = z.reshape(-1, cfg.d)
        codes = vq.quantize(z.reshape(1, -1, cfg.d), model.codebook, cfg.beta).codes
        state.last_used[codes.unique()] = state.step
        dead = (state.step - state.last_used) > cfg.dead_code_interval
        if dead.any():
            gen = torch.Generator().manual_seed(state.step)
            pick = torch.randint(0, flat.shape[0], (int(dead.sum()),), generator=gen)
            model.codebook.entries.data[dead] = flat[pick]
            state.last_used[dead] = state.step
