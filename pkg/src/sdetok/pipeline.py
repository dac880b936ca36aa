"""End-to-end training orchestration shared by the CLI and the test suite."""

from __future__ import annotations

import torch
from torch import Tensor

from . import lm as lmmod
from . import tokenizer as tk
from .adversarial import PatchDiscriminator, PerceptualNet
from .data import ToyDataset
from .persistence import ExperimentConfig
from .semantic import build_provider


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def make_provider(config: ExperimentConfig):
    t = config.tokenizer
    grid = (t.image_size // t.f, t.image_size // t.f)
    return build_provider(
        config.provider.name,
        num_classes=config.provider.num_classes,
        d_sem=t.d_sem,
        grid=grid,
        seed=config.provider.seed,
        manifest_path=config.provider.manifest_path,
    )


def targets_for_batch(provider, images: Tensor, labels=None, image_ids=None) -> Tensor:
    """Stack per-image provider grids into an (N, h, w, d_sem) tensor."""
    outs = []
    for i in range(images.shape[0]):
        outs.append(provider.targets_for(
            images[i],
            image_id=None if image_ids is None else image_ids[i],
            label=None if labels is None else int(labels[i]),
        ).features)
    return torch.stack(outs)


def train_tokenizer(config: ExperimentConfig, ds: ToyDataset, *,
                    steps: int | None = None, use_semantics: bool = True,
                    log_every: int = 25, progress=None):
    """Train the tokenizer on an in-memory dataset.

    ``use_semantics=False`` gives the plain-VQ baseline: no fusion, no
    distillation term (w_sem forced to 0). Returns (model, disc,
    perceptual, provider, loss log).
    """
    opt_cfg = config.optimizer
    steps = opt_cfg.total_steps if steps is None else steps
    set_determinism(config.seed)

    tok_cfg = config.tokenizer
    if not use_semantics:
        import dataclasses
        tok_cfg = dataclasses.replace(tok_cfg, w_sem=0.0)
    model = tk.SDEModel(tok_cfg, seed=config.seed)
    disc = PatchDiscriminator()
    perceptual = PerceptualNet(seed=config.seed + 77)
    provider = make_provider(config)

    state = tk.TrainState.create(
        model, disc, peak_lr=opt_cfg.lr, warmup=opt_cfg.warmup,
        total_steps=steps, betas=(opt_cfg.beta1, opt_cfg.beta2))

    n = ds.images.shape[0]
    bs = min(opt_cfg.batch_size, n)
    order_gen = torch.Generator().manual_seed(config.seed + 1)
    order = torch.randperm(n, generator=order_gen)
    cursor = 0
    log = []
    for step in range(steps):
        if cursor + bs > n:
            order = torch.randperm(n, generator=order_gen)
            cursor = 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        images = ds.images[idx]
        if use_semantics:
            targets = targets_for_batch(provider, images,
                                        labels=ds.labels[idx],
                                        image_ids=[ds.image_ids[i] for i in idx])
            report = tk.train_step(model, disc, images, targets, perceptual, state)
        else:
            report = _baseline_step(model, disc, images, perceptual, state)
        if step % log_every == 0 or step == steps - 1:
            log.append({"step": step, **report.as_dict()})
            if progress is not None:
                progress(step, report)
    return model, disc, perceptual, provider, log


def _baseline_step(model, disc, images, perceptual, state):
    # plain-VQ baseline: no fusion, no distillation term
    cfg = model.config
    lr = tk.lr_at(state.step, state.peak_lr, state.warmup, state.total_steps)
    for g in state.opt.param_groups:
        g["lr"] = lr
    from . import vq
    z = model.encode_batch(images, None)
    result = vq.quantize(z.reshape(z.shape[0] * z.shape[1], z.shape[2], cfg.d),
                         model.codebook, cfg.beta)
    zq_st = vq.straight_through(z, result.quantized.reshape(z.shape))
    l_vq = vq.vq_loss(result)
    recon = model.decode_batch(zq_st)
    l_l2 = (images - recon).pow(2).mean()
    l_perc = perceptual(images.permute(0, 3, 1, 2), recon.permute(0, 3, 1, 2))
    gan_on = disc is not None and state.step >= cfg.disc_start
    from .adversarial import hinge_d_loss, hinge_g_loss
    if gan_on:
        l_gen = hinge_g_loss(disc, recon.permute(0, 3, 1, 2))
        lambda_g = cfg.lambda_g
    else:
        l_gen = images.new_zeros(())
        lambda_g = 0.0
    l_total = l_l2 + l_perc + lambda_g * l_gen + l_vq
    state.opt.zero_grad()
    l_total.backward()
    state.opt.step()
    if gan_on:
        for g in state.disc_opt.param_groups:
            g["lr"] = lr
        d_loss = hinge_d_loss(disc, images.permute(0, 3, 1, 2),
                              recon.detach().permute(0, 3, 1, 2))
        state.disc_opt.zero_grad()
        d_loss.backward()
        state.disc_opt.step()
    state.step += 1
    return tk.LossReport(
        l_sem=0.0, l_l2=float(l_l2.detach()), l_perceptual=float(l_perc.detach()),
        l_gen=float(l_gen.detach()), l_vq=float(l_vq.detach()),
        l_total=float(l_total.detach()), lambda_g=lambda_g)


def tokenize_dataset(model, provider, ds: ToyDataset, use_semantics: bool = True):
    """Code grids for every image; returns an (n, h, w) int tensor."""
    grids = []
    with torch.no_grad():
        for i in range(ds.images.shape[0]):
            target = provider.targets_for(
                ds.images[i], image_id=ds.image_ids[i],
                label=int(ds.labels[i])) if use_semantics else None
            grids.append(tk.tokenize(model, ds.images[i], target))
    return torch.stack(grids)


def build_corpus(ds: ToyDataset, code_grids: Tensor, layout: lmmod.VocabLayout,
                 seed: int = 0, kinds: str = "both") -> list[lmmod.SequenceSample]:
    """Understanding and/or generation samples for every image."""
    samples = []
    for i in range(code_grids.shape[0]):
        caption = lmmod.encode_text(ds.captions[i])
        codes = code_grids[i]
        if kinds in ("understanding", "both"):
            samples.append(lmmod.assemble_understanding(
                lmmod.encode_text("describe: "), codes, caption, layout))
        if kinds in ("generation", "both"):
            system = lmmod.encode_text(lmmod.sample_instruction(seed + i) + " ")
            samples.append(lmmod.assemble_generation(system, caption, codes, layout))
    return samples


def train_vlm(model: lmmod.ARModel, samples: list[lmmod.SequenceSample], *,
              steps: int, batch_size: int = 8, lr: float = 1e-4,
              betas=(0.9, 0.95), warmup: int = 20, seed: int = 0,
              log_every: int = 10):
    """AR training over a mixed corpus with target-only masking."""
    set_determinism(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=betas)
    gen = torch.Generator().manual_seed(seed)
    log = []
    n = len(samples)
    for step in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        batch = [samples[int(i)] for i in idx]
        ids, mask = lmmod.batch_tensors(batch, model.layout)
        for g in opt.param_groups:
            g["lr"] = tk.lr_at(step, lr, warmup, steps)
        loss = lmmod.lm_loss(model, ids, mask)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            kinds = {0: [], 1: []}
            for s in batch:
                kinds[s.kind].append(s)
            entry = {"step": step, "loss": float(loss.detach())}
            for k, name in ((0, "loss_understanding"), (1, "loss_generation")):
                if kinds[k]:
                    kids, kmask = lmmod.batch_tensors(kinds[k], model.layout)
                    with torch.no_grad():
                        entry[name] = float(lmmod.lm_loss(model, kids, kmask))
            log.append(entry)
    return log
