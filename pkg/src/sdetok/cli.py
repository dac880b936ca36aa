"""Command-line entry points.

Every report path writes a JSON payload, a delimited (CSV) companion, and
matplotlib figures next to each other. Exit codes: 0 ok, 2 config error,
3 divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as datamod
from . import evalmetrics as em
from . import lm as lmmod
from . import pipeline, reports
from . import tokenizer as tk
from . import vq as vqmod
from .adversarial import PatchDiscriminator
from .persistence import (EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO, EXIT_OK,
                          ConfigError, ExperimentConfig, load_checkpoint,
                          save_checkpoint, write_json_report)
from .tokenizer import DivergenceError


def _load_config(path: str | None, seed_override: int | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg


def _load_dataset(manifest: str | None) -> datamod.ToyDataset:
    if manifest is None:
        raise ConfigError("no dataset manifest configured")
    records = datamod.read_manifest(manifest)
    return datamod.load_manifest_images(records)


def _restore_tokenizer(ckpt_path: str):
    ckpt = load_checkpoint(ckpt_path)
    cfg = ExperimentConfig.from_dict(ckpt["config"])
    model = tk.SDEModel(cfg.tokenizer, seed=cfg.seed)
    model.load_state_dict(ckpt["model_state"])
    model.eval()
    provider = pipeline.make_provider(cfg)
    pstate = ckpt.get("provider_state")
    if pstate and hasattr(provider, "proj"):
        provider.proj = pstate["proj"]
    return model, provider, cfg, ckpt


def _provider_state(provider) -> dict:
    if hasattr(provider, "proj"):
        return {"proj": provider.proj}
    return {}


# subcommands -------------------------------------------------------------


def cmd_make_toy_data(args) -> int:
    ds = datamod.make_toy_dataset(args.n, num_classes=args.classes,
                                  image_size=args.image_size, seed=args.seed)
    manifest = datamod.write_toy_dataset(ds, args.out)
    print(f"wrote {args.n} images, manifest at {manifest}")
    return EXIT_OK


def cmd_train_tokenizer(args) -> int:
    cfg = _load_config(args.config, args.seed)
    ds = _load_dataset(cfg.dataset_manifest)
    steps = args.steps or cfg.optimizer.total_steps

    def progress(step, report):
        print(f"step {step:6d}  l_total {report.l_total:.4f}  "
              f"l_l2 {report.l_l2:.4f}  l_sem {report.l_sem:.4f}")

    model, disc, _, provider, log = pipeline.train_tokenizer(
        cfg, ds, steps=steps, use_semantics=not args.no_semantics,
        progress=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "tokenizer.pt", step=steps, seed=cfg.seed, config=cfg,
                    model_state=model.state_dict(), disc_state=disc.state_dict(),
                    extra={"provider_state": _provider_state(provider)})
    write_json_report(out / "losses.json", {"log": log}, config=cfg, seed=cfg.seed)
    reports.write_csv(out / "losses.csv", log)
    reports.plot_loss_curves(log, out / "loss_curve.png")
    print(f"final l_total {log[-1]['l_total']:.4f} (initial {log[0]['l_total']:.4f})")
    return EXIT_OK


def cmd_tokenize(args) -> int:
    model, provider, cfg, _ = _restore_tokenizer(args.checkpoint)
    records = datamod.read_manifest(args.manifest)
    ds = datamod.load_manifest_images(records)
    grids = pipeline.tokenize_dataset(model, provider, ds)
    layout = lmmod.VocabLayout(256, cfg.tokenizer.K)
    samples = pipeline.build_corpus(ds, grids, layout, seed=cfg.seed,
                                    kinds=args.kinds)
    lmmod.write_cache(args.out_cache, samples)
    usage, perplexity = vqmod.codebook_stats(list(grids), cfg.tokenizer.K)
    print(f"wrote {len(samples)} samples to {args.out_cache}")
    print(f"codebook usage {usage:.4f}  perplexity {perplexity:.2f}")
    return EXIT_OK


def cmd_train_vlm(args) -> int:
    cfg = _load_config(args.config, args.seed)
    tok_ckpt = load_checkpoint(args.tokenizer_ckpt)
    K = ExperimentConfig.from_dict(tok_ckpt["config"]).tokenizer.K
    layout = lmmod.VocabLayout(256, K)
    samples = []
    for cache in args.caches:
        samples.extend(lmmod.read_cache(cache))
    if not samples:
        raise ConfigError("no training samples in caches")
    model = lmmod.extend_embeddings(layout, cfg.lm, seed=cfg.seed)
    steps = args.steps or cfg.optimizer.total_steps
    log = pipeline.train_vlm(model, samples, steps=steps,
                             batch_size=cfg.optimizer.batch_size,
                             lr=cfg.optimizer.lr,
                             betas=(cfg.optimizer.beta1, cfg.optimizer.beta2),
                             warmup=cfg.optimizer.warmup, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "vlm.pt", step=steps, seed=cfg.seed, config=cfg,
                    model_state=model.state_dict(),
                    extra={"layout": {"text_size": 256, "codebook_size": K}})
    write_json_report(out / "lm_losses.json", {"log": log}, config=cfg, seed=cfg.seed)
    reports.write_csv(out / "lm_losses.csv", log)
    reports.plot_lm_loss(log, out / "lm_loss_curve.png")
    print(f"final lm loss {log[-1]['loss']:.4f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    tok_model, _, tok_cfg, _ = _restore_tokenizer(args.tokenizer_ckpt)
    vlm_ckpt = load_checkpoint(args.vlm_ckpt)
    vcfg = ExperimentConfig.from_dict(vlm_ckpt["config"])
    lay = vlm_ckpt["layout"]
    layout = lmmod.VocabLayout(lay["text_size"], lay["codebook_size"])
    model = lmmod.ARModel(layout, vcfg.lm, seed=vcfg.seed)
    model.load_state_dict(vlm_ckpt["model_state"])
    model.eval()

    t = tok_cfg.tokenizer
    grid = t.image_size // t.f
    instruction = lmmod.sample_instruction(args.seed)
    prompt = lmmod.encode_text(instruction + " " + args.prompt)
    prompt_ids = [layout.bos] + prompt
    codes = lmmod.generate_image_tokens(
        model, prompt_ids, grid * grid, temperature=args.temperature,
        top_k=args.top_k, seed=args.seed)
    code_grid = torch.tensor(codes, dtype=torch.long).reshape(grid, grid)
    image = tk.reconstruct(tok_model, code_grid)

    from PIL import Image
    arr = (image.numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(args.out_image)
    tokens_path = Path(args.out_image).with_suffix(".tokens.json")
    with open(tokens_path, "w") as fh:
        json.dump({"prompt": args.prompt, "seed": args.seed, "codes": codes}, fh)
    print(f"generated {len(codes)} tokens -> {args.out_image}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    model, provider, cfg, _ = _restore_tokenizer(args.checkpoint)
    ds = _load_dataset(args.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recons = []
    rows = []
    from PIL import Image
    for i in range(ds.images.shape[0]):
        target = provider.targets_for(ds.images[i], image_id=ds.image_ids[i],
                                      label=int(ds.labels[i]))
        codes = tk.tokenize(model, ds.images[i], target)
        rec = tk.reconstruct(model, codes)
        recons.append(rec)
        arr = (rec.numpy() * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(out / f"{ds.image_ids[i]}_recon.png")
        rows.append({"image_id": ds.image_ids[i],
                     "psnr": em.psnr(ds.images[i], rec),
                     "ssim": em.ssim(ds.images[i], rec)})
    recons = torch.stack(recons)
    reports.write_csv(out / "reconstruction.csv", rows)
    reports.plot_reconstruction_grid(ds.images, recons, out / "recon_grid.png")
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    print(f"mean PSNR {mean_psnr:.2f} dB over {len(rows)} images")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, provider, cfg, _ = _restore_tokenizer(args.checkpoint)
    ds = _load_dataset(args.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    recons = []
    rows = []
    grids = []
    for i in range(ds.images.shape[0]):
        target = provider.targets_for(ds.images[i], image_id=ds.image_ids[i],
                                      label=int(ds.labels[i]))
        codes = tk.tokenize(model, ds.images[i], target)
        grids.append(codes)
        rec = tk.reconstruct(model, codes)
        recons.append(rec)
        rows.append({"image_id": ds.image_ids[i],
                     "psnr": em.psnr(ds.images[i], rec),
                     "ssim": em.ssim(ds.images[i], rec)})
    recons = torch.stack(recons)

    gen = torch.Generator().manual_seed(cfg.seed)
    baseline = torch.rand(ds.images.shape, generator=gen)
    baseline_psnr = float(np.mean([em.psnr(ds.images[i], baseline[i])
                                   for i in range(ds.images.shape[0])]))
    usage, perplexity = vqmod.codebook_stats(grids, cfg.tokenizer.K)

    trunk = provider.trunk if hasattr(provider, "trunk") else None
    from .semantic import FrozenConvTrunk
    extractor = trunk or FrozenConvTrunk(seed=cfg.seed + 77)
    with torch.no_grad():
        feats_real = extractor(ds.images.permute(0, 3, 1, 2)).mean(dim=(2, 3)).numpy()
        feats_recon = extractor(recons.permute(0, 3, 1, 2)).mean(dim=(2, 3)).numpy()
    # desk-scale rFID: internally comparable only, never against published
    # Inception-based numbers
    rfid_val = em.rfid(feats_real, feats_recon)

    metrics = {
        "psnr_mean": float(np.mean([r["psnr"] for r in rows])),
        "ssim_mean": float(np.mean([r["ssim"] for r in rows])),
        "psnr_random_baseline": baseline_psnr,
        "rfid_internal": rfid_val,
        "codebook_usage": usage,
        "codebook_perplexity": perplexity,
        "num_images": len(rows),
    }
    write_json_report(out / "metrics.json", metrics, config=cfg, seed=cfg.seed)
    reports.write_csv(out / "metrics.csv", rows)
    reports.plot_reconstruction_grid(ds.images, recons, out / "recon_grid.png")
    counts = np.bincount(torch.stack(grids).reshape(-1).numpy(),
                         minlength=cfg.tokenizer.K)
    reports.plot_code_usage(counts, out / "code_usage.png")
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_inspect_codes(args) -> int:
    model, provider, cfg, _ = _restore_tokenizer(args.checkpoint)
    ds = _load_dataset(args.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    targets = [provider.targets_for(ds.images[i], image_id=ds.image_ids[i],
                                    label=int(ds.labels[i]))
               for i in range(ds.images.shape[0])]
    index = em.group_codes(model, ds.images, targets, ds.image_ids)
    rows = [{"code": c, "count": len(locs)} for c, locs in sorted(index.items())]
    reports.write_csv(out / "code_index.csv", rows)

    by_id = {img_id: i for i, img_id in enumerate(ds.image_ids)}
    f = cfg.tokenizer.f
    top = sorted(index.items(), key=lambda kv: -len(kv[1]))[: args.top]
    for code, locs in top:
        patches = []
        for img_id, i, j in locs[:32]:
            img = ds.images[by_id[img_id]]
            patches.append(img[i * f:(i + 1) * f, j * f:(j + 1) * f].numpy())
        reports.plot_code_mosaic(patches, code, out / f"code_{code:05d}.png")
    print(f"indexed {sum(len(v) for v in index.values())} patches across "
          f"{len(index)} codes; mosaics for top {len(top)}")
    return EXIT_OK


# argument wiring ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdetok",
                                description="semantic VQ tokenizer + unified AR model")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("make-toy-data", help="generate the synthetic dataset")
    q.add_argument("--out", required=True)
    q.add_argument("--n", type=int, default=128)
    q.add_argument("--classes", type=int, default=10)
    q.add_argument("--image-size", type=int, default=64)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_make_toy_data)

    q = sub.add_parser("train-tokenizer", help="train the visual tokenizer")
    q.add_argument("--config", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=None)
    q.add_argument("--steps", type=int, default=None)
    q.add_argument("--no-semantics", action="store_true",
                   help="plain-VQ baseline: no fusion, no distillation")
    q.set_defaults(func=cmd_train_tokenizer)

    q = sub.add_parser("tokenize", help="tokenize a manifest into a corpus cache")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--manifest", required=True)
    q.add_argument("--out-cache", required=True)
    q.add_argument("--kinds", choices=["understanding", "generation", "both"],
                   default="both")
    q.set_defaults(func=cmd_tokenize)

    q = sub.add_parser("train-vlm", help="train the unified sequence model")
    q.add_argument("--config", required=True)
    q.add_argument("--tokenizer-ckpt", required=True)
    q.add_argument("--caches", nargs="+", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=None)
    q.add_argument("--steps", type=int, default=None)
    q.set_defaults(func=cmd_train_vlm)

    q = sub.add_parser("generate", help="text-to-image via constrained decoding")
    q.add_argument("--vlm-ckpt", required=True)
    q.add_argument("--tokenizer-ckpt", required=True)
    q.add_argument("--prompt", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--temperature", type=float, default=1.0)
    q.add_argument("--top-k", type=int, default=0)
    q.add_argument("--out-image", required=True)
    q.set_defaults(func=cmd_generate)

    q = sub.add_parser("reconstruct", help="round-trip images through the tokenizer")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--manifest", required=True)
    q.add_argument("--out-dir", required=True)
    q.set_defaults(func=cmd_reconstruct)

    q = sub.add_parser("evaluate", help="reconstruction metrics + codebook stats")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--manifest", required=True)
    q.add_argument("--out-dir", required=True)
    q.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("inspect-codes", help="per-code patch mosaics")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--manifest", required=True)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--top", type=int, default=16)
    q.set_defaults(func=cmd_inspect_codes)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
