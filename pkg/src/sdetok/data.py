"""Toy dataset generation and manifest-based image ingestion.

Toy images pair a strong per-image nuisance (a random color gradient) with
a weak class cue (a low-contrast class glyph at a random spot). Pixel
statistics alone say little about the label, which is what makes the
semantic-vs-plain tokenizer comparison sharp.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .vq import InvalidInput

CLASS_NAMES = ("apple", "boat", "cat", "drum", "eagle",
               "fern", "globe", "harp", "igloo", "jug")


@dataclass
class ToyDataset:
    images: Tensor          # (n, H, W, 3) in [0, 1]
    labels: Tensor          # (n,) int64
    captions: list[str]
    image_ids: list[str]


def _class_glyphs(num_classes: int, rng: np.random.Generator) -> np.ndarray:
    return (rng.random((num_classes, 8, 8)) > 0.5).astype(np.float32)


def make_toy_dataset(n: int, num_classes: int = 10, image_size: int = 64,
                     seed: int = 0, glyph_amplitude: float = 0.18) -> ToyDataset:
    rng = np.random.default_rng(seed)
    glyphs = _class_glyphs(num_classes, np.random.default_rng(seed + 1))
    H = image_size
    imgs = np.empty((n, H, H, 3), dtype=np.float32)
    labels = rng.integers(0, num_classes, size=n)
    yy, xx = np.mgrid[0:H, 0:H].astype(np.float32) / (H - 1)
    for i in range(n):
        c0 = rng.random(3) * 0.7 + 0.15
        c1 = rng.random(3) * 0.7 + 0.15
        angle = rng.random() * 2 * np.pi
        t = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 2.0
        img = c0[None, None] * (1 - t[..., None]) + c1[None, None] * t[..., None]
        g = np.kron(glyphs[labels[i]], np.ones((2, 2), dtype=np.float32))  # 16x16
        sign = np.where(g > 0, 1.0, -1.0) * glyph_amplitude
        gy = rng.integers(0, H - 16)
        gx = rng.integers(0, H - 16)
        img[gy:gy + 16, gx:gx + 16] += sign[..., None]
        imgs[i] = np.clip(img, 0.0, 1.0)
    names = [CLASS_NAMES[l % len(CLASS_NAMES)] for l in labels]
    captions = [f"a picture of a {name}" for name in names]
    ids = [f"toy-{i:05d}" for i in range(n)]
    return ToyDataset(torch.from_numpy(imgs), torch.from_numpy(labels.astype(np.int64)),
                      captions, ids)


def write_toy_dataset(ds: ToyDataset, out_dir: str | Path) -> Path:
    """Dump PNGs plus a JSON-lines manifest; returns the manifest path."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i in range(ds.images.shape[0]):
            arr = (ds.images[i].numpy() * 255.0).round().astype(np.uint8)
            rel = f"images/{ds.image_ids[i]}.png"
            Image.fromarray(arr).save(out / rel)
            fh.write(json.dumps({
                "image_id": ds.image_ids[i],
                "image_path": rel,
                "caption": ds.captions[i],
                "label": int(ds.labels[i]),
            }) + "\n")
    return manifest


@dataclass
class ManifestRecord:
    image_id: str
    image_path: Path
    caption: str | None
    label: int | None
    target_path: Path | None


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    root = Path(path).parent
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            img = Path(rec["image_path"])
            if not img.is_absolute():
                img = root / img
            if not img.exists():
                raise InvalidInput(f"missing image file {img}")
            tp = rec.get("target_path")
            if tp is not None:
                tp = Path(tp)
                if not tp.is_absolute():
                    tp = root / tp
            records.append(ManifestRecord(
                image_id=rec.get("image_id", img.stem),
                image_path=img,
                caption=rec.get("caption"),
                label=rec.get("label"),
                target_path=tp,
            ))
    return records


def load_image(path: str | Path) -> Tensor:
    """PNG (or anything PIL reads) to an (H, W, 3) float tensor in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def load_manifest_images(records: list[ManifestRecord]) -> ToyDataset:
    imgs = torch.stack([load_image(r.image_path) for r in records])
    labels = torch.tensor([r.label if r.label is not None else -1 for r in records])
    captions = [r.caption or "" for r in records]
    return ToyDataset(imgs, labels, captions, [r.image_id for r in records])
