"""Frozen semantic-target providers and the precomputed-target file format.

A provider maps an image to a fixed feature grid that the tokenizer fuses
with its own features and distills against. Providers never receive
gradients; the file provider additionally allows dumping grids from any
external teacher and replaying them bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from .vq import ContractViolation, InvalidInput

TARGET_MAGIC = b"SDESEM01"


@dataclass
class SemanticTarget:
    features: Tensor   # (h, w, d_sem), finite, nonzero per-position norm
    source_id: str

    @property
    def d_sem(self) -> int:
        return self.features.shape[-1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.features.shape[0], self.features.shape[1]


def write_target_file(path: str | Path, features: Tensor) -> None:
    """Serialize one (h, w, d_sem) float grid: magic, u32-LE dims, f32-LE data."""
    features = features.detach().to(torch.float32).contiguous()
    if features.ndim != 3:
        raise ContractViolation("target grid must be (h, w, d_sem)")
    h, w, d = features.shape
    with open(path, "wb") as fh:
        fh.write(TARGET_MAGIC)
        fh.write(struct.pack("<III", h, w, d))
        fh.write(features.numpy().astype("<f4").tobytes())


def read_target_file(path: str | Path) -> Tensor:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != TARGET_MAGIC:
            raise InvalidInput(f"bad magic in {path}: {magic!r}")
        h, w, d = struct.unpack("<III", fh.read(12))
        payload = fh.read(4 * h * w * d)
        if len(payload) != 4 * h * w * d:
            raise InvalidInput(f"truncated target file {path}")
    import numpy as np

    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, d)
    return torch.from_numpy(arr.copy())


class FileTargetProvider:
    """Replays precomputed per-image grids listed in a JSON-lines manifest."""

    def __init__(self, manifest_path: str | Path):
        self.root = Path(manifest_path).parent
        self.paths: dict[str, Path] = {}
        with open(manifest_path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                p = Path(rec["target_path"])
                if not p.is_absolute():
                    p = self.root / p
                self.paths[rec["image_id"]] = p

    def targets_for(self, image: Tensor | None = None, *, image_id: str | None = None,
                    label: int | None = None) -> SemanticTarget:
        if image_id is None or image_id not in self.paths:
            raise InvalidInput(f"image_id {image_id!r} not in target manifest")
        return SemanticTarget(read_target_file(self.paths[image_id]), source_id="file")

    def parameter_fingerprint(self) -> bytes:
        return b"file-provider"


class ClassEmbeddingProvider:
    """Broadcasts a fixed, seeded, unit-norm label embedding over the grid.

    The semantic signal is exactly the class identity, which makes probe
    tests sharp: any tokenizer that absorbs the target can be linearly read
    out at 100%.
    """

    def __init__(self, num_classes: int, d_sem: int, grid: tuple[int, int], seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        table = torch.randn(num_classes, d_sem, generator=gen)
        self.table = table / table.norm(dim=1, keepdim=True)
        self.grid = grid
        self.d_sem = d_sem

    def targets_for(self, image: Tensor | None = None, *, image_id: str | None = None,
                    label: int | None = None) -> SemanticTarget:
        if label is None:
            raise InvalidInput("class-embedding provider needs a label")
        h, w = self.grid
        feat = self.table[label].expand(h, w, self.d_sem).contiguous()
        return SemanticTarget(feat, source_id="class-embedding")

    def parameter_fingerprint(self) -> bytes:
        return _fingerprint_tensors([self.table])


class FrozenConvTrunk(torch.nn.Module):
    """Small frozen conv stack; also reused as the perceptual feature net.

    Three stride-2 conv layers so the final map matches a downsample
    factor of 8. Weights are seeded and never trained by the tokenizer.
    """

    def __init__(self, widths: tuple[int, int, int] = (16, 32, 64), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for c_out in widths:
            conv = torch.nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (2.0 / (c_in * 16)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            c_in = c_out
        self.convs = torch.nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: Tensor) -> list[Tensor]:
        """Per-layer activations for an (N, 3, H, W) batch in [0, 1]."""
        feats = []
        h = x
        for conv in self.convs:
            h = torch.nn.functional.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats

    def forward(self, x: Tensor) -> Tensor:
        return self.features(x)[-1]


class FrozenNetProvider:
    """Targets from a small frozen conv net, optionally fit once on labels.

    ``fit`` runs a short supervised warm-up of the projection head so the
    features carry label information, then everything is frozen for good.
    """

    def __init__(self, d_sem: int, seed: int = 0):
        self.trunk = FrozenConvTrunk(seed=seed)
        gen = torch.Generator().manual_seed(seed + 1)
        w = torch.randn(d_sem, self.trunk.convs[-1].out_channels, generator=gen)
        self.proj = w * (1.0 / w.shape[1] ** 0.5)
        self.d_sem = d_sem

    def fit(self, images: Tensor, labels: Tensor, num_classes: int,
            steps: int = 200, lr: float = 1e-2, seed: int = 0) -> None:
        proj = torch.nn.Parameter(self.proj.clone())
        head = torch.nn.Linear(self.d_sem, num_classes)
        torch.manual_seed(seed)
        opt = torch.optim.Adam([proj, *head.parameters()], lr=lr)
        with torch.no_grad():
            trunk_feat = self.trunk(images.permute(0, 3, 1, 2)).mean(dim=(2, 3))
        for _ in range(steps):
            opt.zero_grad()
            logits = head(trunk_feat @ proj.t())
            loss = torch.nn.functional.cross_entropy(logits, labels)
            loss.backward()
            opt.step()
        self.proj = proj.detach().clone()

    def targets_for(self, image: Tensor, *, image_id: str | None = None,
                    label: int | None = None) -> SemanticTarget:
        if image.ndim != 3 or image.shape[-1] != 3:
            raise ContractViolation("image must be (H, W, 3)")
        with torch.no_grad():
            fmap = self.trunk(image.permute(2, 0, 1).unsqueeze(0))[0]   # (C, h, w)
            feat = torch.einsum("chw,dc->hwd", fmap, self.proj)
            # nonzero-norm guarantee for the cosine loss
            feat = feat + 1e-6
        return SemanticTarget(feat, source_id="frozen-net")

    def parameter_fingerprint(self) -> bytes:
        tensors = [p.detach() for p in self.trunk.parameters()] + [self.proj]
        return _fingerprint_tensors(tensors)


def _fingerprint_tensors(tensors) -> bytes:
    import hashlib

    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().to(torch.float32).contiguous().numpy().tobytes())
    return h.digest()


def build_provider(name: str, *, num_classes: int = 10, d_sem: int = 64,
                   grid: tuple[int, int] = (8, 8), seed: int = 0,
                   manifest_path: str | Path | None = None):
    if name == "file":
        if manifest_path is None:
            raise InvalidInput("file provider needs a manifest path")
        return FileTargetProvider(manifest_path)
    if name == "class-embedding":
        return ClassEmbeddingProvider(num_classes, d_sem, grid, seed=seed)
    if name == "frozen-net":
        return FrozenNetProvider(d_sem, seed=seed)
    raise InvalidInput(f"unknown provider {name!r}")
