"""Unified token space over text, special, and visual ids, plus the
decoder-only transformer trained with target-only loss masking and the
constrained image-token sampler.

Text side is byte-level (N=256) so no external vocabulary is needed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import torch
from torch import Tensor

from .vq import ContractViolation, InvalidInput

CACHE_MAGIC = b"SDETOK01"
KIND_UNDERSTANDING = 0
KIND_GENERATION = 1

# First two strings appear verbatim in generation-instruction prompts in the
# wild; the rest round out the sampling pool.
GENERATION_INSTRUCTIONS = (
    "Please generate an image.",
    "Show me a photo.",
    "Draw a picture.",
    "Create an image for me.",
    "Render the following scene.",
    "Produce a matching picture.",
    "I want to see an image.",
    "Make an illustration.",
)


@dataclass(frozen=True)
class VocabLayout:
    """Bijection between (text ids, specials, visual codes) and LM ids."""

    text_size: int
    codebook_size: int

    @property
    def bos(self) -> int:
        return self.text_size

    @property
    def eos(self) -> int:
        return self.text_size + 1

    @property
    def pad(self) -> int:
        return self.text_size + 2

    @property
    def soi(self) -> int:
        return self.text_size + 3

    @property
    def eoi(self) -> int:
        return self.text_size + 4

    @property
    def visual_base(self) -> int:
        return self.text_size + 5

    @property
    def total(self) -> int:
        return self.text_size + 5 + self.codebook_size

    def visual_id(self, code: int) -> int:
        if not 0 <= code < self.codebook_size:
            raise InvalidInput(f"code {code} outside [0, {self.codebook_size})")
        return self.visual_base + code

    def code_of(self, token_id: int) -> int:
        if not self.visual_base <= token_id < self.total:
            raise InvalidInput(f"token {token_id} is not a visual id")
        return token_id - self.visual_base


@dataclass
class SequenceSample:
    ids: list[int]
    loss_mask: list[bool]
    kind: int    # KIND_UNDERSTANDING or KIND_GENERATION

    def __post_init__(self):
        if len(self.ids) != len(self.loss_mask):
            raise ContractViolation("ids and loss_mask lengths differ")


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_text(ids) -> str:
    return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


def _flatten_codes(codes, layout: VocabLayout) -> list[int]:
    flat = torch.as_tensor(codes).reshape(-1).tolist()
    return [layout.visual_id(int(c)) for c in flat]


def assemble_understanding(text_ids, codes, response_ids,
                           layout: VocabLayout) -> SequenceSample:
    """[bos] text [soi] visual [eoi] response [eos]; loss on response + eos."""
    vis = _flatten_codes(codes, layout)
    for t in list(text_ids) + list(response_ids):
        if not 0 <= t < layout.text_size:
            raise InvalidInput(f"text id {t} outside [0, {layout.text_size})")
    ids = ([layout.bos] + list(text_ids) + [layout.soi] + vis + [layout.eoi]
           + list(response_ids) + [layout.eos])
    mask = [False] * (2 + len(text_ids) + len(vis) + 1) \
        + [True] * (len(response_ids) + 1)
    return SequenceSample(ids, mask, KIND_UNDERSTANDING)


def assemble_generation(system_ids, caption_ids, codes,
                        layout: VocabLayout) -> SequenceSample:
    """[bos] system caption [soi] visual [eoi] [eos]; loss on soi..eos."""
    vis = _flatten_codes(codes, layout)
    for t in list(system_ids) + list(caption_ids):
        if not 0 <= t < layout.text_size:
            raise InvalidInput(f"text id {t} outside [0, {layout.text_size})")
    ids = ([layout.bos] + list(system_ids) + list(caption_ids)
           + [layout.soi] + vis + [layout.eoi, layout.eos])
    mask = [False] * (1 + len(system_ids) + len(caption_ids)) \
        + [True] * (len(vis) + 3)
    return SequenceSample(ids, mask, KIND_GENERATION)


def sample_instruction(seed: int, pool=GENERATION_INSTRUCTIONS) -> str:
    gen = torch.Generator().manual_seed(seed)
    idx = int(torch.randint(0, len(pool), (1,), generator=gen).item())
    return pool[idx]


def validate_sample(sample: SequenceSample, layout: VocabLayout,
                    grid_len: int) -> None:
    """Reject malformed sequences: unbalanced framing, wrong span length,
    out-of-range ids, loss mask on padding."""
    ids = sample.ids
    if any(not 0 <= t < layout.total for t in ids):
        raise InvalidInput("token id outside the vocabulary")
    spans = []
    open_at = None
    for pos, t in enumerate(ids):
        if t == layout.soi:
            if open_at is not None:
                raise InvalidInput("nested soi")
            open_at = pos
        elif t == layout.eoi:
            if open_at is None:
                raise InvalidInput("eoi without soi")
            spans.append((open_at, pos))
            open_at = None
        elif layout.visual_base <= t < layout.total and open_at is None:
            raise InvalidInput("visual id outside soi/eoi framing")
    if open_at is not None:
        raise InvalidInput("soi without matching eoi")
    for a, b in spans:
        inner = ids[a + 1: b]
        if len(inner) != grid_len:
            raise InvalidInput(f"visual span of length {len(inner)}, expected {grid_len}")
        if any(not layout.visual_base <= t < layout.total for t in inner):
            raise InvalidInput("non-visual id inside soi/eoi span")
    for t, m in zip(ids, sample.loss_mask):
        if m and t == layout.pad:
            raise InvalidInput("loss mask set on padding")


# AR model ----------------------------------------------------------------


@dataclass
class ARConfig:
    layers: int = 4
    width: int = 256
    heads: int = 4
    context: int = 1024


class ARModel(torch.nn.Module):
    """Decoder-only transformer over the unified vocabulary."""

    def __init__(self, layout: VocabLayout, config: ARConfig = ARConfig(),
                 seed: int = 0):
        super().__init__()
        self.layout = layout
        self.config = config
        torch.manual_seed(seed)
        self.embed = torch.nn.Embedding(layout.total, config.width)
        torch.nn.init.normal_(self.embed.weight, std=0.02)
        self.pos = torch.nn.Parameter(torch.zeros(config.context, config.width))
        torch.nn.init.normal_(self.pos, std=0.02)
        layer = torch.nn.TransformerEncoderLayer(
            d_model=config.width, nhead=config.heads,
            dim_feedforward=4 * config.width, dropout=0.0,
            batch_first=True, norm_first=True)
        self.blocks = torch.nn.TransformerEncoder(layer, num_layers=config.layers,
                                                  enable_nested_tensor=False)
        self.norm = torch.nn.LayerNorm(config.width)
        self.head = torch.nn.Linear(config.width, layout.total, bias=False)
        torch.nn.init.normal_(self.head.weight, std=0.02)

    def forward(self, ids: Tensor) -> Tensor:
        """(N, L) int64 -> (N, L, total) logits with causal attention."""
        n, L = ids.shape
        if L > self.config.context:
            raise ContractViolation(f"sequence length {L} exceeds context")
        x = self.embed(ids) + self.pos[:L]
        mask = torch.nn.Transformer.generate_square_subsequent_mask(L)
        h = self.blocks(x, mask=mask, is_causal=True)
        return self.head(self.norm(h))


def extend_embeddings(layout: VocabLayout, config: ARConfig = ARConfig(),
                      base_embed: Tensor | None = None, seed: int = 0,
                      zero_init_new_head_rows: bool = True) -> ARModel:
    """Build an ARModel whose first text rows may come from a base model.

    New embedding rows are N(0, 0.02^2), seeded. New output-head rows are
    zero-initialized by default so a text-only prompt scores text ids
    identically before and after extension.
    """
    model = ARModel(layout, config, seed=seed)
    with torch.no_grad():
        if base_embed is not None:
            n = layout.text_size
            if base_embed.shape != (n, config.width):
                raise ContractViolation("base embedding shape mismatch")
            model.embed.weight[:n] = base_embed
        if zero_init_new_head_rows:
            model.head.weight[layout.text_size:] = 0.0
    return model


def batch_tensors(samples: list[SequenceSample], layout: VocabLayout,
                  device=None) -> tuple[Tensor, Tensor]:
    """Right-pad a batch; the mask is False on padding by construction."""
    L = max(len(s.ids) for s in samples)
    ids = torch.full((len(samples), L), layout.pad, dtype=torch.long, device=device)
    mask = torch.zeros((len(samples), L), dtype=torch.bool, device=device)
    for i, s in enumerate(samples):
        ids[i, : len(s.ids)] = torch.tensor(s.ids, dtype=torch.long)
        mask[i, : len(s.ids)] = torch.tensor(s.loss_mask, dtype=torch.bool)
    return ids, mask


def lm_loss(model: ARModel, ids: Tensor, mask: Tensor) -> Tensor:
    """Mean next-token cross-entropy over positions whose target is masked.

    Position t contributes when mask[t+1] is True: the model predicts
    ids[t+1] from the prefix ids[..t].
    """
    if not mask[:, 1:].any():
        raise InvalidInput("loss mask selects no target positions")
    logits = model(ids[:, :-1])
    targets = ids[:, 1:]
    tmask = mask[:, 1:]
    losses = torch.nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
        reduction="none")
    return losses[tmask.reshape(-1)].mean()


def generate_image_tokens(model: ARModel, prompt_ids: list[int],
                          grid_len: int, *, temperature: float = 1.0,
                          top_k: int = 0, seed: int = 0) -> list[int]:
    """Sample exactly ``grid_len`` visual codes, logit-masked to the visual
    id range, framed by forced soi/eoi. Returns raw codes in [0, K)."""
    if grid_len <= 0:
        raise InvalidInput("grid_len must be positive")
    layout = model.layout
    ids = list(prompt_ids)
    if not ids or ids[-1] != layout.soi:
        ids.append(layout.soi)
    gen = torch.Generator().manual_seed(seed)
    codes = []
    with torch.no_grad():
        for _ in range(grid_len):
            logits = model(torch.tensor([ids], dtype=torch.long))[0, -1]
            vis = logits[layout.visual_base: layout.visual_base + layout.codebook_size]
            if temperature <= 0:
                pick = int(vis.argmax().item())
            else:
                vis = vis / temperature
                if top_k > 0 and top_k < vis.shape[0]:
                    kth = vis.topk(top_k).values[-1]
                    vis = vis.masked_fill(vis < kth, float("-inf"))
                probs = torch.softmax(vis, dim=-1)
                pick = int(torch.multinomial(probs, 1, generator=gen).item())
            codes.append(pick)
            ids.append(layout.visual_base + pick)
    ids.append(layout.eoi)
    return codes


# corpus cache ------------------------------------------------------------


def _pack_mask(mask: list[bool]) -> bytes:
    out = bytearray((len(mask) + 7) // 8)
    for i, bit in enumerate(mask):
        if bit:
            out[i // 8] |= 1 << (i % 8)
    return bytes(out)


def _unpack_mask(data: bytes, length: int) -> list[bool]:
    return [bool(data[i // 8] >> (i % 8) & 1) for i in range(length)]


def write_cache(path, samples: list[SequenceSample]) -> None:
    """SDETOK01 cache: magic, u32 count, then (kind, length, ids, packed mask)."""
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", len(samples)))
        for s in samples:
            fh.write(struct.pack("<II", s.kind, len(s.ids)))
            fh.write(struct.pack(f"<{len(s.ids)}I", *s.ids))
            fh.write(_pack_mask(s.loss_mask))


def read_cache(path) -> list[SequenceSample]:
    with open(path, "rb") as fh:
        if fh.read(8) != CACHE_MAGIC:
            raise InvalidInput(f"bad cache magic in {path}")
        (count,) = struct.unpack("<I", fh.read(4))
        samples = []
        for _ in range(count):
            kind, length = struct.unpack("<II", fh.read(8))
            ids = list(struct.unpack(f"<{length}I", fh.read(4 * length)))
            mask = _unpack_mask(fh.read((length + 7) // 8), length)
            samples.append(SequenceSample(ids, mask, kind))
    return samples
