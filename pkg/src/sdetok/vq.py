"""Codebook storage, nearest-entry quantization, and VQ losses.

The quantizer snaps each spatial feature vector onto its closest codebook
entry (squared euclidean, ties broken by lowest index) and reports the
codebook / commitment loss terms with mean reduction over positions and
dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


class ContractViolation(ValueError):
    """Caller broke a precondition (shape / dimension mismatch)."""


class InvalidInput(ValueError):
    """Input data is malformed (non-finite values, out-of-range codes)."""


def _check_finite(t: Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise InvalidInput(f"{name} contains non-finite values")


class Codebook(torch.nn.Module):
    """Learned discrete vocabulary: K entries of dimension d.

    Entries are trainable parameters updated only through the codebook term
    of the VQ loss. K and d are fixed at construction.
    """

    def __init__(self, num_entries: int, dim: int, *, generator: torch.Generator | None = None):
        super().__init__()
        if num_entries <= 0 or dim <= 0:
            raise ContractViolation("codebook sizes must be positive")
        # uniform in [-1/K, 1/K], the usual VQ embedding init
        bound = 1.0 / num_entries
        init = torch.empty(num_entries, dim)
        init.uniform_(-bound, bound, generator=generator)
        self.entries = torch.nn.Parameter(init)

    @property
    def num_entries(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def from_entries(cls, entries: Tensor) -> "Codebook":
        _check_finite(entries, "codebook entries")
        cb = cls.__new__(cls)
        torch.nn.Module.__init__(cb)
        cb.entries = torch.nn.Parameter(entries.clone())
        return cb


@dataclass
class QuantizationResult:
    """Output of nearest-entry quantization for one feature grid."""

    codes: Tensor          # (h, w) int64, values in [0, K)
    quantized: Tensor      # (h, w, d) codebook rows gathered by codes
    codebook_loss: Tensor  # mean ||sg[z] - z_q||^2
    commitment_loss: Tensor  # mean ||z - sg[z_q]||^2
    beta: float


def quantize(z: Tensor, codebook: Codebook, beta: float = 0.25) -> QuantizationResult:
    """Snap each (i, j) vector of ``z`` onto its closest codebook entry.

    ``z`` has shape (h, w, d). Ties in the nearest-entry search are broken
    by the lowest index (argmin does this for exact float equality). Losses
    use mean reduction over all positions and dimensions.
    """
    if z.ndim != 3:
        raise ContractViolation(f"expected (h, w, d) grid, got shape {tuple(z.shape)}")
    if z.shape[-1] != codebook.dim:
        raise ContractViolation(
            f"grid dim {z.shape[-1]} != codebook dim {codebook.dim}")
    if beta < 0:
        raise ContractViolation("beta must be >= 0")
    _check_finite(z, "feature grid")

    entries = codebook.entries
    flat = z.reshape(-1, z.shape[-1])
    # ||a - b||^2 expanded; argmin over entries per position
    d2 = (flat.pow(2).sum(1, keepdim=True)
          - 2.0 * flat @ entries.t()
          + entries.pow(2).sum(1).unsqueeze(0))
    codes = d2.argmin(dim=1)
    zq = entries[codes].reshape(z.shape)

    codebook_loss = (z.detach() - zq).pow(2).mean()
    commitment_loss = (z - zq.detach()).pow(2).mean()
    return QuantizationResult(
        codes=codes.reshape(z.shape[0], z.shape[1]),
        quantized=zq,
        codebook_loss=codebook_loss,
        commitment_loss=commitment_loss,
        beta=float(beta),
    )


def straight_through(z: Tensor, zq: Tensor) -> Tensor:
    """Forward value of ``zq`` with identity gradient onto ``z``."""
    if z.shape != zq.shape:
        raise ContractViolation(
            f"shape mismatch: {tuple(z.shape)} vs {tuple(zq.shape)}")
    # z - z.detach() is exactly zero, so the forward value is bitwise zq
    # while the backward pass sees the identity onto z
    return zq.detach() + (z - z.detach())


def vq_loss(result: QuantizationResult) -> Tensor:
    """Codebook term plus beta-weighted commitment term."""
    return result.codebook_loss + result.beta * result.commitment_loss


def codebook_stats(code_grids, num_entries: int) -> tuple[float, float]:
    """Usage fraction and perplexity of the empirical code histogram.

    ``code_grids`` is an iterable of integer tensors (any shape). Perplexity
    is exp of the natural-log entropy, in [1, K]; usage is the fraction of
    distinct codes observed.
    """
    counts = torch.zeros(num_entries, dtype=torch.float64)
    total = 0
    for grid in code_grids:
        grid = torch.as_tensor(grid).reshape(-1)
        if grid.numel() == 0:
            continue
        if grid.min() < 0 or grid.max() >= num_entries:
            raise InvalidInput("code value outside [0, K)")
        counts += torch.bincount(grid, minlength=num_entries).to(torch.float64)
        total += grid.numel()
    if total == 0:
        raise InvalidInput("empty code stream")
    probs = counts / total
    nz = probs[probs > 0]
    entropy = -(nz * nz.log()).sum()
    usage = float((counts > 0).sum().item()) / num_entries
    return usage, float(entropy.exp().item())
