"""Reconstruction metrics, semantic linear probe, and code grouping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .vq import ContractViolation


def psnr(x: Tensor, x_hat: Tensor) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf when identical."""
    if x.shape != x_hat.shape:
        raise ContractViolation("psnr needs equal shapes")
    mse = float((x.to(torch.float64) - x_hat.to(torch.float64)).pow(2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def ssim(x: Tensor, x_hat: Tensor, window: int = 8) -> float:
    """Mean local SSIM over non-overlapping windows on the channel-mean image.

    Standard constants on unit range: C1 = 0.01^2, C2 = 0.03^2.
    """
    if x.shape != x_hat.shape:
        raise ContractViolation("ssim needs equal shapes")
    a = x.to(torch.float64)
    b = x_hat.to(torch.float64)
    if a.ndim == 3:
        a = a.mean(-1)
        b = b.mean(-1)
    h, w = a.shape
    if h < window or w < window:
        raise ContractViolation(f"image smaller than {window}x{window} window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(0, h - window + 1, window):
        for j in range(0, w - window + 1, window):
            pa = a[i:i + window, j:j + window]
            pb = b[i:i + window, j:j + window]
            mu_a, mu_b = pa.mean(), pb.mean()
            var_a = pa.var(unbiased=False)
            var_b = pb.var(unbiased=False)
            cov = ((pa - mu_a) * (pb - mu_b)).mean()
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
            vals.append(float(num / den))
    return float(np.mean(vals))


def rfid(real_feats: np.ndarray, recon_feats: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    Features are (n, d) arrays from any frozen extractor. A tiny ridge is
    added when a covariance is singular.
    """
    from scipy import linalg

    if real_feats.shape[0] < 2 or recon_feats.shape[0] < 2:
        raise ContractViolation("need at least 2 images per set")
    mu1 = real_feats.mean(axis=0)
    mu2 = recon_feats.mean(axis=0)
    s1 = np.cov(real_feats, rowvar=False)
    s2 = np.cov(recon_feats, rowvar=False)
    s1 = np.atleast_2d(s1)
    s2 = np.atleast_2d(s2)
    diff = mu1 - mu2
    covmean, _ = linalg.sqrtm(s1 @ s2, disp=False)
    if not np.isfinite(covmean).all():
        eps = 1e-6 * np.eye(s1.shape[0])
        covmean, _ = linalg.sqrtm((s1 + eps) @ (s2 + eps), disp=False)
    covmean = np.real(covmean)
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(covmean))


@dataclass
class ProbeReport:
    accuracy_sde: float
    accuracy_baseline: float
    dataset_id: str
    num_classes: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def linear_probe_accuracy(features: np.ndarray, labels: np.ndarray,
                          train_frac: float = 0.7, seed: int = 0) -> float:
    """Held-out accuracy of one linear classifier on frozen features.

    The split is seeded and disjoint; sklearn's saga/lbfgs path would do,
    but liblinear keeps small problems deterministic.
    """
    from sklearn.linear_model import LogisticRegression

    n = features.shape[0]
    if len(np.unique(labels)) < 2:
        raise ContractViolation("degenerate single-class dataset")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    cut = int(round(train_frac * n))
    tr, te = order[:cut], order[cut:]
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(features[tr], labels[tr])
    return float(clf.score(features[te], labels[te]))


def mean_pooled_embeddings(model, images: Tensor, targets) -> np.ndarray:
    """(n, d) mean-pooled quantized embeddings for a probe dataset."""
    from . import tokenizer as tk
    from . import vq as vqmod

    feats = []
    with torch.no_grad():
        for i in range(images.shape[0]):
            t = targets[i] if targets is not None else None
            z = tk.encode_fused(model, images[i], t)
            res = vqmod.quantize(z, model.codebook, model.config.beta)
            feats.append(res.quantized.mean(dim=(0, 1)).numpy())
    return np.stack(feats)


def group_codes(model, images: Tensor, targets, image_ids=None) -> dict[int, list]:
    """Inverted index: code id -> [(image_id, i, j), ...] over all patches."""
    from . import tokenizer as tk

    index: dict[int, list] = {}
    for n in range(images.shape[0]):
        t = targets[n] if targets is not None else None
        codes = tk.tokenize(model, images[n], t)
        img_id = image_ids[n] if image_ids is not None else str(n)
        for i in range(codes.shape[0]):
            for j in range(codes.shape[1]):
                index.setdefault(int(codes[i, j]), []).append((img_id, i, j))
    return index
