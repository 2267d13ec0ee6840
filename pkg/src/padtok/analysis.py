"""Reconstruction metrics, feature-space Frechet distance, token contribution and PCA maps."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import RangeError, ShapeError
from .tokenizer import FlexTokenizer


class RankError(RangeError):
    pass


# --- reconstruction metrics ---------------------------------------------------

def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0) -> float:
    """Mean SSIM over images and channels with an 11x11 Gaussian window (sigma 1.5), valid region only."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim == 3:
        x, y = x[None], y[None]
    b, c, h, w = x.shape
    x = x.double().reshape(b * c, 1, h, w)
    y = y.double().reshape(b * c, 1, h, w)
    win = _gaussian_window()[None, None]
    if h < win.shape[-1] or w < win.shape[-1]:
        raise ShapeError("images smaller than the 11x11 SSIM window")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_x, mu_y = F.conv2d(x, win), F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mu_x**2
    syy = F.conv2d(y * y, win) - mu_y**2
    sxy = F.conv2d(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def recon_metrics(x: torch.Tensor, x_hat: torch.Tensor) -> dict:
    """PSNR (dB, +inf for identical inputs), SSIM and MSE for images in [0, 1]."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse = float((x.double() - x_hat.double()).pow(2).mean())
    psnr = math.inf if mse == 0 else 10 * math.log10(1.0 / mse)
    return {"psnr": psnr, "ssim": 1.0 if mse == 0 else ssim(x, x_hat), "mse": mse}


# --- feature Frechet distance -------------------------------------------------

@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_features(cls, feats) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2:
            raise ShapeError("features must be (samples, dim)")
        if feats.shape[0] < feats.shape[1] + 1:
            raise RankError(f"need at least {feats.shape[1] + 1} samples, got {feats.shape[0]}")
        cov = np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])
        return cls(feats.mean(0), (cov + cov.T) / 2)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def feature_fid(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^1/2), clamped at zero.

    The trace of the product root is taken from the eigenvalues of the
    symmetric matrix S_a^1/2 S_b S_a^1/2, which shares its spectrum with S_a S_b.
    """
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"dimension mismatch {a.mean.shape} vs {b.mean.shape}")
    root_a = _sqrt_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    tr_root = np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0, None)).sum()
    diff = a.mean - b.mean
    return max(0.0, float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_root))


@torch.no_grad()
def teacher_embedding(teacher, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Per-image feature vectors: teacher grid features averaged over positions."""
    out = [teacher(images[i:i + batch_size]).mean(1) for i in range(0, len(images), batch_size)]
    return torch.cat(out).double().numpy()


# --- token contribution -------------------------------------------------------

@dataclass
class ContributionProfile:
    mean_l1: np.ndarray
    weights: np.ndarray
    entropy: float

    @classmethod
    def from_distances(cls, mean_l1) -> "ContributionProfile":
        d = np.asarray(mean_l1, dtype=np.float64)
        z = np.exp(d - d.max())
        p = z / z.sum()
        entropy = float(-(p[p > 0] * np.log(p[p > 0])).sum())
        return cls(d, p, entropy)

    def head_mass(self, count: int) -> float:
        return float(self.weights[:count].sum())

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("position,mean_l1,softmax_weight\n")
            for i, (d, w) in enumerate(zip(self.mean_l1, self.weights), start=1):
                f.write(f"{i},{d:.9g},{w:.9g}\n")


@torch.no_grad()
def token_contribution(model: FlexTokenizer, images: torch.Tensor, rng: torch.Generator,
                       trials: int = 1, length: int | None = None, positions: int | None = None,
                       batch_size: int = 256) -> ContributionProfile:
    """Mean-pixel L1 change of the reconstruction when one code is swapped for a uniformly random one.

    ``length`` is the decoded prefix (default N); ``positions`` the number of
    leading positions profiled (default N).
    """
    model.eval()
    n = model.num_tokens
    length = n if length is None else length
    positions = n if positions is None else positions
    k_codes = model.quantizer.codebook_size
    totals = np.zeros(positions)
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        codes = model.tokenize(x)[:, :max(n, positions)]
        base = model.decode_codes(codes[:, :length])
        for pos in range(positions):
            for _ in range(trials):
                perturbed = codes.clone()
                perturbed[:, pos] = torch.randint(k_codes, (len(x),), generator=rng)
                x2 = model.decode_codes(perturbed[:, :length])
                totals[pos] += float((x2 - base).abs().mean(dim=(1, 2, 3)).sum())
    return ContributionProfile.from_distances(totals / (len(images) * trials))


def profile_from_decoder(decode, codes: torch.Tensor, codebook_size: int, rng: torch.Generator,
                         trials: int = 1) -> ContributionProfile:
    """Same measurement for an arbitrary ``decode(codes) -> images`` callable."""
    base = decode(codes)
    totals = np.zeros(codes.shape[1])
    for pos in range(codes.shape[1]):
        for _ in range(trials):
            perturbed = codes.clone()
            perturbed[:, pos] = torch.randint(codebook_size, (len(codes),), generator=rng)
            totals[pos] += float((decode(perturbed) - base).abs().mean(dim=tuple(range(1, base.ndim))).sum())
    return ContributionProfile.from_distances(totals / (len(codes) * trials))


# --- PCA ----------------------------------------------------------------------

@dataclass
class PCA:
    mean: np.ndarray
    components: np.ndarray  # (n_components, dim), orthonormal rows
    explained_variance_ratio: np.ndarray

    @classmethod
    def fit(cls, feats, n_components: int = 3) -> "PCA":
        x = np.asarray(feats, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < n_components:
            raise RankError(f"PCA with {n_components} components needs >= {n_components} samples")
        mean = x.mean(0)
        _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
        var = s**2
        total = var.sum()
        ratio = var[:n_components] / total if total > 0 else np.zeros(n_components)
        return cls(mean, vt[:n_components], ratio)

    def transform(self, feats) -> np.ndarray:
        return (np.asarray(feats, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, proj) -> np.ndarray:
        return proj @ self.components + self.mean


@torch.no_grad()
def pca_visualize(model: FlexTokenizer, images: torch.Tensor, lengths, layer: int = 1) -> dict:
    """RGB maps (B, s, s, 3) in [0, 1] per retained length from a PCA fit on all pooled features."""
    model.eval()
    codes = model.tokenize(images)
    feats = {}
    for k in lengths:
        emb = model.quantizer.lookup(codes[:, :k])
        feats[k] = model.decoder_features(model.build_decoder_input(emb, k), layer).double().numpy()
    pooled = np.concatenate([f.reshape(-1, f.shape[-1]) for f in feats.values()])
    pca = PCA.fit(pooled, 3)
    proj = {k: pca.transform(f.reshape(-1, f.shape[-1])) for k, f in feats.items()}
    allp = np.concatenate(list(proj.values()))
    lo, hi = allp.min(0), allp.max(0)
    span = np.where(hi > lo, hi - lo, 1.0)
    s = model.grid_side
    return {k: ((p - lo) / span).reshape(len(images), s, s, 3) for k, p in proj.items()}
