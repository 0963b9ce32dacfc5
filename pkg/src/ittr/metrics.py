"""Fréchet distance between feature distributions, with pluggable extractors.

The distance is ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^0.5). The
matrix square root uses an eigendecomposition of the symmetrized product
S_a^0.5 S_b S_a^0.5 with negative eigenvalues clamped to zero, so the result
stays real and non-negative for near-singular inputs.

Feature extractors here are deterministic, model-free stand-ins (random
projection of downsampled pixels); they make the metric a reproducible
desk-scale proxy rather than a comparable benchmark number.
"""

from dataclasses import dataclass

import numpy as np

from .serialization import load_tensors, save_tensors

_EIG_TOL = 1e-8


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.mean.ndim != 1 or self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError(
                f"bad stats shapes: mean {self.mean.shape}, cov {self.cov.shape}")
        if self.count < 2:
            raise ValueError(f"need at least 2 samples, got {self.count}")
        if not (np.isfinite(self.mean).all() and np.isfinite(self.cov).all()):
            raise ValueError("non-finite feature statistics")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise ValueError("covariance is not symmetric")
        eigvals = np.linalg.eigvalsh(self.cov)
        if eigvals.min() < -_EIG_TOL:
            raise ValueError(f"covariance not PSD (min eigenvalue {eigvals.min():.3e})")


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    if a.mean.size != b.mean.size:
        raise ValueError(f"dimension mismatch: {a.mean.size} vs {b.mean.size}")
    delta = a.mean - b.mean
    a_half = _psd_sqrt(a.cov)
    inner = a_half @ b.cov @ a_half
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    dist = float(delta @ delta + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(dist, 0.0)


def collect_stats(images, extractor=None) -> FeatureStats:
    """Mean and unbiased covariance of extracted features.

    ``images`` is an array [B, 3, H, W] (or pre-extracted features [B, d]
    when no extractor is given). Deterministic given the extractor seed.
    """
    arr = np.asarray(images, dtype=np.float64)
    feats = extractor(arr) if extractor is not None else arr
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"expected [n, d] features, got {feats.shape}")
    n = feats.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    mean = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False, ddof=1)
    return FeatureStats(mean=mean, cov=np.atleast_2d(cov), count=n)


def _downsample(images, side):
    """Deterministic reduction of [B, 3, H, W] to [B, 3, side, side]."""
    b, c, h, w = images.shape
    if h % side == 0 and w % side == 0:
        fh, fw = h // side, w // side
        return images.reshape(b, c, side, fh, side, fw).mean(axis=(3, 5))
    yi = np.linspace(0, h - 1, side).round().astype(int)
    xi = np.linspace(0, w - 1, side).round().astype(int)
    return images[:, :, yi][:, :, :, xi]


class RandomProjectionExtractor:
    """Fixed-seed Gaussian projection of downsampled pixels to ``dim``."""

    def __init__(self, seed=0, dim=64, side=16):
        self.seed = seed
        self.dim = dim
        self.side = side
        flat = 3 * side * side
        rng = np.random.default_rng(seed)
        self.matrix = rng.standard_normal((flat, dim)) / np.sqrt(flat)

    def __call__(self, images):
        small = _downsample(np.asarray(images, dtype=np.float64), self.side)
        return small.reshape(small.shape[0], -1) @ self.matrix


class DownsampleFlattenExtractor:
    """Downsampled pixels flattened and truncated to the first ``dim``."""

    def __init__(self, dim=64, side=16):
        if dim > 3 * side * side:
            raise ValueError(f"dim={dim} exceeds {3 * side * side} pixels")
        self.dim = dim
        self.side = side

    def __call__(self, images):
        small = _downsample(np.asarray(images, dtype=np.float64), self.side)
        return small.reshape(small.shape[0], -1)[:, :self.dim]


def save_stats(path, stats: FeatureStats):
    save_tensors(path, {"mean": stats.mean, "cov": stats.cov,
                        "count": np.array([float(stats.count)])},
                 dtype=np.float64)


def load_stats(path) -> FeatureStats:
    data = load_tensors(path, dtype=np.float64)
    return FeatureStats(mean=data["mean"], cov=data["cov"],
                        count=int(data["count"][0]))
