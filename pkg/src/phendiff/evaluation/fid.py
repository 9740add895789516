"""Fréchet distance between Gaussian fits of embedded image sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

SYMMETRY_TOL = 1e-9
NEGATIVE_EIG_TOL = 1e-8
COV_REGULARIZATION = 1e-6


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of length {mean.size}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=SYMMETRY_TOL):
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def fit(cls, samples: np.ndarray) -> "GaussianMoments":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] < 2:
            raise ValueError("need a 2-D array with at least two samples")
        return cls(samples.mean(axis=0), np.cov(samples, rowvar=False))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(0.5 * (m + m.T))
    if evals.min() < -NEGATIVE_EIG_TOL * max(1.0, abs(evals.max())):
        raise ValueError(f"matrix is not positive semi-definite (eigenvalue {evals.min():.3g})")
    evals = np.clip(evals, 0.0, None)
    return (evecs * np.sqrt(evals)) @ evecs.T


def frechet_distance(a: GaussianMoments, b: GaussianMoments, eps: float = COV_REGULARIZATION) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``.

    ``eps`` is added to both covariance diagonals before anything else.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    eye = np.eye(a.dim)
    sa = a.cov + eps * eye
    sb = b.cov + eps * eye
    root_a = _psd_sqrt(sa)
    cross = _psd_sqrt(root_a @ sb @ root_a)
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(cross))
    if value < 0:
        if value < -NEGATIVE_EIG_TOL * max(1.0, np.trace(sa) + np.trace(sb)):
            raise ArithmeticError(f"Fréchet distance came out negative ({value:.3g})")
        value = 0.0
    return value


class RandomProjectionEmbedder:
    """Fixed seeded linear embedding of downsampled images.

    Images are average-pooled to ``pool_size x pool_size``, each channel is
    standardized with fixed statistics (``fit`` estimates them from a
    reference set; defaults are mean 0, std 1), and the flattened result is
    multiplied by a Gaussian matrix with variance ``1 / input_dim``.
    """

    def __init__(self, dim: int = 64, seed: int = 0, pool_size: int = 8, channels: int = 3,
                 channel_mean=None, channel_std=None):
        self.dim = int(dim)
        self.seed = int(seed)
        self.pool_size = int(pool_size)
        self.channels = int(channels)
        in_dim = self.channels * self.pool_size**2
        rng = np.random.default_rng(self.seed)
        self.projection = rng.standard_normal((in_dim, self.dim)) / np.sqrt(in_dim)
        self.channel_mean = np.zeros(self.channels) if channel_mean is None else np.asarray(channel_mean, dtype=np.float64)
        self.channel_std = np.ones(self.channels) if channel_std is None else np.asarray(channel_std, dtype=np.float64)

    def _pool(self, images) -> np.ndarray:
        x = torch.as_tensor(images).detach().to(torch.float64)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected (N, {self.channels}, H, W) images, got {tuple(x.shape)}")
        return F.adaptive_avg_pool2d(x, self.pool_size).numpy()

    def fit(self, images) -> "RandomProjectionEmbedder":
        pooled = self._pool(images)
        self.channel_mean = pooled.mean(axis=(0, 2, 3))
        self.channel_std = pooled.std(axis=(0, 2, 3)) + 1e-8
        return self

    def __call__(self, images) -> np.ndarray:
        pooled = self._pool(images)
        z = (pooled - self.channel_mean[None, :, None, None]) / self.channel_std[None, :, None, None]
        return z.reshape(z.shape[0], -1) @ self.projection

    def state(self) -> dict:
        return {
            "dim": self.dim,
            "seed": self.seed,
            "pool_size": self.pool_size,
            "channel_mean": self.channel_mean.tolist(),
            "channel_std": self.channel_std.tolist(),
        }


def fid(real_images, gen_images, embedder=None) -> float:
    """Fréchet distance between embedded ``real_images`` and ``gen_images``."""
    embedder = embedder or RandomProjectionEmbedder()
    a = np.asarray(embedder(real_images), dtype=np.float64)
    b = np.asarray(embedder(gen_images), dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("embedder produced mismatched embedding dimensions")
    d = a.shape[1]
    for side, emb in (("real", a), ("generated", b)):
        if emb.shape[0] < d + 1:
            raise ValueError(f"{side} set has {emb.shape[0]} images; need at least {d + 1} for a {d}-dim embedding")
    return frechet_distance(GaussianMoments.fit(a), GaussianMoments.fit(b))
