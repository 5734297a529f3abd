"""Frechet distance and kernel MMD over pluggable image features."""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetError, list_images, read_image


class NumericalError(ArithmeticError):
    pass


def matrix_sqrt_psd(m: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues down to ``-tol * max|eigenvalue|`` are treated as rounding and
    clamped to zero; anything more negative raises NumericalError.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError("matrix has non-finite entries")
    sym = (m + m.T) / 2
    vals, vecs = np.linalg.eigh(sym)
    scale = max(np.abs(vals).max(initial=0.0), np.finfo(float).tiny)
    if vals.min(initial=0.0) < -tol * scale:
        raise NumericalError(f"matrix is indefinite (min eigenvalue {vals.min():.3g})")
    root = np.sqrt(np.clip(vals, 0.0, None))
    return (vecs * root) @ vecs.T


def _as_features(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"features must be (n, d), got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("features contain non-finite values")
    return a


def _frechet(mu_a, cov_a, mu_b, cov_b) -> float:
    root_a = matrix_sqrt_psd(cov_a)
    cross = matrix_sqrt_psd(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(cross))


def fid(a, b, ridge_scale: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature matrices.

    Covariances use the 1/(n-1) estimator. The trace of the cross term is taken
    as tr((S_a^1/2 S_b S_a^1/2)^1/2), which only needs symmetric square roots.
    If that fails numerically, a ridge of ``ridge_scale * tr(S)/d`` is added to
    both covariances and the computation retried once.
    """
    a, b = _as_features(a), _as_features(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two samples per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    try:
        value = _frechet(mu_a, cov_a, mu_b, cov_b)
    except NumericalError:
        d = a.shape[1]
        eye = np.eye(d)
        value = _frechet(
            mu_a, cov_a + ridge_scale * np.trace(cov_a) / d * eye,
            mu_b, cov_b + ridge_scale * np.trace(cov_b) / d * eye,
        )
    if not np.isfinite(value):
        raise NumericalError("Frechet distance is not finite")
    return max(value, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x, y) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel; may be negative."""
    x, y = _as_features(x), _as_features(y)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError("need at least two samples per set")
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    off_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    off_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(off_xx + off_yy - 2 * kxy.mean())


def kid(a, b, subset_size: int | None = None, n_subsets: int = 100,
        rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Mean and standard deviation of MMD^2 over random equal-size subsets."""
    a, b = _as_features(a), _as_features(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    limit = min(len(a), len(b))
    subset_size = min(100, limit) if subset_size is None else subset_size
    if not 2 <= subset_size <= limit:
        raise ValueError(f"subset_size must lie in [2, {limit}], got {subset_size}")
    if n_subsets < 1:
        raise ValueError("n_subsets must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    values = np.array([
        mmd2_unbiased(
            a[rng.choice(len(a), subset_size, replace=False)],
            b[rng.choice(len(b), subset_size, replace=False)],
        )
        for _ in range(n_subsets)
    ])
    return float(values.mean()), float(values.std())


# ---------------------------------------------------------------- features


class DeskExtractor:
    """Average-pooled pixels plus normalised per-channel value histograms.

    Output length is 3 * pool**2 + 3 * bins.
    """

    def __init__(self, pool: int = 4, bins: int = 8):
        self.pool = pool
        self.bins = bins

    @property
    def dim(self) -> int:
        return 3 * self.pool**2 + 3 * self.bins

    def __call__(self, image) -> np.ndarray:
        x = torch.as_tensor(np.asarray(image, dtype=np.float32))
        pooled = F.adaptive_avg_pool2d(x[None], self.pool).flatten().numpy()
        edges = np.linspace(-1.0, 1.0, self.bins + 1)
        hist = [np.histogram(np.clip(c, -1, 1), bins=edges)[0] / c.size for c in x.numpy()]
        return np.concatenate([pooled, *hist]).astype(np.float64)


class PooledPixels:
    """Average-pooled pixels only."""

    def __init__(self, pool: int = 8):
        self.pool = pool

    def __call__(self, image) -> np.ndarray:
        x = torch.as_tensor(np.asarray(image, dtype=np.float32))
        return F.adaptive_avg_pool2d(x[None], self.pool).flatten().numpy().astype(np.float64)


EXTRACTORS: dict[str, Callable] = {"desk": DeskExtractor(), "pixels": PooledPixels()}


def register_extractor(name: str, fn: Callable) -> None:
    EXTRACTORS[name] = fn


def extract_features(images: Iterable, extractor: Callable) -> np.ndarray:
    rows = []
    for i, image in enumerate(images):
        if torch.is_tensor(image):
            image = image.detach().cpu().numpy()
        v = np.asarray(extractor(image), dtype=np.float64).ravel()
        if rows and v.shape != rows[0].shape:
            raise ValueError(f"extractor returned length {v.size} for image {i}, expected {rows[0].size}")
        rows.append(v)
    if not rows:
        raise ValueError("no images given")
    return np.stack(rows)


def evaluate_dirs(real_dir, fake_dir, extractor_id: str = "desk", subset_size: int | None = None,
                  n_subsets: int = 100, seed: int = 0) -> dict:
    if extractor_id not in EXTRACTORS:
        raise KeyError(f"unknown extractor {extractor_id!r}; available: {sorted(EXTRACTORS)}")
    feats = []
    for d in (real_dir, fake_dir):
        paths = list_images(d)
        if not paths:
            raise DatasetError(f"{d} contains no images")
        feats.append(extract_features((read_image(p) for p in paths), EXTRACTORS[extractor_id]))
    real, fake = feats
    size = min(100, len(real), len(fake)) if subset_size is None else subset_size
    kid_mean, kid_std = kid(real, fake, size, n_subsets, np.random.default_rng(seed))
    return {
        "fid": fid(real, fake),
        "kid_mean": kid_mean,
        "kid_std": kid_std,
        "n_real": len(real),
        "n_fake": len(fake),
        "extractor_id": extractor_id,
        "kid_subset_size": size,
        "kid_n_subsets": n_subsets,
        "real_dir": str(Path(real_dir)),
        "fake_dir": str(Path(fake_dir)),
    }
