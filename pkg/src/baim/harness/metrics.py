"""Fréchet distance between Gaussians fitted in a fixed random-projection feature space."""

from __future__ import annotations

import functools
from importlib import resources

import numpy as np

from ..errors import DimensionError, SampleCountError
from ..numcore import RngStream, psd_sqrt

FEATURE_DIM = 32
PROJECTION_SEED = 20240817
_SHIPPED = "frechet_projection_256x32.npy"


def make_projection(input_dim: int, feature_dim: int = FEATURE_DIM, seed: int = PROJECTION_SEED) -> np.ndarray:
    """Gaussian projection with unit expected column norm."""
    g = RngStream(seed).child("frechet-projection", input_dim, feature_dim)._gen
    return g.standard_normal((input_dim, feature_dim)) / np.sqrt(input_dim)


@functools.lru_cache(maxsize=None)
def projection_for(input_dim: int) -> np.ndarray:
    """The shipped 256x32 matrix for 16x16 images, else a seeded matrix of the same recipe."""
    if input_dim == 256:
        with resources.files("baim.data").joinpath(_SHIPPED).open("rb") as fh:
            P = np.load(fh)
    else:
        P = make_projection(input_dim)
    P.setflags(write=False)
    return P


def fit_gaussian(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    return f.mean(axis=0), np.atleast_2d(np.cov(f, rowvar=False))


def frechet_from_stats(mu1, cov1, mu2, cov2) -> float:
    """``|mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)``, clamped at 0."""
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (mu1.size, mu1.size):
        raise DimensionError("Gaussian statistics have inconsistent shapes")
    r1 = psd_sqrt((cov1 + cov1.T) / 2)
    mid = r1 @ cov2 @ r1
    cross = psd_sqrt((mid + mid.T) / 2)
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * np.trace(cross))
    return max(value, 0.0)


def frechet_features(images: np.ndarray, projection: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    P = projection_for(x.shape[1]) if projection is None else np.asarray(projection, dtype=np.float64)
    if P.shape[0] != x.shape[1]:
        raise DimensionError(f"projection expects {P.shape[0]} inputs, images have {x.shape[1]}")
    return x @ P


def frechet_proxy(real: np.ndarray, gen: np.ndarray, projection: np.ndarray | None = None) -> float:
    """Fréchet distance of two image sets after projecting to the fixed feature space."""
    real, gen = np.asarray(real), np.asarray(gen)
    if real.reshape(len(real), -1).shape[1] != gen.reshape(len(gen), -1).shape[1]:
        raise DimensionError("real and generated images differ in size")
    fr, fg = frechet_features(real, projection), frechet_features(gen, projection)
    d = fr.shape[1]
    if len(fr) < d + 1 or len(fg) < d + 1:
        raise SampleCountError(f"need at least {d + 1} images per set, got {len(fr)} and {len(fg)}")
    return frechet_from_stats(*fit_gaussian(fr), *fit_gaussian(fg))
