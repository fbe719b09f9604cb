"""Evaluation math: embedding cosine similarities and MSCN / NIQE features.

Embedding vectors come from a backend or from files; only the similarity
arithmetic lives here.  The no-reference quality side is the native
feature front-end (MSCN coefficients, paired products, Gaussian model
fitting) plus the Mahalanobis-style distance between Gaussian models.
Trained quality predictors (SVR, transformer scorers) are out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .image import ImageBuffer, gaussian_kernel

__all__ = [
    "EMBEDDING_SOURCES",
    "EmbeddingVector",
    "NiqeModel",
    "cosine_similarity",
    "fit_gaussian_model",
    "mscn",
    "mscn_features",
    "niqe_distance",
    "subject_similarity",
]

EMBEDDING_SOURCES = ("dino", "clip_image", "clip_text")

# MSCN local window: 7x7 Gaussian, sigma = 7/6, stabilizer 1/255 on [0,1]
_MSCN_WINDOW = 7
_MSCN_SIGMA = 7.0 / 6.0
_MSCN_C = 1.0 / 255.0


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    source: str

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("embedding must be a nonempty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding values must be finite")
        if self.source not in EMBEDDING_SOURCES:
            raise ValueError(f"unknown embedding source {self.source!r}")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class NiqeModel:
    """Multivariate Gaussian over quality features: mean and covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        if mu.ndim != 1 or cov.shape != (mu.size, mu.size):
            raise ValueError(f"mean {mu.shape} and covariance {cov.shape} disagree")
        if not np.allclose(cov, cov.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-8:
            raise ValueError("covariance must be positive semidefinite")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "covariance", cov)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NiqeModel":
        return cls(mean=np.asarray(d["mean"]), covariance=np.asarray(d["covariance"]))


def cosine_similarity(u: EmbeddingVector, v: EmbeddingVector) -> float:
    """u.v / (||u|| ||v||), clipped into [-1, 1] against rounding."""
    if u.values.size != v.values.size:
        raise ValueError(f"length mismatch: {u.values.size} vs {v.values.size}")
    a = u.values.astype(np.float64)
    b = v.values.astype(np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def subject_similarity(refs: list[EmbeddingVector],
                       gens: list[EmbeddingVector]) -> float:
    """Mean cosine similarity over all (ref, gen) pairs of one source kind."""
    if not refs or not gens:
        raise ValueError("need at least one reference and one generated embedding")
    sources = {e.source for e in refs} | {e.source for e in gens}
    if len(sources) != 1:
        raise ValueError(f"mixed embedding sources: {sorted(sources)}")
    total = 0.0
    for r in refs:
        for g in gens:
            total += cosine_similarity(r, g)
    return total / (len(refs) * len(gens))


def _local_gaussian(plane: np.ndarray) -> np.ndarray:
    g = np.asarray(gaussian_kernel(_MSCN_WINDOW, _MSCN_SIGMA).separable_1d,
                   dtype=np.float64)
    out = correlate1d(plane, g, axis=0, mode="nearest")
    return correlate1d(out, g, axis=1, mode="nearest")


def mscn(img: ImageBuffer) -> ImageBuffer:
    """Mean-subtracted contrast-normalized coefficients (I - mu)/(sigma + C).

    mu and sigma are the local Gaussian-weighted mean and standard
    deviation.  Values are anchored at the corner sample before filtering
    (the formula is shift-invariant), which makes constant inputs come out
    exactly zero instead of accumulating kernel-sum rounding.
    """
    if img.channels != 1:
        raise ValueError("mscn expects a single-channel image")
    plane = img.data[:, :, 0].astype(np.float64)
    anchored = plane - plane[0, 0]
    mu = _local_gaussian(anchored)
    e2 = _local_gaussian(anchored * anchored)
    sigma = np.sqrt(np.clip(e2 - mu * mu, 0.0, None))
    out = (anchored - mu) / (sigma + _MSCN_C)
    return ImageBuffer(np.clip(out, -1e6, 1e6).astype(np.float32))


def mscn_features(img: ImageBuffer) -> np.ndarray:
    """7-dim feature row per image: MSCN moments and paired-product means.

    [mean, variance, mean |.|, H, V, D1, D2 products] - the Gaussian-model
    front-end used for the model-distance score.
    """
    coeffs = mscn(img).data[:, :, 0].astype(np.float64)
    h = coeffs[:, 1:] * coeffs[:, :-1]
    v = coeffs[1:, :] * coeffs[:-1, :]
    d1 = coeffs[1:, 1:] * coeffs[:-1, :-1]
    d2 = coeffs[1:, :-1] * coeffs[:-1, 1:]
    return np.array([
        coeffs.mean(),
        coeffs.var(),
        np.abs(coeffs).mean(),
        h.mean(),
        v.mean(),
        d1.mean(),
        d2.mean(),
    ])


def fit_gaussian_model(features: np.ndarray) -> NiqeModel:
    """Fit mean and covariance over feature rows (n_samples, n_features)."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("need a (n_samples, n_features) feature matrix")
    mu = feats.mean(axis=0)
    if feats.shape[0] == 1:
        cov = np.zeros((feats.shape[1], feats.shape[1]))
    else:
        cov = np.cov(feats, rowvar=False)
        cov = (cov + cov.T) / 2.0
    return NiqeModel(mean=mu, covariance=cov)


def niqe_distance(test_model: NiqeModel, pristine: NiqeModel) -> float:
    """sqrt((mu1-mu2)^T ((S1+S2)/2)^-1 (mu1-mu2)); pseudo-inverse when the
    pooled covariance is singular."""
    if test_model.mean.size != pristine.mean.size:
        raise ValueError(
            f"dimension mismatch: {test_model.mean.size} vs {pristine.mean.size}"
        )
    diff = test_model.mean - pristine.mean
    pooled = (test_model.covariance + pristine.covariance) / 2.0
    # near-singular pooled covariances (few samples) go through the
    # pseudo-inverse rather than amplifying noise through solve()
    if np.linalg.cond(pooled) > 1e12:
        solved = np.linalg.pinv(pooled, hermitian=True) @ diff
    else:
        solved = np.linalg.solve(pooled, diff)
    return float(np.sqrt(max(float(diff @ solved), 0.0)))
