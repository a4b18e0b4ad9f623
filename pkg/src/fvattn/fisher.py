"""Fisher Vector encoding against a diagonal GMM, with power and L2 normalization.

Layout of an encoded vector of length ``K(2d+1)``::

    [ G_w (K) | G_mu (K*d, component-major) | G_sigma (K*d, component-major) ]
"""

from __future__ import annotations

import numpy as np

from .errors import DimMismatch, EmptyFeatureSet
from .gmm import DiagGmm, posteriors


def fv_length(K: int, d: int) -> int:
    if K < 1 or d < 1:
        raise ValueError("K and d must be at least 1")
    return K * (2 * d + 1)


def encode(gmm: DiagGmm, X) -> np.ndarray:
    """Unnormalized Fisher Vector of the local features ``X`` (one per row).

    All three blocks are averaged over the ``T`` features, the weight block
    included, so the encoding does not depend on feature order or on
    duplicating the whole set.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimMismatch(f"expected a T x d matrix, got shape {X.shape}")
    if X.shape[0] == 0:
        raise EmptyFeatureSet("cannot encode an empty feature set")
    if X.shape[1] != gmm.dim:
        raise DimMismatch(f"features have dim {X.shape[1]}, mixture has {gmm.dim}")
    T = X.shape[0]
    w = gmm.weights
    gamma = posteriors(gmm, X)                       # (T, K)
    sigma = np.sqrt(gmm.variances)                   # (K, d)
    g_w = (gamma - w).sum(axis=0) / (T * np.sqrt(w))
    g_mu = np.empty_like(gmm.means)
    g_sigma = np.empty_like(gmm.means)
    for k in range(gmm.n_components):
        z = (X - gmm.means[k]) / sigma[k]
        g = gamma[:, k]
        g_mu[k] = g @ z / (T * np.sqrt(w[k]))
        g_sigma[k] = g @ (z * z - 1.0) / (T * np.sqrt(2.0 * w[k]))
    return np.concatenate([g_w, g_mu.ravel(), g_sigma.ravel()])


def normalize(fv, alpha: float = 0.5) -> np.ndarray:
    """Signed power ``sign(z)|z|^alpha`` followed by global L2 normalization.

    Works on one vector or on a batch (one vector per row). Zero vectors stay zero.
    """
    v = np.asarray(fv, dtype=np.float64)
    v = np.sign(v) * np.abs(v) ** alpha
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)


def encode_batch(gmm: DiagGmm, feature_sets, alpha: float | None = 0.5) -> np.ndarray:
    """Encode several feature sets into a ``(n, K(2d+1))`` matrix, normalizing unless ``alpha`` is None."""
    rows = [encode(gmm, X) for X in feature_sets]
    out = np.vstack(rows) if rows else np.empty((0, fv_length(gmm.n_components, gmm.dim)))
    return out if alpha is None else normalize(out, alpha)
