"""Diagonal-covariance Gaussian mixtures: EM fitting, densities, posteriors, sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateData, DimMismatch, TooFewSamples
from .tensorio import read_bundle, write_bundle

LOG_2PI = math.log(2.0 * math.pi)
EMPTY_MASS = 1e-6


@dataclass(frozen=True)
class DiagGmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    reg: float = 0.0

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.array(self.means, dtype=np.float64)
        var = np.array(self.variances, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu.reshape(w.size, -1)
        if var.ndim == 1:
            var = var.reshape(w.size, -1)
        if mu.shape != var.shape or mu.shape[0] != w.size:
            raise DimMismatch(
                f"weights {w.shape}, means {mu.shape}, variances {var.shape} are inconsistent"
            )
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        for a in (w, mu, var):
            if not np.all(np.isfinite(a)):
                raise ValueError("mixture parameters must be finite")
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_log_probs(self, X) -> np.ndarray:
        """``log w_k + log N(x_t | mu_k, diag(var_k))`` as a ``(T, K)`` matrix."""
        X = _as_rows(X, self.dim)
        out = np.empty((X.shape[0], self.n_components))
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        for k in range(self.n_components):
            maha = np.sum((X - self.means[k]) ** 2 / self.variances[k], axis=1)
            log_norm = -0.5 * (self.dim * LOG_2PI + np.sum(np.log(self.variances[k])))
            out[:, k] = log_w[k] + log_norm - 0.5 * maha
        return out


def _as_rows(X, d) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != d:
        raise DimMismatch(f"expected rows of dimension {d}, got shape {X.shape}")
    return X


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    return m + np.log(np.sum(np.exp(a - m[:, None]), axis=1))


def log_density(gmm: DiagGmm, x):
    """``log p(x)``; a scalar for one d-vector, a ``(T,)`` array for a ``(T, d)`` matrix."""
    single = np.ndim(x) == 1
    out = _logsumexp_rows(gmm.component_log_probs(x))
    return float(out[0]) if single else out


def posteriors(gmm: DiagGmm, X) -> np.ndarray:
    """Responsibilities ``gamma_k(x_t)``, one row per sample, evaluated in log space."""
    logp = gmm.component_log_probs(X)
    return np.exp(logp - _logsumexp_rows(logp)[:, None])


def sample(gmm: DiagGmm, n: int, seed=None) -> np.ndarray:
    """Draw ``n`` points: a component by weight, then a Gaussian draw from it."""
    if n < 1:
        raise ValueError("sample count must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    comp = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    z = rng.standard_normal((n, gmm.dim))
    return gmm.means[comp] + np.sqrt(gmm.variances[comp]) * z


@dataclass(frozen=True)
class GmmFit:
    gmm: DiagGmm
    loglik_trace: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    seed: int | None = None


def kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new center drawn with probability proportional to D^2."""
    T = X.shape[0]
    centers = [X[rng.integers(T)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(T, p=d2 / total))
        else:
            idx = int(rng.integers(T))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def variance_floor(X, reg_scale: float) -> float:
    """``reg_scale`` times the largest per-dimension standard deviation of ``X``."""
    return float(reg_scale * np.max(np.std(X, axis=0)))


def fit_em(X, K: int = 16, max_iters: int = 100, rel_tol: float = 1e-6, seed: int = 0,
           reg_scale: float = 1e-4) -> GmmFit:
    """Maximum-likelihood EM for a diagonal GMM with an additive variance floor.

    Every M-step adds ``reg = reg_scale * max_dim std(X)`` to each variance.
    The returned trace holds the mean log-likelihood of the parameters at the
    start of every iteration plus the final one; iteration stops after
    ``max_iters`` M-steps or once the relative improvement drops below
    ``rel_tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimMismatch(f"expected a T x d matrix, got shape {X.shape}")
    T, d = X.shape
    if K < 1:
        raise ValueError("component count must be at least 1")
    if T <= K:
        raise TooFewSamples(f"{T} samples cannot fit {K} components (need T > K)")
    if np.all(X == X[0]):
        raise DegenerateData("all samples are identical")
    reg = variance_floor(X, reg_scale)
    if not reg > 0:
        raise DegenerateData("variance floor is zero; use a positive reg_scale")

    rng = np.random.default_rng(seed)
    global_var = X.var(axis=0) + reg
    weights = np.full(K, 1.0 / K)
    means = kmeans_pp(X, K, rng)
    variances = np.tile(global_var, (K, 1))

    trace = []
    converged = False
    n_iter = 0
    while True:
        gmm = DiagGmm(weights, means, variances, reg)
        logp = gmm.component_log_probs(X)
        lse = _logsumexp_rows(logp)
        ll = float(np.mean(lse))
        if trace:
            prev = trace[-1]
            if (ll - prev) < rel_tol * max(abs(prev), np.finfo(float).tiny):
                trace.append(ll)
                converged = True
                break
        trace.append(ll)
        if n_iter >= max_iters:
            break
        resp = np.exp(logp - lse[:, None])
        nk = resp.sum(axis=0)
        means = np.empty((K, d))
        variances = np.empty((K, d))
        empty = nk < EMPTY_MASS * T
        safe_nk = np.where(empty, 1.0, nk)
        for k in range(K):
            means[k] = resp[:, k] @ X / safe_nk[k]
            variances[k] = resp[:, k] @ (X - means[k]) ** 2 / safe_nk[k] + reg
        weights = nk / T
        if np.any(empty):
            # re-seed starved components at the least likely samples
            worst = np.argsort(lse, kind="stable")
            for j, k in enumerate(np.flatnonzero(empty)):
                means[k] = X[worst[j]]
                variances[k] = global_var
                weights[k] = 1.0 / T
        weights = weights / weights.sum()
        n_iter += 1

    return GmmFit(gmm, trace, n_iter, converged, seed)


def save_gmm(path, fit) -> None:
    gmm = fit.gmm if isinstance(fit, GmmFit) else fit
    meta = {"K": gmm.n_components, "d": gmm.dim, "reg": gmm.reg}
    if isinstance(fit, GmmFit):
        meta.update(seed=fit.seed, loglik_trace=fit.loglik_trace, n_iter=fit.n_iter,
                    converged=fit.converged)
    write_bundle(path, {"weights": gmm.weights, "means": gmm.means, "variances": gmm.variances}, meta)


def load_gmm(path) -> tuple[DiagGmm, dict]:
    tensors, meta = read_bundle(path)
    return DiagGmm(tensors["weights"], tensors["means"], tensors["variances"], meta.get("reg", 0.0)), meta
