"""Monte Carlo KL divergence between diagonal GMMs, plus the single-Gaussian closed form."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimMismatch, NotSingleComponent
from .gmm import DiagGmm, log_density, sample

RNG_ALGORITHM = "numpy.PCG64"
CHUNK = 200_000


@dataclass(frozen=True)
class KlEstimate:
    value: float
    std_error: float
    n_samples: int
    seed: int | None
    rng: str = RNG_ALGORITHM

    def to_json(self) -> dict:
        d = asdict(self)
        d["n"] = d.pop("n_samples")
        return d


def kl_mc(f: DiagGmm, g: DiagGmm, n: int = 1_000_000, seed: int | None = 0) -> KlEstimate:
    """Estimate ``D(f||g)`` as the mean of ``log f(x) - log g(x)`` over ``x ~ f``.

    Samples are drawn in fixed-size chunks from one PCG64 stream and the
    log-ratios are reduced in chunk order, so the estimate is a pure function
    of ``(f, g, n, seed)``.
    """
    if f.dim != g.dim:
        raise DimMismatch(f"mixtures live in {f.dim} and {g.dim} dimensions")
    if n < 1:
        raise ValueError("sample count must be at least 1")
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    done = 0
    ratios = []
    while done < n:
        m = min(CHUNK, n - done)
        x = sample(f, m, rng)
        r = log_density(f, x) - log_density(g, x)
        ratios.append(r)
        total += float(np.sum(r))
        done += m
    mean = total / n
    for r in ratios:
        total_sq += float(np.sum((r - mean) ** 2))
    se = math.sqrt(total_sq / (n - 1) / n) if n > 1 else 0.0
    return KlEstimate(mean, se, n, seed)


def kl_gaussian_closed(f: DiagGmm, g: DiagGmm) -> float:
    """Exact ``D(f||g)`` for two single diagonal Gaussians (nats)."""
    if f.n_components != 1 or g.n_components != 1:
        raise NotSingleComponent("closed form needs K=1 on both sides")
    if f.dim != g.dim:
        raise DimMismatch(f"Gaussians live in {f.dim} and {g.dim} dimensions")
    vf, vg = f.variances[0], g.variances[0]
    dm = f.means[0] - g.means[0]
    return float(np.sum(0.5 * np.log(vg / vf) + (vf + dm ** 2) / (2.0 * vg) - 0.5))
