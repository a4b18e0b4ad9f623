import itertools
import math

import numpy as np
import pytest

from fvattn.errors import DegenerateData, DimMismatch, TooFewSamples
from fvattn.gmm import (
    DiagGmm,
    fit_em,
    load_gmm,
    log_density,
    posteriors,
    sample,
    save_gmm,
    variance_floor,
)

from oracles import mixture_density, mixture_log_density, responsibilities


def random_gmm(rng, K, d):
    w = rng.dirichlet(np.ones(K))
    return DiagGmm(w, rng.normal(scale=2, size=(K, d)), rng.uniform(0.3, 2.0, (K, d)))


def planted(seed=0):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    X = np.concatenate([c + 0.5 * rng.standard_normal((500, 2)) for c in centers])
    return X, centers


def matched_error(means, centers):
    return min(
        max(np.linalg.norm(means[list(p)] - centers, axis=1))
        for p in itertools.permutations(range(len(centers)))
    )


def test_standard_normal_peak():
    g = DiagGmm([1.0], [[0.0]], [[1.0]])
    assert abs(log_density(g, np.array([0.0])) - math.log(1 / math.sqrt(2 * math.pi))) < 1e-15
    assert abs(log_density(g, np.array([0.0])) + 0.9189385) < 1e-7


def test_symmetric_mixture_midpoint():
    g = DiagGmm([0.5, 0.5], [[-1.0], [1.0]], [[1.0], [1.0]])
    single = DiagGmm([1.0], [[-1.0]], [[1.0]])
    assert math.isclose(log_density(g, np.array([0.0])), log_density(single, np.array([0.0])),
                        rel_tol=0, abs_tol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_log_density_matches_loop(seed):
    rng = np.random.default_rng(seed)
    g = random_gmm(rng, 3, 4)
    X = rng.normal(scale=2, size=(6, 4))
    got = log_density(g, X)
    for x, lp in zip(X, got):
        args = (x.tolist(), g.weights.tolist(), g.means.tolist(), g.variances.tolist())
        assert abs(lp - mixture_log_density(*args)) < 1e-12
        assert math.isclose(math.exp(lp), mixture_density(*args), rel_tol=1e-12)


def test_log_density_far_point_finite():
    g = DiagGmm([0.5, 0.5], [[0.0], [1.0]], [[1e-4], [1e-4]])
    assert np.isfinite(log_density(g, np.array([1e3])))


def test_dim_mismatch():
    g = DiagGmm([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
    with pytest.raises(DimMismatch):
        log_density(g, np.zeros(3))
    with pytest.raises(DimMismatch):
        posteriors(g, np.zeros((2, 3)))


def test_posteriors_trivial_cases():
    X = np.random.default_rng(0).normal(size=(10, 2))
    assert np.array_equal(posteriors(DiagGmm([1.0], [[0, 0]], [[1, 1]]), X), np.ones((10, 1)))
    twin = DiagGmm([0.5, 0.5], [[1, 2], [1, 2]], [[1, 3], [1, 3]])
    assert np.all(np.abs(posteriors(twin, X) - 0.5) < 1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_posteriors_match_loop(seed):
    rng = np.random.default_rng(seed)
    g = random_gmm(rng, 4, 3)
    X = rng.normal(scale=3, size=(8, 3))
    got = posteriors(g, X)
    assert np.all(np.abs(got.sum(axis=1) - 1) < 1e-10)
    assert np.all((got >= 0) & (got <= 1))
    for x, row in zip(X, got):
        ref = responsibilities(x.tolist(), g.weights.tolist(), g.means.tolist(), g.variances.tolist())
        assert np.max(np.abs(row - ref)) < 1e-10


def test_single_component_closed_form():
    X = np.random.default_rng(3).normal([1.0, -2.0], [0.5, 3.0], size=(400, 2))
    fit = fit_em(X, K=1)
    reg = variance_floor(X, 1e-4)
    assert np.max(np.abs(fit.gmm.means[0] - X.mean(axis=0))) < 1e-10
    assert np.max(np.abs(fit.gmm.variances[0] - (X.var(axis=0) + reg))) < 1e-10
    assert fit.gmm.reg == reg


def test_planted_clusters_recovered():
    X, centers = planted()
    fit = fit_em(X, K=3, max_iters=100, seed=0)
    assert fit.n_iter <= 100
    assert matched_error(fit.gmm.means, centers) < 0.1


def test_monotone_trace_and_invariants():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(200, 3)) * rng.uniform(0.2, 3, 3) + rng.integers(0, 4, (200, 1))
        fit = fit_em(X, K=4, seed=seed)
        assert np.all(np.diff(fit.loglik_trace) >= -1e-8)
        g = fit.gmm
        assert abs(g.weights.sum() - 1) < 1e-12
        assert g.variances.min() >= g.reg > 0


def test_seed_determinism():
    X, _ = planted(1)
    a, b = fit_em(X, K=5, seed=9), fit_em(X, K=5, seed=9)
    assert a.gmm.means.tobytes() == b.gmm.means.tobytes()
    assert a.loglik_trace == b.loglik_trace


def test_too_few_and_degenerate():
    with pytest.raises(TooFewSamples):
        fit_em(np.random.default_rng(0).normal(size=(4, 2)), K=4)
    with pytest.raises(DegenerateData):
        fit_em(np.ones((50, 2)), K=2)


def test_empty_component_is_reseeded():
    # two far clusters, 6 components: some starve early and get re-seeded
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(0, 0.01, (50, 1)), rng.normal(100, 0.01, (50, 1))])
    fit = fit_em(X, K=6, seed=1)
    assert np.all(np.isfinite(fit.gmm.means))
    assert abs(fit.gmm.weights.sum() - 1) < 1e-12


def test_sample_concentrates_and_respects_weights():
    g = DiagGmm([1.0], [[3.0]], [[1e-8]])
    s = sample(g, 1000, seed=0)
    assert abs(s.mean() - 3.0) < 5 * 1e-4 / math.sqrt(1000)
    two = DiagGmm([1.0, 0.0], [[0.0], [50.0]], [[1.0], [1.0]])
    assert sample(two, 10000, seed=1).max() < 10


def test_sample_clt_bounds():
    s = sample(DiagGmm([1.0], [[0.0]], [[1.0]]), 1_000_000, seed=123)
    assert abs(s.mean()) < 0.005
    assert 0.99 <= s.var() <= 1.01
    assert np.array_equal(sample(DiagGmm([1.0], [[0.0]], [[1.0]]), 10, seed=5),
                          sample(DiagGmm([1.0], [[0.0]], [[1.0]]), 10, seed=5))


def test_save_load(tmp_path):
    X, _ = planted()
    fit = fit_em(X, K=3)
    save_gmm(tmp_path / "g.bin", fit)
    g, meta = load_gmm(tmp_path / "g.bin")
    assert g.means.tobytes() == fit.gmm.means.tobytes()
    assert meta["K"] == 3 and meta["d"] == 2 and meta["loglik_trace"] == fit.loglik_trace
    assert meta["seed"] == 0 and meta["reg"] == fit.gmm.reg
