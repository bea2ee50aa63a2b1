import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from cohort_sbi.errors import ConfigurationError, DomainError, FormatError, NumericError
from cohort_sbi.histograms import Histogram
from cohort_sbi.model import PARAM_NAMES, valid_rows
from cohort_sbi.priors import (
    MarginalPrior, Prior, PriorConfig, build_prior, fecundability_envelope, fit_gamma_to_quantiles,
    gamma_from_mean_cv, load_empirical_marginal,
)

from .oracles import gamma_quantile_bisect


@pytest.mark.parametrize("q", [(14.4, 28.9), (1.9, 8.1), (0.5, 0.6), (1.0, 1000.0)])
def test_gamma_fit_against_bisection(q):
    g = fit_gamma_to_quantiles(*q)
    shape, rate = g.params
    assert gamma_quantile_bisect(shape, rate, 0.025) == pytest.approx(q[0], rel=1e-6)
    assert gamma_quantile_bisect(shape, rate, 0.975) == pytest.approx(q[1], rel=1e-6)


def test_gamma_fit_mu_d_center():
    assert 4.0 <= fit_gamma_to_quantiles(1.9, 8.1).mean() <= 5.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.floats(1.2, 20))
def test_gamma_fit_scale_family(q, k):
    a = fit_gamma_to_quantiles(1.0, k)
    b = fit_gamma_to_quantiles(q, q * k)
    assert b.params[0] == pytest.approx(a.params[0], rel=1e-9)
    assert b.params[1] == pytest.approx(a.params[1] / q, rel=1e-8)


def test_gamma_fit_idempotent():
    a = fit_gamma_to_quantiles(14.4, 28.9)
    b = fit_gamma_to_quantiles(*a.quantile([0.025, 0.975]))
    assert b.params == pytest.approx(a.params, rel=1e-8)


@pytest.mark.parametrize("q", [(0, 1), (2, 1), (-1, 3)])
def test_gamma_fit_domain(q):
    with pytest.raises(DomainError):
        fit_gamma_to_quantiles(*q)


def test_gamma_fit_unreachable_ratio():
    with pytest.raises(NumericError):
        fit_gamma_to_quantiles(1.0, 1.0 + 1e-9)


@pytest.mark.parametrize("m", [
    MarginalPrior.gamma(3, 2), MarginalPrior.uniform(0, 8), MarginalPrior.beta(2, 8),
    MarginalPrior.normal(1, 2), MarginalPrior.empirical([2, 3, 5, 5.5], [1, 2, 1]),
])
def test_densities_integrate_to_one(m):
    lo, hi = m.support
    f = lambda x: math.exp(float(m.log_pdf(x)))  # noqa: E731
    if m.family == "empirical":
        edges = m.histogram.edges
        total = sum(integrate.quad(f, a, b)[0] for a, b in zip(edges[:-1], edges[1:]))
    else:
        total = integrate.quad(f, lo, hi, epsabs=1e-12, epsrel=1e-10, limit=200)[0]
    assert total == pytest.approx(1.0, abs=1e-6)


def test_empirical_moments_and_sampling():
    m = MarginalPrior.empirical([2, 3, 5], [1, 3])
    x = m.sample(200_000, np.random.default_rng(0))
    assert x.min() >= 2 and x.max() <= 5
    assert x.mean() == pytest.approx(m.mean(), abs=4 * m.sd() / math.sqrt(x.size))
    assert x.std() == pytest.approx(m.sd(), rel=0.01)


def test_empirical_single_bin():
    m = MarginalPrior.empirical([2, 3], [7])
    assert np.exp(m.log_pdf([2.0, 2.5, 3.0])).tolist() == [1.0, 1.0, 1.0]
    assert np.isneginf(m.log_pdf([1.99, 3.01])).all()


def test_empirical_renormalised(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("bin_lo,bin_hi,mass\n1,2,3\n2,4,4\n")
    m = load_empirical_marginal(p)
    assert sum(m.params[1]) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("edges,masses", [([0, 1], [-1]), ([0, 1], [0]), ([0, np.inf], [1])])
def test_empirical_errors(edges, masses):
    with pytest.raises(FormatError):
        MarginalPrior.empirical(edges, masses)


def test_scenario1_marginals():
    p = build_prior(1)
    assert p["delta_r"] == MarginalPrior.uniform(0, 8)
    assert p["mu_b"] == MarginalPrior.uniform(10, 100)
    assert p["kappa"] == MarginalPrior.beta(2, 8)
    assert p["kappa"].mean() == pytest.approx(0.2)
    assert p["sigma_s"] == gamma_from_mean_cv(3, 0.5)
    assert p.names == PARAM_NAMES


def test_scenario3_equals_scenario1():
    assert build_prior(3) == build_prior(1)


def test_scenario2_requires_sources():
    with pytest.raises(ConfigurationError, match="mu_d"):
        build_prior(2)


def test_scenario2_replaces_three_marginals():
    cfg = PriorConfig(
        mu_d_histogram=Histogram([4, 5], [1.0]),
        delta_r_histogram=Histogram([0, 1, 2], [0.5, 0.5]),
        mu_b_histogram=Histogram([20, 30], [1.0]),
    )
    p2, p1 = build_prior(2, cfg), build_prior(1)
    for name in PARAM_NAMES:
        same = p2[name] == p1[name]
        assert same == (name not in ("mu_d", "delta_r", "mu_b"))
    x = p2.sample(1000, np.random.default_rng(0))
    assert np.all((x[:, 4] >= 4) & (x[:, 4] <= 5))


def test_scenario2_rejects_nonpositive_mu_d():
    cfg = PriorConfig(
        mu_d_histogram=Histogram([-1, 5], [1.0]),
        delta_r_histogram=Histogram([0, 1], [1.0]),
        mu_b_histogram=Histogram([20, 30], [1.0]),
    )
    with pytest.raises(ConfigurationError):
        build_prior(2, cfg)


def test_bad_scenario():
    with pytest.raises(ConfigurationError):
        build_prior(4)


def test_samples_valid_and_reproducible(prior1):
    a = prior1.sample(5000, np.random.default_rng(1))
    assert np.array_equal(a, prior1.sample(5000, np.random.default_rng(1)))
    assert valid_rows(a).all()
    assert prior1.in_support(a).all()
    assert np.all((a[:, 2] >= 0) & (a[:, 2] <= 8))
    assert np.all((a[:, 8] > 0) & (a[:, 8] < 1))


def test_mu_s_sample_quantiles(prior1):
    x = prior1["mu_s"].sample(1_000_000, np.random.default_rng(2))
    lo, hi = np.quantile(x, [0.025, 0.975])
    # binomial standard error of the empirical quantile, converted through the density
    for q, target, val in ((0.025, 14.4, lo), (0.975, 28.9, hi)):
        dens = math.exp(float(prior1["mu_s"].log_pdf(target)))
        se = math.sqrt(q * (1 - q) / x.size) / dens
        assert abs(val - target) < 4 * se


def test_log_density(prior1, theta):
    t = theta.to_array()
    terms = prior1.marginal_log_densities(t)[0]
    assert prior1.log_density(t) == pytest.approx(terms.sum())
    assert terms[2] == pytest.approx(math.log(1 / 8))
    t[2] = 9.0
    assert prior1.log_density(t) == -math.inf
    assert not prior1.in_support(t)[0]


def test_manifest_round_trip(prior1):
    assert Prior.from_manifest(prior1.manifest()) == prior1


def test_manifest_round_trip_empirical():
    p = Prior([MarginalPrior.empirical([0, 1, 3], [0.2, 0.8]), MarginalPrior.normal(0, 1)], ("a", "b"))
    assert Prior.from_manifest(p.manifest(), ("a", "b")) == p


def test_fecundability_envelope(prior1):
    lo, hi, clamp = fecundability_envelope(prior1, [20, 25, 30], n=10_000, seed=0)
    assert np.all(lo[:2] <= 0.15) and np.all(hi[:2] >= 0.35)
    assert 0 <= clamp < 0.05
