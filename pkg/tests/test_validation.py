import math

import numpy as np
import pytest

from cohort_sbi.histograms import Histogram
from cohort_sbi.priors import MarginalPrior, Prior
from cohort_sbi.simulator import extract_micro_distributions, simulate_cohort, simulate_summaries
from cohort_sbi.snpe import SnpeConfig
from cohort_sbi.validation import cross_validate, normalized_rmse, ppc_from_draws, validate_micro

from .conftest import REF_THETA


def test_normalized_rmse_single_fold():
    prior = Prior([MarginalPrior.uniform(0, 12), MarginalPrior.normal(0, 2)], ("a", "b"))
    out = normalized_rmse([[4.0, 1.0]], [[1.0, 0.0]], prior)
    assert out.tolist() == pytest.approx([3 / math.sqrt(12), 0.5])


def test_normalized_rmse_many_folds():
    prior = Prior([MarginalPrior.normal(0, 2)], ("a",))
    out = normalized_rmse([[1.0], [-3.0]], [[0.0], [0.0]], prior)
    assert out[0] == pytest.approx(math.sqrt(5) / 2)


def test_cross_validate_with_stub(prior1):
    offset = 0.5 * prior1.sd()

    def infer(x0, prior, cfg):
        assert x0.shape == (40,)
        return prior.sample(1, np.random.default_rng(cfg.seed))[0] + offset

    cfg = SnpeConfig(n_women=200)
    rep = cross_validate(prior1, 1, 3, cfg, infer=infer, seed=7)
    assert rep.ok.all()
    assert rep.nrmse == pytest.approx(np.full(11, 0.5))
    again = cross_validate(prior1, 1, 3, cfg, infer=infer, seed=7)
    assert rep.fold_seeds == again.fold_seeds and rep.data_seeds == again.data_seeds
    assert len(set(rep.fold_seeds)) == 3


def test_cross_validate_records_failures(prior1):
    calls = []

    def infer(x0, prior, cfg):
        calls.append(cfg.seed)
        if len(calls) == 2:
            raise RuntimeError("boom")
        return prior.sample(1, np.random.default_rng(cfg.seed))[0]

    rep = cross_validate(prior1, 3, 3, SnpeConfig(n_women=100), infer=infer, seed=1)
    assert rep.ok.tolist() == [True, False, True]
    assert "boom" in rep.failures[1]
    assert np.all(np.isnan(rep.estimates[1]))
    assert np.allclose(rep.nrmse, 0.0)
    assert any("fold 1 failed" in line for line in rep.summary_lines())


def test_cross_validate_fold_data_is_reproducible(prior1):
    seen = []
    rep = cross_validate(prior1, 1, 2, SnpeConfig(n_women=150),
                         infer=lambda x0, p, c: seen.append(x0) or p.mean(), seed=4)
    for i in range(2):
        x0 = simulate_summaries(rep.truths[i], 150, [rep.data_seeds[i]])[0]
        assert np.array_equal(x0, seen[i])


def test_ppc_point_mass_draws_cover_own_data():
    th = REF_THETA.to_array()
    observed = simulate_summaries(th, 2000, [123], "asfr+asufr")[0]
    rep = ppc_from_draws(np.tile(th, (200, 1)), observed, 2000, seed=1)
    assert rep.observed.shape == (80,) and rep.n_draws == 200
    assert np.all(rep.lo95 <= rep.mean) and np.all(rep.mean <= rep.hi95)
    assert rep.coverage >= 0.9
    assert rep.block(1).observed.shape == (40,)
    ages = [r[0] for r in rep.rows()]
    assert ages[:2] == [10, 11] and ages[40] == 10


def test_ppc_detects_wrong_theta():
    from dataclasses import replace

    observed = simulate_summaries(REF_THETA.to_array(), 2000, [5])[0]
    wrong = replace(REF_THETA, mu_s=24.0, mu_d=1.2).to_array()
    rep = ppc_from_draws(np.tile(wrong, (100, 1)), observed, 2000, seed=1)
    assert rep.coverage < 0.7


def test_validate_micro_same_cohort_is_zero():
    micro = extract_micro_distributions(simulate_cohort(REF_THETA, 1000, 9))
    rep = validate_micro(REF_THETA, dict(micro.items()), 1000, 9)
    assert set(rep.js_bits) == {"age_first_sex", "desired_family_size", "birth_intervals"}
    assert all(v == pytest.approx(0.0, abs=1e-12) for v in rep.js_bits.values())


def test_validate_micro_subset_and_empty():
    from dataclasses import replace

    obs = {"desired_family_size": Histogram([0, 1, 2, 3], [0.2, 0.5, 0.3])}
    rep = validate_micro(REF_THETA.to_array(), obs, 500, 1)
    assert list(rep.js_bits) == ["desired_family_size"]
    assert 0 < rep.js_bits["desired_family_size"] <= 1
    barren = replace(REF_THETA, beta1=0.0, beta2=0.0)
    obs = {"birth_intervals": Histogram([12, 24, np.inf], [0.5, 0.5])}
    assert math.isnan(validate_micro(barren, obs, 100, 1).js_bits["birth_intervals"])
