import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats
from scipy.special import log_softmax, softmax

from cohort_sbi.errors import ContractError, FormatError, LeakageError, TrainingError
from cohort_sbi.mdn import (
    Estimator, MixtureDensityNetwork, Standardizer, TrainingOptions, atomic_apt_loss, draw_atoms,
    log_prob, mixture_log_prob, nll_loss, sample_posterior, train,
)
from cohort_sbi.priors import MarginalPrior, Prior


def tiny_net(seed=0, n_in=2, n_out=2, hidden=(3,), k=2):
    net = MixtureDensityNetwork(n_in, n_out, hidden, k, rng=np.random.default_rng(seed))
    net.params += 0.3 * np.random.default_rng(seed + 1).standard_normal(net.n_weights)
    return net


def constant_net(means, log_scales=0.0, n_in=3):
    """K=1 network whose output ignores x."""
    means = np.atleast_1d(np.asarray(means, float))
    net = MixtureDensityNetwork(n_in, means.size, (4,), 1)
    v = net.views()
    v["bm"][...] = means
    v["bs"][...] = log_scales
    return net


def box_prior(d, lo=-10.0, hi=10.0):
    return Prior([MarginalPrior.uniform(lo, hi)] * d, tuple(f"t{i}" for i in range(d)))


def test_standardizer_round_trip():
    rng = np.random.default_rng(0)
    th = rng.normal(5, 3, (100, 4))
    x = rng.normal(-2, 0.01, (100, 6))
    x[:, 2] = 1.0  # constant column survives the floor
    s = Standardizer.fit(th, x)
    assert np.all(s.theta_scale > 0) and np.all(s.x_scale > 0)
    assert np.allclose(s.theta_from_std(s.theta_to_std(th)), th, rtol=0, atol=1e-10)
    assert np.allclose(s.x_from_std(s.x_to_std(x)), x, rtol=0, atol=1e-10)
    assert np.all(np.isfinite(s.x_to_std(x)))


def test_single_component_is_gaussian():
    m = np.array([0.5, -1.0, 2.0])
    net = constant_net(m)
    std = Standardizer([1.0, 2.0, 3.0], [2.0, 0.5, 4.0], np.zeros(3), np.ones(3))
    theta = np.random.default_rng(1).normal(size=(5, 3))
    got = log_prob(net, std, theta, np.zeros(3))
    loc = std.theta_shift + m * std.theta_scale
    want = stats.norm.logpdf(theta, loc, std.theta_scale).sum(axis=1)
    assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_density_integrates_to_one_1d():
    net = MixtureDensityNetwork(2, 1, (8,), 3, rng=np.random.default_rng(3))
    std = Standardizer([4.0], [2.5], np.zeros(2), np.ones(2))
    x = np.array([0.3, -1.2])
    f = lambda t: math.exp(log_prob(net, std, [[t]], x[None])[0])  # noqa: E731
    total, _ = integrate.quad(f, -80, 90, limit=400, epsabs=1e-10)
    assert total == pytest.approx(1.0, abs=1e-3)


def test_density_integrates_to_one_2d():
    net = MixtureDensityNetwork(1, 2, (5,), 2, rng=np.random.default_rng(4))
    std = Standardizer.identity(2, 1)
    g = np.linspace(-12, 12, 801)
    tt = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    dens = np.exp(log_prob(net, std, tt, [[0.4]])).reshape(g.size, g.size)
    assert integrate.trapezoid(integrate.trapezoid(dens, g, axis=1), g) == pytest.approx(1.0, abs=1e-3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_mixture_weights_sum_to_one(logits):
    assert softmax(np.array(logits)).sum() == pytest.approx(1.0, abs=1e-12)


def test_log_scales_are_clamped():
    net = constant_net([0.0, 0.0], log_scales=50.0)
    (_, _, ls), _ = net.forward(np.zeros((1, 3)))
    assert ls.max() == 7.0


def test_log_prob_dimension_errors():
    net = tiny_net()
    std = Standardizer.identity(2, 2)
    with pytest.raises(ContractError):
        log_prob(net, std, np.zeros((1, 3)), np.zeros((1, 2)))
    with pytest.raises(ContractError):
        log_prob(net, std, np.zeros((3, 2)), np.zeros((2, 2)))


def test_draw_atoms():
    idx = draw_atoms(8, 5, np.random.default_rng(0))
    assert np.array_equal(idx[:, 0], np.arange(8))
    for j, row in enumerate(idx):
        assert len(set(row)) == 5 and j not in row[1:]
    with pytest.raises(ContractError):
        draw_atoms(4, 5, np.random.default_rng(0))


def test_single_atom_loss_is_zero():
    net = tiny_net()
    rng = np.random.default_rng(0)
    th, x = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    loss, grad = atomic_apt_loss(net, th, x, np.zeros(6), 1, rng)
    assert loss == 0.0
    assert np.all(grad == 0)


def test_identical_atoms_give_log_m():
    net = tiny_net()
    rng = np.random.default_rng(0)
    th = np.tile([[0.3, -0.2]], (16, 1))
    x = rng.normal(size=(16, 2))
    loss, _ = atomic_apt_loss(net, th, x, np.full(16, -3.0), 7, rng, want_grad=False)
    assert loss == pytest.approx(math.log(7), abs=1e-12)


def test_uniform_prior_gives_cross_entropy():
    net = tiny_net(seed=5)
    rng = np.random.default_rng(2)
    th, x = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
    loss, _ = atomic_apt_loss(net, th, x, np.full(10, -1.234), 4, np.random.default_rng(9), want_grad=False)
    atoms = draw_atoms(10, 4, np.random.default_rng(9))
    mix, _ = net.forward(x)
    lq, _ = mixture_log_prob(mix, th[atoms])
    assert loss == pytest.approx(float(-log_softmax(lq, axis=1)[:, 0].mean()), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8))
def test_atomic_loss_nonnegative(seed, m):
    net = tiny_net(seed)
    rng = np.random.default_rng(seed)
    th, x = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    loss, _ = atomic_apt_loss(net, th, x, rng.normal(size=8), m, rng, want_grad=False)
    assert loss >= 0.0


def _fd_check(net, fn):
    _, grad = fn()
    base = net.params.copy()
    fd = np.empty_like(base)
    h = 1e-6
    for i in range(base.size):
        net.params[i] = base[i] + h
        up, _ = fn(False)
        net.params[i] = base[i] - h
        dn, _ = fn(False)
        net.params[i] = base[i]
        fd[i] = (up - dn) / (2 * h)
    return grad, fd


@pytest.mark.parametrize("kind", ["atomic", "nll"])
def test_gradient_matches_finite_differences(kind):
    net = tiny_net(seed=11)
    assert net.n_weights <= 50
    rng = np.random.default_rng(3)
    th, x, lp = rng.normal(size=(12, 2)), rng.normal(size=(12, 2)), rng.normal(size=12)

    def fn(want=True):
        if kind == "nll":
            return nll_loss(net, th, x, want)
        return atomic_apt_loss(net, th, x, lp, 5, np.random.default_rng(7), want)

    grad, fd = _fd_check(net, fn)
    assert np.all(np.abs(grad - fd) <= 1e-4 * np.abs(fd) + 1e-8)


def _toy_data(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1))
    return x + rng.normal(size=(n, 1)), x


def test_training_is_deterministic_and_keeps_best():
    th, x = _toy_data(600, 0)
    prior = Prior([MarginalPrior.normal(0, 2)], ("t",))
    opts = TrainingOptions(batch_size=64, max_epochs=15, patience=5)
    runs = [train(None, th, x, prior, opts, seed=4, hidden=(8,), n_components=2) for _ in range(2)]
    (n1, _, h1), (n2, _, h2) = runs
    assert h1.val_loss == h2.val_loss and h1.train_loss[1:] == h2.train_loss[1:]
    assert np.array_equal(n1.params, n2.params)
    assert h1.best_val_loss <= h1.val_loss[0]
    assert h1.best_val_loss == min(h1.val_loss)


def test_training_rejects_out_of_support():
    prior = box_prior(1, 0, 1)
    with pytest.raises(ContractError, match="support"):
        train(None, [[2.0]] * 20, [[0.0]] * 20, prior, TrainingOptions(batch_size=8, n_atoms=2))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_reports_non_finite_loss():
    th, x = _toy_data(100, 1)
    x[5, 0] = np.inf
    prior = Prior([MarginalPrior.normal(0, 2)], ("t",))
    with pytest.raises(TrainingError, match="batch"):
        train(None, th, x, prior, TrainingOptions(batch_size=16, max_epochs=2), hidden=(4,), n_components=1)


@pytest.mark.parametrize("kw", [dict(n_atoms=1), dict(n_atoms=300), dict(loss="nsf")])
def test_training_options_contract(kw):
    with pytest.raises(ContractError):
        TrainingOptions(**kw)


@pytest.mark.slow
def test_toy_conditional_posterior_mean():
    th, x = _toy_data(20_000, 2)
    # theta = x + noise with x ~ N(0, 1): the marginal of theta is N(0, sqrt 2)
    prior = Prior([MarginalPrior.normal(0, math.sqrt(2))], ("t",))
    net, std, _ = train(None, th, x, prior, TrainingOptions(max_epochs=60), seed=1,
                        from_prior=np.ones(len(th), bool))
    draws, _ = sample_posterior(net, std, [0.7], 20_000, prior, np.random.default_rng(0))
    assert draws.mean() == pytest.approx(0.7, abs=0.1)


def test_sample_posterior_respects_support():
    net = constant_net([0.0, 0.0], log_scales=0.0, n_in=1)
    prior = box_prior(2, -1, 1)
    draws, leak = sample_posterior(net, Standardizer.identity(2, 1), [0.0], 3000, prior,
                                   np.random.default_rng(0))
    assert draws.shape == (3000, 2)
    assert prior.in_support(draws).all()
    # support mass of a standard bivariate normal on the box
    inside = (stats.norm.cdf(1) - stats.norm.cdf(-1)) ** 2
    assert leak == pytest.approx(1 - inside, abs=0.01)


def test_tight_net_at_center_has_no_leakage():
    net = constant_net([0.0, 0.0], log_scales=-7.0, n_in=1)
    _, leak = sample_posterior(net, Standardizer.identity(2, 1), [0.0], 2000, box_prior(2, -1, 1),
                               np.random.default_rng(1))
    assert leak == 0.0


def test_leakage_error():
    net = constant_net([50.0], log_scales=-3.0, n_in=1)
    with pytest.raises(LeakageError):
        sample_posterior(net, Standardizer.identity(1, 1), [0.0], 10, box_prior(1, -1, 1),
                         np.random.default_rng(0), probe=10_000)


def test_sample_posterior_dimension_error():
    net = constant_net([0.0], n_in=2)
    with pytest.raises(ContractError):
        sample_posterior(net, Standardizer.identity(1, 2), [0.0], 5, box_prior(1), np.random.default_rng(0))


def test_estimator_json_round_trip(tmp_path):
    net = MixtureDensityNetwork(40, 11, rng=np.random.default_rng(0))
    std = Standardizer.fit(np.random.default_rng(1).random((50, 11)), np.random.default_rng(2).random((50, 40)))
    est = Estimator(net, std, TrainingOptions(learning_rate=1e-3))
    est.save(tmp_path / "e.json")
    back = Estimator.load(tmp_path / "e.json")
    assert np.array_equal(back.net.params, net.params)
    assert back.net.hidden == net.hidden and back.options == est.options
    assert back.to_json() == est.to_json()
    th = np.random.default_rng(3).random((4, 11))
    x = np.random.default_rng(4).random((4, 40))
    assert np.array_equal(back.log_prob(th, x), est.log_prob(th, x))


def test_estimator_version_check():
    with pytest.raises(FormatError):
        Estimator.from_json('{"version": "other/9"}')


def test_objective_modes():
    from cohort_sbi.mdn import _objective

    net = tiny_net(seed=2)
    rng = np.random.default_rng(0)
    th, x, lp = rng.normal(size=(10, 2)), rng.normal(size=(10, 2)), rng.normal(size=10)
    all_prior = np.ones(10, bool)
    mixed = np.arange(10) < 4

    apt = TrainingOptions(batch_size=10, n_atoms=3, loss="apt")
    got, _ = _objective(net, th, x, lp, all_prior, apt, np.random.default_rng(1))
    assert got == nll_loss(net, th, x, False)[0]

    atomic = TrainingOptions(batch_size=10, n_atoms=3, loss="atomic")
    got, _ = _objective(net, th, x, lp, all_prior, atomic, np.random.default_rng(1))
    assert got == atomic_apt_loss(net, th, x, lp, 3, np.random.default_rng(1), False)[0]

    both = TrainingOptions(batch_size=10, n_atoms=3, loss="apt", combined_mle=True)
    got, grad = _objective(net, th, x, lp, mixed, both, np.random.default_rng(1))
    want = atomic_apt_loss(net, th, x, lp, 3, np.random.default_rng(1), False)[0] + nll_loss(net, th[:4], x[:4], False)[0]
    assert got == pytest.approx(want, abs=1e-12)
    assert grad.shape == net.params.shape
