"""How well can scenario-1 summaries identify each parameter at all?

Trains a single-round (amortized) estimator on a large prior-simulation
budget and scores posterior means on held-out simulations. The posterior
mean minimises squared error, so with a well-fitted estimator the reported
normalized RMSE approximates the best any method can reach from ASFR alone
at the given cohort size. A k-nearest-neighbour regression over the same
simulations is printed as an estimator-free cross-check.

Usage: python3 scripts/information_ceiling.py [N_TRAIN] [N_WOMEN]
"""
import sys
import time

import numpy as np
from scipy.spatial import cKDTree

from cohort_sbi.mdn import TrainingOptions, sample_posterior, train
from cohort_sbi.priors import build_prior
from cohort_sbi.simulator import simulate_summaries

N_TEST = 300


def main(n_train=40_000, n_women=2000):
    prior = build_prior(1)
    n = n_train + N_TEST
    theta = prior.sample(n, np.random.default_rng(0))
    seeds = np.random.SeedSequence(1).generate_state(n, np.uint64)
    t0 = time.time()
    x = simulate_summaries(theta, n_women, seeds, "asfr")
    print(f"simulated {n} cohorts of {n_women} in {time.time() - t0:.0f}s", flush=True)
    tr, te = slice(0, n_train), slice(n_train, n)

    opts = TrainingOptions(learning_rate=1e-3, max_epochs=1000, patience=30)
    t0 = time.time()
    net, std, hist = train(None, theta[tr], x[tr], prior, opts, seed=0, from_prior=np.ones(n_train, bool))
    print(f"trained {hist.epochs} epochs in {time.time() - t0:.0f}s, best val loss {hist.best_val_loss:.3f}")
    means, sds = [], []
    for j in range(n_train, n):
        d, _ = sample_posterior(net, std, x[j], 2000, prior, np.random.default_rng(j))
        means.append(d.mean(0))
        sds.append(d.std(0))
    scale = prior.sd()
    err = (np.array(means) - theta[te]) / scale
    rows = {
        "mdn nrmse": np.sqrt((err**2).mean(0)),
        "mdn mean post sd": np.sqrt((np.array(sds) ** 2).mean(0)) / scale,
    }
    mu, sd = x[tr].mean(0), x[tr].std(0) + 1e-12
    tree = cKDTree((x[tr] - mu) / sd)
    _, idx = tree.query((x[te] - mu) / sd, k=25)
    knn = (theta[tr][idx].mean(1) - theta[te]) / scale
    rows["knn(25) nrmse"] = np.sqrt((knn**2).mean(0))

    print(" " * 18 + " ".join(f"{n:>8}" for n in prior.names))
    for label, v in rows.items():
        print(f"{label:<18}" + " ".join(f"{a:8.3f}" for a in v))


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:3]))
