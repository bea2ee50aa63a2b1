"""Compare estimator training variants on the desk-scale scenario-1 recovery folds.

Uses the same fold seeds as the acceptance suite (master seed 0).

Usage: python3 scripts/tune_recovery.py VARIANT [N_FOLDS]
"""
import sys
import time

from cohort_sbi.mdn import TrainingOptions
from cohort_sbi.priors import build_prior
from cohort_sbi.snpe import SnpeConfig
from cohort_sbi.validation import cross_validate

VARIANTS = {
    "atomic": TrainingOptions(loss="atomic"),
    "apt": TrainingOptions(loss="apt"),
    "apt_mle": TrainingOptions(loss="apt", combined_mle=True),
    "apt_lr1e3": TrainingOptions(loss="apt", learning_rate=1e-3),
    "apt_lr1e3_p30": TrainingOptions(loss="apt", learning_rate=1e-3, patience=30),
}

if __name__ == "__main__":
    name = sys.argv[1]
    n_folds = int(sys.argv[2]) if len(sys.argv) > 2 else 5
    cfg = SnpeConfig(rounds=3, n_sims=1000, n_women=2000, seed=0, training=VARIANTS[name])
    t0 = time.time()
    rep = cross_validate(build_prior(1), 1, n_folds, cfg)
    print(name, f"{time.time() - t0:.0f}s")
    print("\n".join(rep.summary_lines()))
