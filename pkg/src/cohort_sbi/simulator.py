"""Monthly life-course microsimulation and its reduction to rates and histograms.

Each woman owns a counter-based uniform stream keyed on (cohort key, woman
index, month), so every result is independent of thread count and of the
order in which women are processed.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .errors import DomainError
from .histograms import Histogram, integer_edges
from .model import ParameterVector, TraitArrays, sample_women, valid_rows

# TBB on this platform is too old; OpenMP is the portable choice.
numba.config.THREADING_LAYER = "omp"

log = logging.getLogger(__name__)

FIRST_MONTH = 120  # age 10
LAST_MONTH = 599  # last month at which a conception may occur
GESTATION = 9
AMENORRHEA = 3
N_AGES = 40
AGES = np.arange(10, 50)
MAX_BIRTHS = (LAST_MONTH - FIRST_MONTH + 1) // (GESTATION + AMENORRHEA) + 1
INTERVAL_EDGES = np.concatenate([np.arange(12.0, 121.0, 6.0), [np.inf]])

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _uniform(woman_key, month):
    z = _mix64(woman_key + np.uint64(month) * _GOLDEN)
    return np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _woman_key(cohort_key, woman):
    return _mix64(cohort_key ^ _mix64(np.uint64(woman) + _GOLDEN))


@njit(cache=True)
def _simulate_woman(x, r, d, b, beta1, beta2, kappa, key, conc_out, plan_out):
    """Fill conception months / planned flags for one woman; return the count."""
    n = 0
    last_birth = -1
    susceptible_from = 0
    kappa2 = kappa * kappa
    for m in range(FIRST_MONTH, LAST_MONTH + 1):
        if m < susceptible_from or m < x:
            continue
        xs = (m / 12.0 - 10.0) / 40.0
        phi = beta1 * 3.0 * xs * (1.0 - xs) ** 2 + beta2 * 3.0 * xs * xs * (1.0 - xs)
        if phi < 0.0:
            phi = 0.0
        elif phi > 1.0:
            phi = 1.0
        trying = m >= r and n < d and (n == 0 or (m - last_birth) >= b)
        if trying:
            p = phi
        elif n < d:
            p = kappa * phi
        else:
            p = kappa2 * phi
        if _uniform(key, m) < p:
            conc_out[n] = m
            plan_out[n] = trying
            n += 1
            last_birth = m + GESTATION
            susceptible_from = m + GESTATION + AMENORRHEA
    return n


@njit(cache=True, parallel=True)
def _simulate_cohort_kernel(x, r, d, b, beta1, beta2, kappa, cohort_key):
    n_women = x.shape[0]
    conc = np.full((n_women, MAX_BIRTHS), -1, dtype=np.int64)
    plan = np.zeros((n_women, MAX_BIRTHS), dtype=np.bool_)
    counts = np.zeros(n_women, dtype=np.int64)
    for i in prange(n_women):
        key = _woman_key(cohort_key, i)
        counts[i] = _simulate_woman(x[i], r[i], d[i], b[i], beta1, beta2, kappa, key, conc[i], plan[i])
    return conc, plan, counts


@njit(cache=True, parallel=True)
def _batch_counts_kernel(x, r, d, b, beta1, beta2, kappa, cohort_keys):
    n_sims, n_women = x.shape
    total = np.zeros((n_sims, N_AGES), dtype=np.int64)
    unplanned = np.zeros((n_sims, N_AGES), dtype=np.int64)
    for s in prange(n_sims):
        conc = np.empty(MAX_BIRTHS, dtype=np.int64)
        plan = np.empty(MAX_BIRTHS, dtype=np.bool_)
        for i in range(n_women):
            key = _woman_key(cohort_keys[s], i)
            k = _simulate_woman(x[s, i], r[s, i], d[s, i], b[s, i],
                                beta1[s], beta2[s], kappa[s], key, conc, plan)
            for j in range(k):
                age = (conc[j] + GESTATION) // 12 - 10
                if age < N_AGES:
                    total[s, age] += 1
                    if not plan[j]:
                        unplanned[s, age] += 1
    return total, unplanned


def set_threads(n: int | None) -> None:
    """Cap worker threads for the compiled kernels (None = all cores).

    Requests above the pool size (``NUMBA_NUM_THREADS``) are clamped.
    """
    top = numba.config.NUMBA_NUM_THREADS
    if n is not None and int(n) > top:
        log.warning("requested %d threads, pool has %d", int(n), top)
    numba.set_num_threads(top if n is None else min(max(1, int(n)), top))


def _check_seed(seed) -> int:
    if isinstance(seed, (float, np.floating)):
        raise DomainError(f"seed must be an integer, got {seed!r}")
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def _streams(seed: int) -> tuple[np.random.Generator, np.uint64]:
    """Trait generator and month-stream key, both derived from one cohort seed."""
    ss = np.random.SeedSequence(seed)
    trait_ss, month_ss = ss.spawn(2)
    return np.random.default_rng(trait_ss), month_ss.generate_state(1, np.uint64)[0]


@dataclass
class CohortResult:
    """Full synthetic histories: one row per birth plus per-woman traits."""

    woman_id: np.ndarray
    mother_age_months: np.ndarray
    conception_month: np.ndarray
    planned: np.ndarray
    traits: TraitArrays
    n_women: int
    window: tuple[int, int] = (FIRST_MONTH, LAST_MONTH + 1)

    @property
    def n_births(self) -> int:
        return int(self.woman_id.size)

    def parity(self) -> np.ndarray:
        return np.bincount(self.woman_id, minlength=self.n_women)


def simulate_cohort(theta: ParameterVector, n_women: int, seed: int) -> CohortResult:
    """Simulate ``n_women`` life courses from age 10 to 50 in monthly steps."""
    theta.validate()
    if n_women < 1:
        raise DomainError(f"n_women must be >= 1, got {n_women}")
    rng, key = _streams(_check_seed(seed))
    traits = sample_women(theta, n_women, rng)
    conc, plan, counts = _simulate_cohort_kernel(
        traits.x, traits.r, traits.d, traits.b, theta.beta1, theta.beta2, theta.kappa, key
    )
    mask = np.arange(MAX_BIRTHS)[None, :] < counts[:, None]
    woman_id = np.nonzero(mask)[0]
    conception = conc[mask]
    return CohortResult(
        woman_id=woman_id.astype(np.int64),
        mother_age_months=conception + GESTATION,
        conception_month=conception,
        planned=plan[mask],
        traits=traits,
        n_women=n_women,
    )


def _age_counts(age_months: np.ndarray) -> np.ndarray:
    idx = age_months // 12 - 10
    idx = idx[(idx >= 0) & (idx < N_AGES)]
    return np.bincount(idx, minlength=N_AGES)


def compute_asfr(result: CohortResult) -> np.ndarray:
    """Births per person-year at single ages 10..49 (denominator = cohort size)."""
    return _age_counts(result.mother_age_months) / result.n_women


def compute_asufr(result: CohortResult) -> np.ndarray:
    return _age_counts(result.mother_age_months[~result.planned]) / result.n_women


class Layout(enum.Enum):
    ASFR = "asfr"
    ASFR_ASUFR = "asfr+asufr"

    @property
    def dim(self) -> int:
        return N_AGES if self is Layout.ASFR else 2 * N_AGES

    @classmethod
    def for_scenario(cls, scenario: int) -> "Layout":
        return cls.ASFR_ASUFR if scenario == 3 else cls.ASFR


@dataclass
class SummaryVector:
    asfr: np.ndarray
    asufr: np.ndarray | None = None

    @property
    def layout(self) -> Layout:
        return Layout.ASFR if self.asufr is None else Layout.ASFR_ASUFR

    def to_array(self) -> np.ndarray:
        if self.asufr is None:
            return np.asarray(self.asfr, dtype=float).copy()
        return np.concatenate([self.asfr, self.asufr]).astype(float)

    @classmethod
    def from_array(cls, values) -> "SummaryVector":
        values = np.asarray(values, dtype=float)
        if values.size == N_AGES:
            return cls(values.copy())
        if values.size == 2 * N_AGES:
            return cls(values[:N_AGES].copy(), values[N_AGES:].copy())
        raise DomainError(f"summary vector must have 40 or 80 entries, got {values.size}")


def summarize(result: CohortResult, layout: Layout | str = Layout.ASFR) -> SummaryVector:
    layout = Layout(layout)
    asfr = compute_asfr(result)
    if layout is Layout.ASFR:
        return SummaryVector(asfr)
    return SummaryVector(asfr, compute_asufr(result))


def simulate_summaries(thetas, n_women: int, seeds, layout: Layout | str = Layout.ASFR) -> np.ndarray:
    """Summary vectors for many parameter rows, one cohort each.

    Row ``j`` equals ``summarize(simulate_cohort(thetas[j], n_women, seeds[j]))``
    exactly; this path just skips materialising birth records.
    """
    layout = Layout(layout)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if isinstance(seeds, np.ndarray):
        if seeds.dtype.kind == "f":
            raise DomainError("seeds must be integers, not floats")
        seeds = seeds.ravel().tolist()
    elif not isinstance(seeds, (list, tuple)):
        seeds = [seeds]
    seeds = [_check_seed(s) for s in seeds]
    if len(seeds) != thetas.shape[0]:
        raise DomainError("need one seed per parameter row")
    if n_women < 1:
        raise DomainError(f"n_women must be >= 1, got {n_women}")
    bad = np.nonzero(~valid_rows(thetas))[0]
    if bad.size:
        ParameterVector.from_array(thetas[bad[0]]).validate()
    n = thetas.shape[0]
    x = np.empty((n, n_women))
    r = np.empty((n, n_women))
    d = np.empty((n, n_women), dtype=np.int64)
    b = np.empty((n, n_women))
    keys = np.empty(n, dtype=np.uint64)
    for j in range(n):
        rng, keys[j] = _streams(seeds[j])
        t = sample_women(ParameterVector.from_array(thetas[j]), n_women, rng)
        x[j], r[j], d[j], b[j] = t.x, t.r, t.d, t.b
    total, unplanned = _batch_counts_kernel(
        x, r, d, b,
        np.ascontiguousarray(thetas[:, 9]), np.ascontiguousarray(thetas[:, 10]),
        np.ascontiguousarray(thetas[:, 8]), keys,
    )
    asfr = total / n_women
    if layout is Layout.ASFR:
        return asfr
    return np.concatenate([asfr, unplanned / n_women], axis=1)


@dataclass
class MicroDistributions:
    age_first_sex: Histogram
    desired_family_size: Histogram
    birth_intervals: Histogram

    def items(self):
        return (
            ("age_first_sex", self.age_first_sex),
            ("desired_family_size", self.desired_family_size),
            ("birth_intervals", self.birth_intervals),
        )


def birth_intervals(result: CohortResult) -> np.ndarray:
    """Month gaps between consecutive births of the same woman."""
    order = np.lexsort((result.mother_age_months, result.woman_id))
    w = result.woman_id[order]
    a = result.mother_age_months[order]
    same = w[1:] == w[:-1]
    return (a[1:] - a[:-1])[same]


def extract_micro_distributions(result: CohortResult) -> MicroDistributions:
    first_sex_years = np.floor(result.traits.x / 12.0)
    dfs = result.traits.d.astype(float)
    return MicroDistributions(
        age_first_sex=Histogram.from_values(first_sex_years, integer_edges(first_sex_years)),
        desired_family_size=Histogram.from_values(dfs, integer_edges(dfs)),
        birth_intervals=Histogram.from_values(birth_intervals(result), INTERVAL_EDGES),
    )
