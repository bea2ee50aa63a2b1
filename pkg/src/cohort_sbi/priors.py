"""Scenario priors over the parameter vector: independent marginals only."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, special, stats

from .errors import ConfigurationError, DomainError, FormatError, NumericError
from .histograms import Histogram, read_histogram_csv
from .model import AGE_MAX_YEARS, AGE_MIN_YEARS, N_PARAMS, PARAM_NAMES


@dataclass(frozen=True)
class MarginalPrior:
    """One-dimensional prior.

    ``family`` is one of ``gamma`` (shape, rate), ``uniform`` (lo, hi),
    ``beta`` (a, b), ``empirical`` (bin edges, bin masses) or ``normal``
    (loc, scale). The normal family exists for toy problems; the demographic
    scenarios never use it.
    """

    family: str
    params: tuple
    histogram: Histogram | None = field(default=None, compare=False)

    @staticmethod
    def gamma(shape, rate):
        if not (shape > 0 and rate > 0):
            raise DomainError(f"gamma needs shape, rate > 0, got ({shape}, {rate})")
        return MarginalPrior("gamma", (float(shape), float(rate)))

    @staticmethod
    def uniform(lo, hi):
        if not lo < hi:
            raise DomainError(f"uniform needs lo < hi, got ({lo}, {hi})")
        return MarginalPrior("uniform", (float(lo), float(hi)))

    @staticmethod
    def beta(a, b):
        if not (a > 0 and b > 0):
            raise DomainError(f"beta needs a, b > 0, got ({a}, {b})")
        return MarginalPrior("beta", (float(a), float(b)))

    @staticmethod
    def normal(loc, scale):
        if not scale > 0:
            raise DomainError(f"normal needs scale > 0, got {scale}")
        return MarginalPrior("normal", (float(loc), float(scale)))

    @staticmethod
    def empirical(edges, masses):
        edges = np.asarray(edges, dtype=float)
        masses = np.asarray(masses, dtype=float)
        if masses.size == 0 or np.any(~np.isfinite(masses)) or np.any(masses < 0):
            raise FormatError("empirical prior masses must be finite and non-negative")
        total = masses.sum()
        if not total > 0:
            raise FormatError("empirical prior masses sum to zero")
        if np.any(~np.isfinite(edges)):
            raise FormatError("empirical prior bin edges must be finite")
        hist = Histogram(edges, masses / total)
        return MarginalPrior(
            "empirical",
            (tuple(hist.edges.tolist()), tuple(hist.masses.tolist())),
            histogram=hist,
        )

    @property
    def _dist(self):
        p = self.params
        if self.family == "gamma":
            return stats.gamma(p[0], scale=1.0 / p[1])
        if self.family == "uniform":
            return stats.uniform(p[0], p[1] - p[0])
        if self.family == "beta":
            return stats.beta(*p)
        if self.family == "normal":
            return stats.norm(*p)
        raise AttributeError(self.family)

    @property
    def support(self) -> tuple[float, float]:
        if self.family == "gamma":
            return 0.0, math.inf
        if self.family == "uniform":
            return self.params
        if self.family == "beta":
            return 0.0, 1.0
        if self.family == "normal":
            return -math.inf, math.inf
        return float(self.histogram.edges[0]), float(self.histogram.edges[-1])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        p = self.params
        if self.family == "gamma":
            return rng.gamma(p[0], 1.0 / p[1], size=n)
        if self.family == "uniform":
            return rng.uniform(p[0], p[1], size=n)
        if self.family == "beta":
            return rng.beta(p[0], p[1], size=n)
        if self.family == "normal":
            return rng.normal(p[0], p[1], size=n)
        h = self.histogram
        k = rng.choice(h.masses.size, size=n, p=h.masses)
        return h.lo[k] + rng.random(n) * (h.hi[k] - h.lo[k])

    def log_pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.family == "empirical":
            h = self.histogram
            k = np.searchsorted(h.edges, x, side="right") - 1
            k = np.where(x == h.edges[-1], h.masses.size - 1, k)
            inside = (k >= 0) & (k < h.masses.size)
            dens = np.zeros(x.shape)
            kk = np.clip(k, 0, h.masses.size - 1)
            dens[inside] = (h.masses[kk] / (h.hi[kk] - h.lo[kk]))[inside]
            with np.errstate(divide="ignore"):
                return np.log(dens)
        if self.family == "uniform":
            lo, hi = self.params
            return np.where((x >= lo) & (x <= hi), -math.log(hi - lo), -np.inf)
        if self.family in ("gamma", "beta"):
            lo, hi = self.support
            with np.errstate(divide="ignore"):
                out = self._dist.logpdf(x)
            return np.where((x > lo) & (x < hi), out, -np.inf)
        return self._dist.logpdf(x)

    def mean(self) -> float:
        if self.family == "empirical":
            h = self.histogram
            return float(np.sum(h.masses * 0.5 * (h.lo + h.hi)))
        return float(self._dist.mean())

    def sd(self) -> float:
        if self.family == "empirical":
            h = self.histogram
            m2 = np.sum(h.masses * (h.lo**2 + h.lo * h.hi + h.hi**2) / 3.0)
            return float(math.sqrt(max(m2 - self.mean() ** 2, 0.0)))
        return float(self._dist.std())

    def quantile(self, q):
        if self.family == "empirical":
            h = self.histogram
            cdf = np.concatenate([[0.0], np.cumsum(h.masses)])
            return np.interp(q, cdf, h.edges)
        return self._dist.ppf(q)

    def describe(self) -> dict[str, str]:
        if self.family == "empirical":
            h = self.histogram
            return {
                "family": "empirical",
                "edges": " ".join(repr(float(e)) for e in h.edges),
                "masses": " ".join(repr(float(m)) for m in h.masses),
            }
        names = {
            "gamma": ("shape", "rate"), "uniform": ("lo", "hi"),
            "beta": ("a", "b"), "normal": ("loc", "scale"),
        }[self.family]
        out = {"family": self.family}
        out.update({k: repr(v) for k, v in zip(names, self.params)})
        return out


class Prior:
    """Independent product of marginals, aligned with a parameter ordering."""

    def __init__(self, marginals, names=PARAM_NAMES):
        if len(marginals) != len(names):
            raise DomainError(f"need {len(names)} marginals, got {len(marginals)}")
        self.marginals = list(marginals)
        self.names = tuple(names)

    @property
    def dim(self) -> int:
        return len(self.marginals)

    def __getitem__(self, name: str) -> MarginalPrior:
        return self.marginals[self.names.index(name)]

    def __eq__(self, other):
        return isinstance(other, Prior) and self.names == other.names and self.marginals == other.marginals

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.column_stack([m.sample(n, rng) for m in self.marginals])

    def marginal_log_densities(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        return np.column_stack([m.log_pdf(theta[:, k]) for k, m in enumerate(self.marginals)])

    def log_density(self, theta):
        theta = np.asarray(theta, dtype=float)
        out = self.marginal_log_densities(theta).sum(axis=1)
        return float(out[0]) if theta.ndim == 1 else out

    def in_support(self, theta) -> np.ndarray:
        return np.isfinite(self.marginal_log_densities(theta)).all(axis=1)

    def mean(self) -> np.ndarray:
        return np.array([m.mean() for m in self.marginals])

    def sd(self) -> np.ndarray:
        return np.array([m.sd() for m in self.marginals])

    def manifest(self) -> dict[str, str]:
        out = {}
        for name, m in zip(self.names, self.marginals):
            for k, v in m.describe().items():
                out[f"prior.{name}.{k}"] = v
        return out

    @classmethod
    def from_manifest(cls, entries: dict[str, str], names=PARAM_NAMES) -> "Prior":
        marginals = []
        for name in names:
            fam = entries.get(f"prior.{name}.family")
            if fam is None:
                raise FormatError(f"manifest lacks prior.{name}.family")

            def get(key):
                return float(entries[f"prior.{name}.{key}"])

            if fam == "empirical":
                edges = [float(v) for v in entries[f"prior.{name}.edges"].split()]
                masses = [float(v) for v in entries[f"prior.{name}.masses"].split()]
                marginals.append(MarginalPrior.empirical(edges, masses))
            elif fam == "gamma":
                marginals.append(MarginalPrior.gamma(get("shape"), get("rate")))
            elif fam == "uniform":
                marginals.append(MarginalPrior.uniform(get("lo"), get("hi")))
            elif fam == "beta":
                marginals.append(MarginalPrior.beta(get("a"), get("b")))
            elif fam == "normal":
                marginals.append(MarginalPrior.normal(get("loc"), get("scale")))
            else:
                raise FormatError(f"unknown prior family {fam!r} for {name}")
        return cls(marginals, names)


def _gamma_ratio_gap(log_shape, target_log_ratio, lo_q, hi_q):
    a = math.exp(log_shape)
    return math.log(special.gammaincinv(a, hi_q) / special.gammaincinv(a, lo_q)) - target_log_ratio


def fit_gamma_to_quantiles(q025: float, q975: float, levels=(0.025, 0.975)) -> MarginalPrior:
    """Gamma whose lower/upper quantiles at ``levels`` equal the given values.

    The quantile ratio depends on the shape only, so the shape is found by a
    bracketed root search and the rate follows from the lower quantile.
    """
    if not 0 < q025 < q975:
        raise DomainError(f"need 0 < q025 < q975, got ({q025}, {q975})")
    target = math.log(q975 / q025)
    lo_q, hi_q = levels
    lo_ls, hi_ls = math.log(1e-2), math.log(1e8)
    f_lo = _gamma_ratio_gap(lo_ls, target, lo_q, hi_q)
    f_hi = _gamma_ratio_gap(hi_ls, target, lo_q, hi_q)
    if not f_lo > 0 > f_hi:
        raise NumericError(f"quantile ratio {q975 / q025:g} outside the fittable range")
    log_shape, info = optimize.brentq(
        _gamma_ratio_gap, lo_ls, hi_ls, args=(target, lo_q, hi_q),
        xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500, full_output=True,
    )
    if not info.converged:
        raise NumericError("gamma quantile fit did not converge")
    shape = math.exp(log_shape)
    rate = special.gammaincinv(shape, lo_q) / q025
    return MarginalPrior.gamma(shape, rate)


def gamma_from_mean_cv(mean: float, cv: float) -> MarginalPrior:
    shape = 1.0 / cv**2
    return MarginalPrior.gamma(shape, shape / mean)


def load_empirical_marginal(source) -> MarginalPrior:
    """Piecewise-constant marginal from a ``bin_lo,bin_hi,mass`` CSV or a Histogram."""
    hist = source if isinstance(source, Histogram) else read_histogram_csv(source)
    return MarginalPrior.empirical(hist.edges, hist.masses)


@dataclass
class PriorConfig:
    """Hyperparameter choices for the weak prior plus scenario-2 sources.

    The dispersion priors and the kappa beta are artifact choices; only the
    mu_s / mu_d intervals and the delta_r / mu_b ranges are external targets.
    """

    mu_s_interval: tuple[float, float] = (14.4, 28.9)
    mu_d_interval: tuple[float, float] = (1.9, 8.1)
    delta_r_range: tuple[float, float] = (0.0, 8.0)
    mu_b_range: tuple[float, float] = (10.0, 100.0)
    kappa_beta: tuple[float, float] = (2.0, 8.0)
    sigma_s_mean: float = 3.0
    sigma_r_mean: float = 3.0
    sigma_d_mean: float = 1.5
    sigma_b_mean: float = 12.0
    sigma_cv: float = 0.5
    beta_upper: float = 0.9
    mu_d_histogram: str | Path | Histogram | None = None
    delta_r_histogram: str | Path | Histogram | None = None
    mu_b_histogram: str | Path | Histogram | None = None


def build_prior(scenario: int, config: PriorConfig | None = None) -> Prior:
    config = config or PriorConfig()
    if scenario not in (1, 2, 3):
        raise ConfigurationError(f"scenario must be 1, 2 or 3, got {scenario}")
    m = {
        "mu_s": fit_gamma_to_quantiles(*config.mu_s_interval),
        "sigma_s": gamma_from_mean_cv(config.sigma_s_mean, config.sigma_cv),
        "delta_r": MarginalPrior.uniform(*config.delta_r_range),
        "sigma_r": gamma_from_mean_cv(config.sigma_r_mean, config.sigma_cv),
        "mu_d": fit_gamma_to_quantiles(*config.mu_d_interval),
        "sigma_d": gamma_from_mean_cv(config.sigma_d_mean, config.sigma_cv),
        "mu_b": MarginalPrior.uniform(*config.mu_b_range),
        "sigma_b": gamma_from_mean_cv(config.sigma_b_mean, config.sigma_cv),
        "kappa": MarginalPrior.beta(*config.kappa_beta),
        "beta1": MarginalPrior.uniform(0.0, config.beta_upper),
        "beta2": MarginalPrior.uniform(0.0, config.beta_upper),
    }
    if scenario == 2:
        sources = {
            "mu_d": config.mu_d_histogram,
            "delta_r": config.delta_r_histogram,
            "mu_b": config.mu_b_histogram,
        }
        missing = [k for k, v in sources.items() if v is None]
        if missing:
            raise ConfigurationError(
                "scenario 2 needs informative histograms for: " + ", ".join(missing)
            )
        for name, src in sources.items():
            m[name] = load_empirical_marginal(src)
            lo, _ = m[name].support
            if name in ("mu_d", "mu_b") and lo <= 0:
                raise ConfigurationError(f"{name} histogram must lie in (0, inf)")
            if name == "delta_r" and lo < 0:
                raise ConfigurationError("delta_r histogram must lie in [0, inf)")
    assert len(m) == N_PARAMS
    return Prior([m[name] for name in PARAM_NAMES])


def fecundability_envelope(prior: Prior, ages, n: int = 10_000, seed: int = 0, level: float = 0.95):
    """Central ``level`` band of prior-implied fecundability at each age.

    Returns (lo, hi) arrays and the share of draws for which the curve hit
    the [0, 1] clamp anywhere on ``ages``.
    """
    rng = np.random.default_rng(seed)
    draws = prior.sample(n, rng)
    b1 = draws[:, PARAM_NAMES.index("beta1")]
    b2 = draws[:, PARAM_NAMES.index("beta2")]
    ages = np.asarray(ages, dtype=float)
    xs = (ages - AGE_MIN_YEARS) / (AGE_MAX_YEARS - AGE_MIN_YEARS)
    raw = b1[:, None] * 3 * xs * (1 - xs) ** 2 + b2[:, None] * 3 * xs**2 * (1 - xs)
    clamp_share = float(np.mean(np.any(raw > 1.0, axis=1)))
    phi = np.clip(raw, 0.0, 1.0)
    tail = (1 - level) / 2
    return np.quantile(phi, tail, axis=0), np.quantile(phi, 1 - tail, axis=0), clamp_share
