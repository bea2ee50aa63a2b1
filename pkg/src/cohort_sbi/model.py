"""Parameter vector, trait distributions and the monthly conception kernel."""
from __future__ import annotations

import enum
import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from .errors import DomainError

AGE_MIN_YEARS = 10
AGE_MAX_YEARS = 50

PARAM_NAMES = (
    "mu_s", "sigma_s", "delta_r", "sigma_r", "mu_d", "sigma_d",
    "mu_b", "sigma_b", "kappa", "beta1", "beta2",
)
N_PARAMS = len(PARAM_NAMES)


@dataclass(frozen=True)
class ParameterVector:
    """The eleven behavioural parameters, in their fixed public order.

    Years for ``mu_s``, ``sigma_s``, ``delta_r``, ``sigma_r``; children for
    ``mu_d``, ``sigma_d``; months for ``mu_b``, ``sigma_b``.
    """

    mu_s: float
    sigma_s: float
    delta_r: float
    sigma_r: float
    mu_d: float
    sigma_d: float
    mu_b: float
    sigma_b: float
    kappa: float
    beta1: float
    beta2: float

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, float(getattr(self, f.name)))

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, values) -> "ParameterVector":
        values = np.asarray(values, dtype=float).ravel()
        if values.shape != (N_PARAMS,):
            raise DomainError(f"expected {N_PARAMS} parameters, got {values.size}")
        return cls(*values.tolist())

    def as_dict(self) -> dict[str, float]:
        return dict(zip(PARAM_NAMES, astuple(self)))

    def validate(self) -> "ParameterVector":
        problems = parameter_violations(self.to_array())
        if problems:
            raise DomainError("invalid parameter vector: " + "; ".join(problems))
        return self


def parameter_violations(values: np.ndarray) -> list[str]:
    """List human-readable invariant violations for one raw parameter row."""
    p = dict(zip(PARAM_NAMES, np.asarray(values, dtype=float)))
    out = []
    if not all(math.isfinite(v) for v in p.values()):
        out.append("non-finite component")
    for name in ("mu_s", "mu_d", "sigma_d", "mu_b"):
        if not p[name] > 0:
            out.append(f"{name}={p[name]} must be > 0")
    for name in ("sigma_s", "sigma_r", "sigma_b", "delta_r", "beta1", "beta2"):
        if not p[name] >= 0:
            out.append(f"{name}={p[name]} must be >= 0")
    # kappa = 0 (perfect contraception) is admitted as a limiting case
    if not 0 <= p["kappa"] < 1:
        out.append(f"kappa={p['kappa']} must lie in [0, 1)")
    return out


def valid_rows(theta: np.ndarray) -> np.ndarray:
    """Vectorised invariant check over an (n, 11) matrix."""
    t = np.atleast_2d(np.asarray(theta, dtype=float))
    mu_s, sig_s, d_r, sig_r, mu_d, sig_d, mu_b, sig_b, kap, b1, b2 = t.T
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(t).all(axis=1)
        ok &= (mu_s > 0) & (mu_d > 0) & (sig_d > 0) & (mu_b > 0)
        ok &= (sig_s >= 0) & (sig_r >= 0) & (sig_b >= 0) & (d_r >= 0)
        ok &= (b1 >= 0) & (b2 >= 0) & (kap >= 0) & (kap < 1)
    return ok


@dataclass(frozen=True)
class LognormalMoments:
    mu_ln: float
    sigma_ln: float


@dataclass(frozen=True)
class WeibullMoments:
    alpha: float
    log_lam: float  # kept in log space; lam underflows for tiny shapes

    @property
    def lam(self) -> float:
        return math.exp(self.log_lam)


def lognormal_params_from_moments(mean: float, sd: float) -> LognormalMoments:
    """Log-scale location and scale of the lognormal with the given mean and sd."""
    if not mean > 0:
        raise DomainError(f"lognormal mean must be > 0, got {mean}")
    if not sd >= 0:
        raise DomainError(f"lognormal sd must be >= 0, got {sd}")
    mu_ln = math.log(mean**2 / math.sqrt(mean**2 + sd**2))
    sigma_ln = math.sqrt(math.log1p(sd**2 / mean**2))
    return LognormalMoments(mu_ln, sigma_ln)


def weibull_params_from_moments(mean: float, sd: float) -> WeibullMoments:
    """Approximate Weibull shape/scale for a target mean and sd.

    The shape uses the power-law approximation ``(sd/mean) ** -1.086``, so the
    resulting sd only approximately matches the target.
    """
    if not mean > 0 or not sd > 0:
        raise DomainError(f"Weibull mean and sd must be > 0, got ({mean}, {sd})")
    log_ratio = math.log(sd) - math.log(mean)
    alpha = math.exp(-1.086 * log_ratio)
    try:
        log_lam = math.log(mean) - math.lgamma(1.0 + math.exp(1.086 * log_ratio))
    except OverflowError:
        log_lam = -math.inf  # the shape limit 0 with fixed mean puts all mass at 0
    return WeibullMoments(alpha, log_lam)


def fecundability(age, beta1: float, beta2: float):
    """Monthly conception probability without contraception at ``age`` years.

    Accepts scalars or arrays. The result is clamped to [0, 1].
    """
    a = np.asarray(age, dtype=float)
    if np.any((a < AGE_MIN_YEARS) | (a > AGE_MAX_YEARS)) or np.any(np.isnan(a)):
        raise DomainError(f"age must lie in [{AGE_MIN_YEARS}, {AGE_MAX_YEARS}] years")
    xs = (a - AGE_MIN_YEARS) / (AGE_MAX_YEARS - AGE_MIN_YEARS)
    phi = beta1 * 3 * xs * (1 - xs) ** 2 + beta2 * 3 * xs**2 * (1 - xs)
    phi = np.clip(phi, 0.0, 1.0)
    return float(phi) if phi.ndim == 0 else phi


@dataclass(frozen=True)
class WomanTraits:
    x_i: float  # age at sexual initiation, months
    r_i: float  # age at intentional reproduction, months
    d_i: int  # desired family size
    b_i: float  # desired birth spacing, months


@dataclass
class TraitArrays:
    """Column-oriented traits for a whole cohort."""

    x: np.ndarray
    r: np.ndarray
    d: np.ndarray
    b: np.ndarray

    def __len__(self):
        return len(self.x)

    def woman(self, i: int) -> WomanTraits:
        return WomanTraits(float(self.x[i]), float(self.r[i]), int(self.d[i]), float(self.b[i]))


def _lognormal_draws(mean: float, sd: float, z: np.ndarray) -> np.ndarray:
    if sd == 0:
        return np.full(z.shape, mean)
    m = lognormal_params_from_moments(mean, sd)
    return np.exp(m.mu_ln + m.sigma_ln * z)


DESIRED_CAP = 1_000_000


def round_half_up(v):
    return np.floor(np.asarray(v) + 0.5).astype(np.int64)


def sample_women(theta: ParameterVector, n: int, rng: np.random.Generator) -> TraitArrays:
    """Draw traits for ``n`` women.

    Variates are consumed in a fixed order (x, r, d, b; ``n`` each) whatever
    the parameter values, so the stream layout never depends on theta.
    """
    theta.validate()
    z_x = rng.standard_normal(n)
    z_r = rng.standard_normal(n)
    u_d = rng.random(n)
    z_b = rng.standard_normal(n)

    x = 12.0 * _lognormal_draws(theta.mu_s, theta.sigma_s, z_x)
    r = 12.0 * _lognormal_draws(theta.mu_s + theta.delta_r, theta.sigma_r, z_r)
    w = weibull_params_from_moments(theta.mu_d, theta.sigma_d)
    # log space: very small shapes would overflow; any cap above the
    # reachable parity leaves behaviour unchanged
    if w.log_lam == -math.inf or w.alpha == 0.0:
        d = np.zeros(n, dtype=np.int64)
    else:
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            log_d = w.log_lam + np.log(-np.log1p(-u_d)) / w.alpha
        d = round_half_up(np.exp(np.minimum(np.nan_to_num(log_d, nan=-np.inf), math.log(DESIRED_CAP))))
    b = _lognormal_draws(theta.mu_b, theta.sigma_b, z_b)
    return TraitArrays(x, r, d, b)


def sample_woman(theta: ParameterVector, rng: np.random.Generator) -> WomanTraits:
    return sample_women(theta, 1, rng).woman(0)


class IntentState(enum.Enum):
    NON_SUSCEPTIBLE = "non-susceptible"
    NOT_YET_ACTIVE = "not-yet-active"
    TRYING = "trying"
    CONTRACEPTING = "contracepting"


def is_trying(traits: WomanTraits, parity: int, months_since_last_birth, age_months: int) -> bool:
    if age_months < traits.r_i or parity >= traits.d_i:
        return False
    return parity == 0 or (months_since_last_birth is not None and months_since_last_birth >= traits.b_i)


def conception_probability(
    traits: WomanTraits,
    parity: int,
    months_since_last_birth,
    age_months: int,
    theta: ParameterVector,
    susceptible: bool = True,
) -> tuple[float, IntentState]:
    if not susceptible:
        return 0.0, IntentState.NON_SUSCEPTIBLE
    if age_months < traits.x_i:
        return 0.0, IntentState.NOT_YET_ACTIVE
    phi = fecundability(age_months / 12.0, theta.beta1, theta.beta2)
    if is_trying(traits, parity, months_since_last_birth, age_months):
        return phi, IntentState.TRYING
    kappa_eff = theta.kappa if parity < traits.d_i else theta.kappa**2
    return kappa_eff * phi, IntentState.CONTRACEPTING
