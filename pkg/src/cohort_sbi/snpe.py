"""Multi-round posterior estimation with proposal updates at the observed data."""
from __future__ import annotations

import ast
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .errors import ConfigurationError, ContractError, DomainError
from .io import read_manifest, read_matrix_csv, write_manifest, write_matrix_csv
from .mdn import Estimator, TrainingOptions, sample_posterior, train
from .model import parameter_violations
from .priors import Prior
from .simulator import Layout, simulate_summaries

log = logging.getLogger(__name__)

Simulator = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class SnpeConfig:
    rounds: int = 5
    n_sims: int = 2000
    n_women: int = 2000
    scenario: int = 1
    seed: int = 0
    n_posterior_draws: int = 5000
    hidden: tuple[int, ...] = (64, 64)
    n_components: int = 10
    training: TrainingOptions = field(default_factory=TrainingOptions)

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {self.rounds}")
        if self.n_sims < self.training.batch_size:
            raise ConfigurationError(
                f"n_sims ({self.n_sims}) must be >= batch size ({self.training.batch_size})"
            )
        if self.n_women < 1:
            raise ConfigurationError(f"n_women must be >= 1, got {self.n_women}")
        if self.scenario not in (1, 2, 3):
            raise ConfigurationError(f"scenario must be 1, 2 or 3, got {self.scenario}")

    @property
    def layout(self) -> Layout:
        return Layout.for_scenario(self.scenario)

    def manifest(self) -> dict[str, str]:
        out = {
            "snpe.rounds": self.rounds, "snpe.n_sims": self.n_sims,
            "snpe.n_women": self.n_women, "snpe.scenario": self.scenario,
            "snpe.seed": self.seed, "snpe.n_posterior_draws": self.n_posterior_draws,
            "snpe.hidden": " ".join(map(str, self.hidden)),
            "snpe.n_components": self.n_components,
        }
        for k, v in asdict(self.training).items():
            out[f"training.{k}"] = repr(v)
        return {k: str(v) for k, v in out.items()}

    @classmethod
    def from_manifest(cls, m: dict[str, str]) -> "SnpeConfig":
        opts = {f: ast.literal_eval(m[f"training.{f}"]) for f in TrainingOptions.__dataclass_fields__}
        return cls(
            rounds=int(m["snpe.rounds"]), n_sims=int(m["snpe.n_sims"]),
            n_women=int(m["snpe.n_women"]), scenario=int(m["snpe.scenario"]),
            seed=int(m["snpe.seed"]), n_posterior_draws=int(m["snpe.n_posterior_draws"]),
            hidden=tuple(int(h) for h in m["snpe.hidden"].split()),
            n_components=int(m["snpe.n_components"]), training=TrainingOptions(**opts),
        )


def cohort_simulator(n_women: int, layout: Layout) -> Simulator:
    def simulate(thetas, seeds):
        return simulate_summaries(thetas, n_women, seeds, layout)
    return simulate


@dataclass
class RoundLog:
    round: int
    n_new: int
    dataset_size: int
    proposal_leakage: float
    epochs: int
    best_epoch: int
    best_val_loss: float


@dataclass
class PosteriorArtifact:
    estimator: Estimator
    x_o: np.ndarray
    prior: Prior
    config: SnpeConfig
    rounds: list[RoundLog]
    draws: np.ndarray
    leakage: float

    @property
    def names(self):
        return self.prior.names

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.estimator.save(d / "estimator.json")
        write_matrix_csv(d / "draws.csv", list(self.names), self.draws.tolist())
        write_matrix_csv(
            d / "rounds.csv", list(RoundLog.__dataclass_fields__),
            [[getattr(r, k) for k in RoundLog.__dataclass_fields__] for r in self.rounds],
        )
        entries = {"artifact.version": "1", "cohort_sbi.version": __version__,
                   "numpy.version": np.__version__}
        entries.update(self.config.manifest())
        entries["posterior.leakage"] = repr(float(self.leakage))
        entries["x_o"] = " ".join(repr(float(v)) for v in self.x_o)
        entries["prior.names"] = " ".join(self.names)
        entries.update(self.prior.manifest())
        write_manifest(entries, d / "manifest.txt")
        return d

    @classmethod
    def load(cls, directory) -> "PosteriorArtifact":
        d = Path(directory)
        m = read_manifest(d / "manifest.txt")
        prior = Prior.from_manifest(m, tuple(m["prior.names"].split()))
        _, draws = read_matrix_csv(d / "draws.csv")
        header, rows = read_matrix_csv(d / "rounds.csv")
        rounds = [
            RoundLog(*[int(v) if k not in ("proposal_leakage", "best_val_loss") else float(v)
                       for k, v in zip(header, row)])
            for row in rows
        ]
        return cls(
            estimator=Estimator.load(d / "estimator.json"),
            x_o=np.array([float(v) for v in m["x_o"].split()]),
            prior=prior, config=SnpeConfig.from_manifest(m), rounds=rounds,
            draws=draws, leakage=float(m["posterior.leakage"]),
        )


def _seeds(master: int, *path: int, n: int) -> np.ndarray:
    return np.random.SeedSequence([master, *path]).generate_state(n, np.uint64)


def run_snpe(x_o, prior: Prior, config: SnpeConfig, simulator: Simulator | None = None) -> PosteriorArtifact:
    """Sequential estimation: prior proposals in round 1, posterior-at-x_o afterwards.

    ``simulator(thetas, seeds)`` maps an (n, d) parameter block to an (n, k)
    summary block; the cohort simulator is used when it is None, in which
    case ``x_o`` must match the scenario layout.
    """
    x_o = np.asarray(getattr(x_o, "to_array", lambda: x_o)(), dtype=float).ravel()
    if simulator is None:
        if x_o.size != config.layout.dim:
            raise ContractError(
                f"scenario {config.scenario} expects {config.layout.dim} summaries, got {x_o.size}"
            )
        simulator = cohort_simulator(config.n_women, config.layout)

    thetas, xs, flags, logs = [], [], [], []
    estimator = None
    for r in range(1, config.rounds + 1):
        prop_rng = np.random.default_rng(_seeds(config.seed, 1, r, n=4))
        if estimator is None:
            theta_r = prior.sample(config.n_sims, prop_rng)
            leak = 0.0
        else:
            theta_r, leak = estimator.sample(x_o, config.n_sims, prior, prop_rng)
        try:
            x_r = np.asarray(simulator(theta_r, _seeds(config.seed, 2, r, n=config.n_sims)), dtype=float)
        except DomainError:
            for row in theta_r:
                if parameter_violations(row):
                    log.error("simulator rejected theta=%s", row.tolist())
                    break
            raise
        if not np.all(np.isfinite(x_r)):
            raise DomainError(f"simulator returned non-finite summaries in round {r}")
        thetas.append(theta_r)
        xs.append(x_r)
        flags.append(np.full(theta_r.shape[0], estimator is None))
        all_theta = np.concatenate(thetas)
        all_x = np.concatenate(xs)
        train_seed = int(_seeds(config.seed, 3, r, n=1)[0])
        net, std, hist = train(
            estimator.net if estimator else None, all_theta, all_x, prior, config.training,
            seed=train_seed, standardizer=estimator.standardizer if estimator else None,
            hidden=config.hidden, n_components=config.n_components, from_prior=np.concatenate(flags),
        )
        estimator = Estimator(net, std, config.training)
        logs.append(RoundLog(r, theta_r.shape[0], all_theta.shape[0], float(leak),
                             hist.epochs, hist.best_epoch, float(hist.best_val_loss)))
        log.info("round %d: %d rows, val loss %.4f (epoch %d/%d), leakage %.3f",
                 r, all_theta.shape[0], hist.best_val_loss, hist.best_epoch, hist.epochs, leak)
    draw_rng = np.random.default_rng(_seeds(config.seed, 4, n=4))
    draws, leak = estimator.sample(x_o, config.n_posterior_draws, prior, draw_rng)
    return PosteriorArtifact(estimator, x_o, prior, config, logs, draws, float(leak))


@dataclass
class PosteriorSummary:
    names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray

    def rows(self):
        return zip(self.names, self.mean, self.sd, self.lo95, self.hi95)


def summarize_draws(draws: np.ndarray, names) -> PosteriorSummary:
    draws = np.atleast_2d(draws)
    return PosteriorSummary(
        tuple(names), draws.mean(axis=0), draws.std(axis=0, ddof=1) if len(draws) > 1 else np.zeros(draws.shape[1]),
        np.quantile(draws, 0.025, axis=0), np.quantile(draws, 0.975, axis=0),
    )


def posterior_summaries(artifact: PosteriorArtifact, n_draws: int = 5000, seed: int = 0) -> PosteriorSummary:
    """Mean, sd and central 95% interval from fresh support-restricted draws."""
    draws, _ = sample_posterior(artifact.estimator.net, artifact.estimator.standardizer,
                                artifact.x_o, n_draws, artifact.prior, np.random.default_rng(seed))
    return summarize_draws(draws, artifact.names)
