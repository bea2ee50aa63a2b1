"""Command-line entry point: ``cohort-sbi <subcommand> ...``.

Failures print one line ``error: <ErrorClass>: <message>`` to stderr and exit
non-zero (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CohortSBIError, ConsistencyError, FormatError
from .histograms import read_histogram_csv, write_histogram_csv
from .io import (
    MICRO_OUTCOMES, load_observed, read_manifest, write_births_csv, write_manifest, write_rate_csv,
    write_matrix_csv, write_summary_csv, write_traits_csv,
)
from .mdn import TrainingOptions
from .model import PARAM_NAMES, ParameterVector
from .priors import PriorConfig, build_prior, fecundability_envelope
from .simulator import (
    Layout, extract_micro_distributions, set_threads, simulate_cohort, summarize,
)
from .snpe import PosteriorArtifact, SnpeConfig, run_snpe, summarize_draws
from .validation import cross_validate, posterior_predictive_check, validate_micro

SEED_ENV = "COHORT_SBI_SEED"
EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(CohortSBIError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed(args) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return args.seed


def _theta(args) -> ParameterVector:
    values = dict.fromkeys(PARAM_NAMES)
    if args.theta:
        parts = [p for p in args.theta.split(",") if p.strip()]
        if len(parts) != len(PARAM_NAMES):
            raise UsageError(f"--theta needs {len(PARAM_NAMES)} comma-separated values, got {len(parts)}")
        values.update(zip(PARAM_NAMES, parts))
    for item in args.param or []:
        name, _, val = item.partition("=")
        if name not in values:
            raise UsageError(f"unknown parameter {name!r}")
        values[name] = val
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise UsageError("missing parameter(s): " + ", ".join(missing))
    try:
        return ParameterVector(**{k: float(v) for k, v in values.items()}).validate()
    except ValueError as exc:
        if isinstance(exc, CohortSBIError):
            raise
        raise UsageError(f"non-numeric parameter value ({exc})") from None


def _prior_config(args) -> PriorConfig:
    cfg = PriorConfig()
    for attr in ("mu_d_histogram", "delta_r_histogram", "mu_b_histogram"):
        val = getattr(args, attr, None)
        if val is not None:
            if not Path(val).exists():
                raise FormatError(f"{val}: file not found")
            setattr(cfg, attr, val)
    for attr in ("mu_s_interval", "mu_d_interval"):
        val = getattr(args, attr, None)
        if val is not None:
            setattr(cfg, attr, tuple(val))
    return cfg


def _snpe_config(args, scenario: int, seed: int) -> SnpeConfig:
    opts = TrainingOptions(batch_size=args.batch_size, max_epochs=args.max_epochs)
    return SnpeConfig(rounds=args.rounds, n_sims=args.sims, n_women=args.n_women,
                      scenario=scenario, seed=seed, n_posterior_draws=args.draws, training=opts)


def _run_manifest(argv, seed, extra=None) -> dict:
    out = {
        "command": json.dumps(list(argv)),
        "seed": seed,
        "cohort_sbi.version": __version__,
        "numpy.version": np.__version__,
    }
    out.update(extra or {})
    return out


def _out_dir(args) -> Path:
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


# subcommands -------------------------------------------------------------

def cmd_simulate(args, argv):
    theta = _theta(args)
    seed = _seed(args)
    out = _out_dir(args)
    result = simulate_cohort(theta, args.n_women, seed)
    write_births_csv(result, out / "births.csv")
    write_traits_csv(result, out / "traits.csv")
    summary = summarize(result, Layout.ASFR_ASUFR)
    write_summary_csv(summary, out / "rates.csv")
    # single-rate files in the observed-data schema, ready for infer / ppc
    write_rate_csv(summary.asfr, out / "asfr.csv")
    write_rate_csv(summary.asufr, out / "asufr.csv")
    for name, hist in extract_micro_distributions(result).items():
        write_histogram_csv(hist, out / f"micro_{name}.csv")
    extra = {f"theta.{k}": repr(v) for k, v in theta.as_dict().items()}
    extra.update({"n_women": args.n_women, "n_births": result.n_births})
    write_manifest(_run_manifest(argv, seed, extra), out / "manifest.txt")
    print(f"simulated {args.n_women} women, {result.n_births} births -> {out}")


def cmd_infer(args, argv):
    seed = _seed(args)
    scenario = args.scenario
    if scenario == 3 and args.asufr is None:
        raise ConsistencyError("scenario 3 requires an asufr file (--asufr)")
    obs = load_observed(args.asfr, args.asufr if scenario == 3 else None)
    prior = build_prior(scenario, _prior_config(args))
    cfg = _snpe_config(args, scenario, seed)
    artifact = run_snpe(obs.summary(), prior, cfg)
    out = artifact.save(args.out)
    s = summarize_draws(artifact.draws, artifact.names)
    write_matrix_csv(out / "posterior_summary.csv", ["parameter", "mean", "sd", "lo95", "hi95"],
                     [[n, float(m), float(sd), float(lo), float(hi)] for n, m, sd, lo, hi in s.rows()])
    write_manifest(_run_manifest(argv, seed), out / "run_manifest.txt")
    print(f"observed TFR {obs.tfr:.4f}; posterior leakage {artifact.leakage:.3f} -> {out}")


def cmd_cross_validate(args, argv):
    seed = _seed(args)
    prior = build_prior(args.scenario, _prior_config(args))
    cfg = _snpe_config(args, args.scenario, seed)
    report = cross_validate(prior, args.scenario, args.folds, cfg)
    out = _out_dir(args)
    header = ["fold", "fold_seed", "data_seed", "ok"]
    header += [f"true_{n}" for n in prior.names] + [f"est_{n}" for n in prior.names]
    rows = []
    for i in range(args.folds):
        rows.append([i, report.fold_seeds[i], report.data_seeds[i], int(report.ok[i]),
                     *map(float, report.truths[i]), *map(float, report.estimates[i])])
    write_matrix_csv(out / "cv_folds.csv", header, rows)
    if report.nrmse is not None:
        write_matrix_csv(out / "cv_nrmse.csv", ["parameter", "nrmse"],
                         [[n, float(v)] for n, v in zip(prior.names, report.nrmse)])
    (out / "cv_summary.txt").write_text("\n".join(report.summary_lines()) + "\n")
    write_manifest(_run_manifest(argv, seed, cfg.manifest()), out / "manifest.txt")
    print("\n".join(report.summary_lines()))


def cmd_ppc(args, argv):
    seed = _seed(args)
    artifact = PosteriorArtifact.load(args.artifact)
    layout = artifact.config.layout
    if layout is Layout.ASFR_ASUFR and args.asufr is None:
        raise ConsistencyError("artifact was fitted to asfr+asufr; pass --asufr")
    obs = load_observed(args.asfr, args.asufr if layout is Layout.ASFR_ASUFR else None)
    report = posterior_predictive_check(artifact, obs.summary(), args.draws, args.n_women, seed)
    out = _out_dir(args)
    cols = ["age", "observed", "mean", "lo95", "hi95"]
    write_matrix_csv(out / "ppc.csv", cols, [[int(a), *map(float, r)] for a, *r in report.block(0).rows()])
    lines = [f"draws = {report.n_draws}", f"coverage = {report.block(0).coverage:.6f}"]
    if layout is Layout.ASFR_ASUFR:
        b = report.block(1)
        write_matrix_csv(out / "ppc_asufr.csv", cols, [[int(a), *map(float, r)] for a, *r in b.rows()])
        lines.append(f"coverage_asufr = {b.coverage:.6f}")
    (out / "ppc_summary.txt").write_text("\n".join(lines) + "\n")
    write_manifest(_run_manifest(argv, seed), out / "manifest.txt")
    print("\n".join(lines))


def cmd_validate_micro(args, argv):
    seed = _seed(args)
    artifact = PosteriorArtifact.load(args.artifact)
    paths = {name: getattr(args, name) for name in MICRO_OUTCOMES}
    if all(p is None for p in paths.values()):
        raise UsageError("pass at least one observed micro histogram")
    micro = {k: read_histogram_csv(p) for k, p in paths.items() if p is not None}
    theta_hat = artifact.draws.mean(axis=0)
    report = validate_micro(theta_hat, micro, args.n_women, seed)
    out = _out_dir(args)
    write_matrix_csv(out / "micro_js.csv", ["outcome", "js_bits"],
                     [[k, float(v)] for k, v in report.js_bits.items()])
    for name, hist in report.simulated.items():
        write_histogram_csv(hist, out / f"simulated_{name}.csv")
    (out / "micro_summary.txt").write_text("\n".join(report.summary_lines()) + "\n")
    write_manifest(_run_manifest(argv, seed), out / "manifest.txt")
    print("\n".join(report.summary_lines()))


def cmd_fit_priors(args, argv):
    cfg = _prior_config(args)
    prior = build_prior(args.scenario, cfg)
    lo, hi, clamp = fecundability_envelope(prior, [20, 25, 30], seed=_seed(args))
    out = _out_dir(args)
    entries = {"scenario": args.scenario}
    entries.update(prior.manifest())
    entries["check.fecundability_ages"] = "20 25 30"
    entries["check.fecundability_lo95"] = " ".join(repr(float(v)) for v in lo)
    entries["check.fecundability_hi95"] = " ".join(repr(float(v)) for v in hi)
    entries["check.clamp_share"] = repr(clamp)
    write_manifest(entries, out / "priors.manifest")
    print(f"wrote {out / 'priors.manifest'}")


def cmd_rerun(args, argv):
    m = read_manifest(args.manifest)
    try:
        original = json.loads(m["command"])
    except (KeyError, json.JSONDecodeError):
        raise FormatError(f"{args.manifest}: no replayable command") from None
    if original and original[0] == "rerun":
        raise UsageError("refusing to replay a rerun manifest")
    replay = list(original)
    if "--seed" in replay:
        replay[replay.index("--seed") + 1] = m["seed"]
    else:
        replay += ["--seed", m["seed"]]
    if args.out:
        replay = _replace_flag(replay, "--out", args.out)
    os.environ.pop(SEED_ENV, None)
    return main(replay)


def _replace_flag(argv, flag, value):
    argv = list(argv)
    if flag in argv:
        argv[argv.index(flag) + 1] = value
    else:
        argv += [flag, value]
    return argv


# parser ------------------------------------------------------------------

def _add_snpe_flags(p):
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--sims", type=int, default=2000, help="simulations per round")
    p.add_argument("--n-women", type=int, default=2000)
    p.add_argument("--draws", type=int, default=5000, help="posterior draws to store")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--max-epochs", type=int, default=500)


def _add_prior_flags(p):
    p.add_argument("--mu-d-histogram")
    p.add_argument("--delta-r-histogram")
    p.add_argument("--mu-b-histogram")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cohort-sbi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=".")
        return p

    p = add("simulate", cmd_simulate, "simulate one cohort at a parameter vector")
    p.add_argument("--theta", help="11 comma-separated values in canonical order")
    p.add_argument("--param", action="append", metavar="NAME=VALUE")
    p.add_argument("--n-women", type=int, default=2000)

    p = add("infer", cmd_infer, "sequential posterior estimation from observed rates")
    p.add_argument("--asfr", required=True)
    p.add_argument("--asufr")
    p.add_argument("--scenario", type=int, choices=(1, 2, 3), default=1)
    _add_snpe_flags(p)
    _add_prior_flags(p)

    p = add("cross-validate", cmd_cross_validate, "parameter-recovery cross-validation")
    p.add_argument("--scenario", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--folds", type=int, default=25)
    _add_snpe_flags(p)
    _add_prior_flags(p)

    p = add("ppc", cmd_ppc, "posterior predictive check")
    p.add_argument("--artifact", required=True)
    p.add_argument("--asfr", required=True)
    p.add_argument("--asufr")
    p.add_argument("--draws", type=int, default=5000)
    p.add_argument("--n-women", type=int, default=None)

    p = add("validate-micro", cmd_validate_micro, "JS divergence against observed micro histograms")
    p.add_argument("--artifact", required=True)
    for name in MICRO_OUTCOMES:
        p.add_argument("--" + name.replace("_", "-"), dest=name)
    p.add_argument("--n-women", type=int, default=10_000)

    p = add("fit-priors", cmd_fit_priors, "fit scenario priors and write priors.manifest")
    p.add_argument("--scenario", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--mu-s-interval", type=float, nargs=2)
    p.add_argument("--mu-d-interval", type=float, nargs=2)
    _add_prior_flags(p)

    p = sub.add_parser("rerun", help="replay a run from its manifest")
    p.set_defaults(func=cmd_rerun)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        set_threads(args.threads)
        rc = args.func(args, argv)
        return 0 if rc is None else rc
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CohortSBIError as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"error: IOError: {_one_line(exc)}", file=sys.stderr)
        return EXIT_FAILURE


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
