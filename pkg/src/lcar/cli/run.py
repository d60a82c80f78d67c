import os
import re
import sys
import json
import logging
import argparse
from pathlib import Path
from typing import Callable, Dict, List, Optional

import attrs
import numpy as np
import pandas as pd
from dotenv import dotenv_values, load_dotenv

from lcar import __version__
from lcar.cli.manifest import MANIFEST_NAME, RunManifest
from lcar.cli.storage import (
    ingest_adjacency,
    ingest_centroids,
    ingest_covariates,
    ingest_dataset,
    ingest_prior,
    ingest_template,
    read_samples,
    read_sequence,
    write_adjacency,
    write_counts,
    write_samples,
    write_sequence,
)
from lcar.common import MODEL, parse_model, stream_seed, substream
from lcar.diagnostics import (
    edge_removal_probabilities,
    screen_covariates,
    summarise,
    unit_summaries,
)
from lcar.elicitation import ElicitationConfig, elicit_sequence
from lcar.errors import NumericalError, ValidationError
from lcar.sampler import SamplerConfig, run_chains
from lcar.simulation import (
    Geometry,
    SimScenario,
    StudyConfig,
    epsilon_sensitivity,
    lattice_geometry,
    full_grid,
    run_scenarios,
    three_band_template,
)

logger = logging.getLogger(__name__)

ENV_PREFIX = "LCAR_"


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


ELICIT_OPTIONS = {
    "epsilon": float,
    "beta_normaliser": str,
    "method": str,
    "workers": int,
    "refresh_per_trial": _as_bool,
    "standardise": _as_bool,
}
FIT_OPTIONS = {
    "n_chains": int,
    "burn_in": int,
    "keep": int,
    "thin": int,
    "q": int,
    "seed": int,
    "epsilon": float,
    "workers": int,
    "adapt_every": int,
    "standardise": _as_bool,
}
SIMULATE_OPTIONS = {
    "replicates": int,
    "lattice": int,
    "seed": int,
    "n_chains": int,
    "burn_in": int,
    "keep": int,
    "q": int,
    "epsilon": float,
    "n_boot": int,
    "workers": int,
}
DIAGNOSE_OPTIONS = {
    "permutations": int,
    "seed": int,
}


def resolve_options(args: argparse.Namespace, casts: Dict[str, Callable]) -> Dict:
    """
    Built-in defaults < LCAR_* environment < --config file < explicit flags.

    A rerun replays the options stored in the original manifest and reads
    neither the environment nor the config file.
    """
    replay = getattr(args, "replay", None)
    if replay is not None:
        return {key: casts[key](value) for key, value in replay.items() if key in casts}
    from_file = {}
    if getattr(args, "config", None):
        if not Path(args.config).is_file():
            raise ValidationError(f"Config file {args.config} does not exist")
        from_file = {k.lower(): v for k, v in dotenv_values(args.config).items()}
    unknown = set(from_file) - set(casts)
    if unknown:
        raise ValidationError(f"{args.config}: unknown option(s) {', '.join(sorted(unknown))}")
    values = {}
    for key, cast in casts.items():
        raw = os.getenv(ENV_PREFIX + key.upper())
        if from_file.get(key) is not None:
            raw = from_file[key]
        try:
            if raw is not None:
                values[key] = cast(raw)
        except ValueError:
            raise ValidationError(f"Option {key}={raw!r} is not a valid {cast.__name__}")
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return values


def _build(cls, options: Dict):
    names = {f.name for f in attrs.fields(cls)}
    try:
        return cls(**{k: v for k, v in options.items() if k in names})
    except (TypeError, ValueError) as e:
        raise ValidationError(f"Invalid {cls.__name__}: {e}")


def _standardisation(data) -> Dict:
    return {
        "standardised": data.standardised,
        "covariates": list(data.covariate_names),
        "means": data.means.tolist(),
        "sds": data.sds.tolist(),
    }


def elicit(args, manifest: RunManifest, out: Path) -> None:
    options = resolve_options(args, ELICIT_OPTIONS)
    manifest.options = options
    config = _build(ElicitationConfig, options)
    standardise = options.get("standardise", True)

    first = ingest_dataset(args.prior[0], standardise=False)
    if args.covariates:
        design = ingest_covariates(args.covariates, first.n, standardise)
        manifest.record_input(args.covariates)
    else:
        design = first
    adj = ingest_adjacency(args.adjacency, first.n)
    prior = ingest_prior(args.prior, design.X)
    for path in [args.adjacency, *args.prior]:
        manifest.record_input(path)
    manifest.config = {**attrs.asdict(config), "standardise": standardise}
    manifest.standardisation = _standardisation(design)

    seq, trace = elicit_sequence(adj, prior, config=config)
    write_sequence(out, seq, trace, prior, {"beta_normaliser": config.beta_normaliser, "method": config.method})
    logger.info(f"Wrote a {seq.n_edges}-edge candidate sequence to {out}")


def fit(args, manifest: RunManifest, out: Path) -> None:
    options = resolve_options(args, FIT_OPTIONS)
    manifest.options = options
    config = _build(SamplerConfig, options)
    standardise = options.get("standardise", True)
    model = parse_model(args.model)
    if model == MODEL.LCAR and not args.sequence:
        raise ValidationError("--sequence is required for the lcar model")

    data = ingest_dataset(args.data, standardise)
    adj = ingest_adjacency(args.adjacency, data.n)
    manifest.record_input(args.data)
    manifest.record_input(args.adjacency)
    seq = None
    if model == MODEL.LCAR:
        seq = read_sequence(args.sequence, adj)
        manifest.record_input(args.sequence)
    manifest.config = {**attrs.asdict(config), "model": model.name.lower(), "standardise": standardise}
    manifest.standardisation = _standardisation(data)

    samples = run_chains(data, seq, model, config, adjacency=adj)
    manifest.seeds = {"seed": config.seed, "chains": list(samples.seeds)}
    write_samples(out, samples, config.burn_in, config.thin)
    logger.info(f"Wrote {samples.n_chains} chains of {samples.n_draws} draws to {out}")


def _scenario_dir(scenario: SimScenario) -> str:
    return re.sub(r"[^A-Za-z0-9.\-]+", "_", scenario.label.replace("=", ""))


def _geometry(args, options) -> Geometry:
    if args.centroids:
        if not args.adjacency:
            raise ValidationError("--adjacency is required with --centroids")
        centroids = ingest_centroids(args.centroids)
        adjacency = ingest_adjacency(args.adjacency, centroids.shape[0])
        template = ingest_template(args.template) if args.template else three_band_template(centroids)
        return Geometry(adjacency=adjacency, centroids=centroids, template=template)
    geometry = lattice_geometry(options.get("lattice", 8))
    if args.template:
        geometry = attrs.evolve(geometry, template=ingest_template(args.template))
    return geometry


def simulate(args, manifest: RunManifest, out: Path) -> None:
    options = resolve_options(args, SIMULATE_OPTIONS)
    manifest.options = options
    seed = options.get("seed", 7)
    replicates = options.get("replicates", 50)
    geometry = _geometry(args, options)
    for path in (args.centroids, args.adjacency, args.template):
        if path:
            manifest.record_input(path)

    if args.full_grid:
        scenarios = full_grid(n_replicates=replicates)
    else:
        scenarios = [SimScenario.parse(text, n_replicates=replicates) for text in (args.scenario or ["M=1,E=50-100"])]
    scenarios = [attrs.evolve(s, seed=stream_seed(seed, "scenario", i)) for i, s in enumerate(scenarios)]

    sampler = _build(
        SamplerConfig,
        {"n_chains": 1, "burn_in": 5_000, "keep": 5_000, **options, "seed": seed, "workers": 1},
    )
    study = _build(
        StudyConfig,
        {
            "scenarios": scenarios,
            "models": tuple(args.models),
            "sampler": sampler,
            "epsilon": sampler.epsilon,
            "n_boot": options.get("n_boot", 1000),
            "workers": options.get("workers", 1),
        },
    )
    manifest.config = {
        "seed": seed,
        "replicates": replicates,
        "scenarios": [attrs.asdict(s) for s in scenarios],
        "models": list(study.models),
        "sampler": attrs.asdict(sampler),
        "n_boot": study.n_boot,
        "n_units": geometry.adjacency.n,
    }
    manifest.seeds = {"seed": seed, "scenarios": [s.seed for s in scenarios]}

    write_adjacency(out / "adjacency.csv", geometry.adjacency)
    pd.DataFrame(
        {"unit": np.arange(1, geometry.adjacency.n + 1), "x": geometry.centroids[:, 0], "y": geometry.centroids[:, 1]}
    ).to_csv(out / "centroids.csv", index=False)
    pd.DataFrame(
        {"unit": np.arange(1, geometry.adjacency.n + 1), "label": geometry.template.labels}
    ).to_csv(out / "template.csv", index=False)

    def save_replicate(scenario, result):
        rep_dir = out / "replicates" / _scenario_dir(scenario) / f"rep_{result.index + 1}"
        rep_dir.mkdir(parents=True, exist_ok=True)
        rep = result.replicate
        data = rep.dataset
        write_counts(rep_dir / "data.csv", data.Y, data.E, data.X[:, 1:], data.covariate_names)
        for t, (observed, expected) in enumerate(zip(rep.prior_observed, rep.prior_expected)):
            write_counts(rep_dir / f"prior_{t + 1}.csv", observed, expected)
        pd.DataFrame(
            {
                "unit": np.arange(1, data.n + 1),
                "covariate": rep.truth.covariate,
                "residual": rep.truth.residual,
                "log_risk": rep.truth.log_risk,
                "fitted": rep.truth.fitted,
            }
        ).to_csv(rep_dir / "truth.csv", index=False)

    table, estimates = run_scenarios(study, geometry, on_replicate=save_replicate)
    table.to_csv(out / "rmse.csv", index=False)
    estimates.to_csv(out / "estimates.csv", index=False)

    if args.epsilons:
        epsilons = [float(e) for e in args.epsilons.split(",")]
        manifest.config["epsilons"] = epsilons
        epsilon_sensitivity(study, geometry, epsilons).to_csv(out / "epsilon_sensitivity.csv", index=False)


def diagnose(args, manifest: RunManifest, out: Path) -> None:
    options = resolve_options(args, DIAGNOSE_OPTIONS)
    manifest.options = options
    try:
        run = RunManifest.read(args.run)
    except FileNotFoundError:
        raise ValidationError(f"{args.run} holds no {MANIFEST_NAME}; pass a directory written by `lcar fit`")
    except (json.JSONDecodeError, TypeError) as e:
        raise ValidationError(f"Cannot read the manifest in {args.run}: {e}")
    if run.command != "fit" or run.status != "ok":
        raise ValidationError(f"{args.run} is not a completed fit run")
    model = parse_model(run.config["model"])
    data = ingest_dataset(args.data, run.config.get("standardise", True))
    adj = ingest_adjacency(args.adjacency, data.n)
    for path in (args.data, args.adjacency, args.run):
        manifest.record_input(path)
    samples = read_samples(
        args.run,
        model,
        run.config["n_chains"],
        seeds=run.seeds.get("chains", ()),
        n_edges=adj.n_edges if model == MODEL.LCAR else None,
    )
    seed = options.get("seed", run.config.get("seed", 17))
    n_perm = options.get("permutations", 10_000)
    manifest.config = {"run": str(args.run), "permutations": n_perm, "seed": seed, "kde": args.kde, "screen": args.screen}
    manifest.seeds = {"seed": seed}

    summary = summarise(samples, data, adj, n_perm=n_perm, rng=substream(seed, "permutation"), kde=args.kde)
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2))
    unit_summaries(samples, data).to_csv(out / "fitted.csv", index=False)
    _traces(samples).to_csv(out / "traces.csv", index=False)
    if summary.edges_removed is not None:
        summary.edges_removed.to_frame().to_csv(out / "edges_removed_density.csv", index=False)
        if args.sequence:
            seq = read_sequence(args.sequence, adj)
            manifest.record_input(args.sequence)
            edge_removal_probabilities(samples, seq).to_csv(out / "edge_removal.csv", index=False)
    if args.screen:
        screen_covariates(data).to_csv(out / "screening.csv", index=False)
    logger.info(f"DIC {summary.dic:.1f} (p_D {summary.p_d:.1f}), Moran's I {summary.morans_i:.4f} (p={summary.morans_p:.4f})")


def _traces(samples) -> pd.DataFrame:
    frames = []
    for c in range(samples.n_chains):
        frame = pd.DataFrame({"chain": c + 1, "draw": np.arange(1, samples.n_draws + 1)})
        for i in range(samples.beta.shape[2]):
            frame[f"beta{i}"] = samples.beta[c, :, i]
        frame["tau2"] = samples.tau2[c]
        frame["deviance"] = samples.deviance[c]
        if samples.candidate_j is not None:
            frame["edges_removed"] = samples.edges_removed()[c]
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


COMMANDS = {"elicit": elicit, "fit": fit, "simulate": simulate, "diagnose": diagnose}


def _with_out(argv: List[str], out: str) -> List[str]:
    argv = list(argv)
    for i, token in enumerate(argv):
        if token == "--out" and i + 1 < len(argv):
            argv[i + 1] = out
            return argv
        if token.startswith("--out="):
            argv[i] = f"--out={out}"
            return argv
    return argv + ["--out", out]


def rerun(args) -> int:
    """Repeat a run with the options recorded in its manifest; refuses if any input changed."""
    try:
        previous = RunManifest.read(args.manifest)
    except (FileNotFoundError, json.JSONDecodeError, TypeError) as e:
        raise ValidationError(f"Cannot read manifest {args.manifest}: {e}")
    changed = previous.changed_inputs()
    if changed:
        raise ValidationError(f"Inputs changed since the original run: {', '.join(changed)}")
    logger.info(f"Re-running `lcar {previous.command}` into {args.out} with its recorded options")
    return main(_with_out(previous.argv, args.out), replay=previous.options)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lcar",
        description="Localised conditional autoregressive models for areal disease counts.",
    )
    parser.add_argument("--version", action="version", version=f"lcar {__version__}")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub):
        sub.add_argument("--out", required=True, type=str, help="Output directory")
        sub.add_argument("--config", type=str, help="Flat key=value file of option defaults")
        sub.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS, help="Log at DEBUG level")

    sub = commands.add_parser("elicit", help="Elicit the candidate neighbourhood sequence from prior periods")
    sub.add_argument("--adjacency", required=True, help="Edge list CSV with header from,to")
    sub.add_argument("--prior", required=True, nargs="+", help="One unit,observed,expected CSV per prior period")
    sub.add_argument("--covariates", help="CSV with unit and covariate columns (the fit dataset works)")
    sub.add_argument("--epsilon", type=float, help="Diagonal dominance constant (default 0.001)")
    sub.add_argument("--beta-normaliser", dest="beta_normaliser", choices=["printed", "periods"],
                     help="Divide the summed prior log-SIRs by n (printed) or by the number of periods")
    sub.add_argument("--method", choices=["fast", "naive"], help="Trial scoring by rank-two updates or refactorisation")
    sub.add_argument("--refresh-per-trial", dest="refresh_per_trial", action="store_true", default=None,
                     help="Re-estimate beta and tau2 for every trial removal")
    sub.add_argument("--workers", type=int, help="Threads for naive trial scoring")
    sub.add_argument("--standardise", action=argparse.BooleanOptionalAction, default=None,
                     help="Standardise covariates (default on)")
    common(sub)

    sub = commands.add_parser("fit", help="Run MCMC for the LCAR, IAR or BYM model")
    sub.add_argument("--model", required=True, choices=["lcar", "iar", "bym"])
    sub.add_argument("--data", required=True, help="CSV with unit,observed,expected,cov1,...")
    sub.add_argument("--adjacency", required=True, help="Edge list CSV with header from,to")
    sub.add_argument("--sequence", help="Directory written by `lcar elicit` (lcar only)")
    sub.add_argument("--chains", dest="n_chains", type=int, help="Number of chains (default 3)")
    sub.add_argument("--burnin", dest="burn_in", type=int, help="Burn-in iterations (default 100000)")
    sub.add_argument("--keep", type=int, help="Kept iterations after burn-in (default 50000)")
    sub.add_argument("--thin", type=int, help="Keep every thin-th iteration (default 1)")
    sub.add_argument("--q", type=int, help="Candidate move window half-width (default 5)")
    sub.add_argument("--seed", type=int, help="User seed for all chains (default 17)")
    sub.add_argument("--epsilon", type=float, help="Diagonal dominance constant (default 0.001)")
    sub.add_argument("--adapt-every", dest="adapt_every", type=int, help="Iterations between adaptation steps")
    sub.add_argument("--workers", type=int, help="Processes running chains in parallel")
    sub.add_argument("--standardise", action=argparse.BooleanOptionalAction, default=None,
                     help="Standardise covariates (default on)")
    common(sub)

    sub = commands.add_parser("simulate", help="Run the simulation study on a lattice or supplied geometry")
    sub.add_argument("--scenario", action="append", help="Scenario such as M=1,E=50-100; repeatable")
    sub.add_argument("--full-grid", dest="full_grid", action="store_true",
                     help="All nine combinations of M in {0.5,1,1.5} and the three expected-count ranges")
    sub.add_argument("--replicates", type=int, help="Replicates per scenario (default 50)")
    sub.add_argument("--lattice", type=int, help="Side of the square lattice (default 8)")
    sub.add_argument("--centroids", help="CSV with unit,x,y (needs --adjacency)")
    sub.add_argument("--adjacency", help="Edge list CSV for --centroids")
    sub.add_argument("--template", help="CSV with unit,label, labels in {-1,0,1}")
    sub.add_argument("--models", nargs="+", default=["iar", "bym", "lcar"], choices=["iar", "bym", "lcar"])
    sub.add_argument("--seed", type=int, help="User seed (default 7)")
    sub.add_argument("--chains", dest="n_chains", type=int, help="Chains per fit (default 1)")
    sub.add_argument("--burnin", dest="burn_in", type=int, help="Burn-in per fit (default 5000)")
    sub.add_argument("--keep", type=int, help="Kept iterations per fit (default 5000)")
    sub.add_argument("--q", type=int, help="Candidate move window half-width (default 5)")
    sub.add_argument("--epsilon", type=float, help="Diagonal dominance constant (default 0.001)")
    sub.add_argument("--epsilons", help="Comma-separated epsilons for a sensitivity rerun of the LCAR fits")
    sub.add_argument("--boot", dest="n_boot", type=int, help="Bootstrap resamples for RMSE intervals (default 1000)")
    sub.add_argument("--workers", type=int, help="Processes running replicates in parallel")
    common(sub)

    sub = commands.add_parser("diagnose", help="Summarise a fit run")
    sub.add_argument("--run", required=True, help="Directory written by `lcar fit`")
    sub.add_argument("--data", required=True, help="The dataset the run was fitted to")
    sub.add_argument("--adjacency", required=True, help="Edge list CSV with header from,to")
    sub.add_argument("--sequence", help="Candidate sequence directory, for per-edge removal probabilities")
    sub.add_argument("--permutations", type=int, help="Moran's I permutations (default 10000)")
    sub.add_argument("--seed", type=int, help="Seed for the permutation test (default: the run's seed)")
    sub.add_argument("--kde", action="store_true", help="Add a kernel overlay to the edges-removed density")
    sub.add_argument("--screen", action="store_true", help="Write covariate screening of the Poisson GLM")
    common(sub)

    sub = commands.add_parser("rerun", help="Repeat a run from its manifest")
    sub.add_argument("manifest", help="manifest.json or the directory holding it")
    sub.add_argument("--out", required=True, help="Output directory for the repeated run")
    sub.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS, help="Log at DEBUG level")
    return parser


def main(argv: Optional[List[str]] = None, replay: Optional[Dict] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.replay = replay
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    load_dotenv(override=True)

    if args.command == "rerun":
        try:
            return rerun(args)
        except ValidationError as e:
            logger.error(f"{type(e).__name__}: {e}")
            return 1

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command=args.command, argv=argv)
    code = 0
    try:
        if getattr(args, "config", None) and Path(args.config).is_file():
            manifest.record_input(args.config)
        COMMANDS[args.command](args, manifest, out)
        manifest.finish("ok")
    except ValidationError as e:
        logger.error(f"{type(e).__name__}: {e}")
        manifest.finish("failed", f"{type(e).__name__}: {e}")
        code = 1
    except NumericalError as e:
        logger.error(f"{type(e).__name__}: {e}")
        manifest.finish("failed", f"{type(e).__name__}: {e}")
        code = 2
    finally:
        manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
