import json
import logging
import re
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from lcar.common import parse_model
from lcar.elicitation import ElicitationTrace, PriorData
from lcar.errors import InconsistentUnits, NonPositiveExpected, ParseError, ValidationError
from lcar.graph.adjacency import AdjacencyStructure, CandidateSequence, build_adjacency
from lcar.model.data import Dataset
from lcar.sampler.chains import PosteriorSamples
from lcar.simulation.geometry import MeanTemplate

logger = logging.getLogger(__name__)

COUNT_COLUMNS = ("unit", "observed", "expected")


def _read_csv(path, required: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    try:
        frame = pd.read_csv(path, skipinitialspace=True)
    except FileNotFoundError:
        raise ValidationError(f"{path}: no such file")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        match = re.search(r"line (\d+)", str(e))
        raise ParseError(path, int(match.group(1)) if match else 1, str(e).strip())
    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ParseError(path, 1, f"missing column(s) {', '.join(missing)}")
    for column in frame.columns:
        numeric = pd.to_numeric(frame[column], errors="coerce")
        bad = numeric.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            # header is line 1
            raise ParseError(path, row + 2, f"non-numeric value {frame[column].iloc[row]!r} in column '{column}'")
        frame[column] = numeric
    return frame


def _units(frame: pd.DataFrame, path) -> pd.DataFrame:
    units = frame["unit"].to_numpy()
    if not np.all(np.equal(np.mod(units, 1), 0)):
        raise ParseError(path, 1, "unit indices must be integers")
    frame = frame.sort_values("unit", kind="stable").reset_index(drop=True)
    if not np.array_equal(frame["unit"].to_numpy(), np.arange(1, len(frame) + 1)):
        raise InconsistentUnits(f"{path}: units must be exactly 1..{len(frame)}")
    return frame


def _counts(frame: pd.DataFrame, path) -> np.ndarray:
    observed = frame["observed"].to_numpy()
    fractional = np.flatnonzero(np.mod(observed, 1) != 0)
    if fractional.size:
        raise ParseError(path, int(fractional[0]) + 2, "observed counts must be integers")
    return observed.astype(np.int64)


def _covariate_columns(frame: pd.DataFrame) -> List[str]:
    return [c for c in frame.columns if c not in COUNT_COLUMNS]


def ingest_dataset(path, standardise: bool = True) -> Dataset:
    """`unit,observed,expected,cov1,...,covp`; covariates standardised unless asked not to."""
    frame = _units(_read_csv(path, COUNT_COLUMNS), path)
    names = _covariate_columns(frame)
    dataset = Dataset.validated(
        _counts(frame, path),
        frame["expected"].to_numpy(dtype=np.float64),
        frame[names].to_numpy(dtype=np.float64) if names else None,
        covariate_names=names,
        standardise=standardise,
    )
    logger.info(f"Read {dataset.n} units and {dataset.p} covariates from {path}")
    return dataset


def ingest_covariates(path, n: int, standardise: bool = True) -> Dataset:
    """
    Design matrix (with intercept) from any CSV carrying `unit` plus covariate
    columns. Counts in the returned Dataset are placeholders.
    """
    frame = _units(_read_csv(path, ("unit",)), path)
    if len(frame) != n:
        raise InconsistentUnits(f"{path} has {len(frame)} units, expected {n}")
    names = _covariate_columns(frame)
    values = frame[names].to_numpy(dtype=np.float64) if names else None
    return Dataset.validated(np.zeros(n, dtype=np.int64), np.ones(n), values, names, standardise)


def ingest_adjacency(path, n: Optional[int] = None) -> AdjacencyStructure:
    """`from,to` pairs, 1-based, either orientation. `n` defaults to the largest unit listed."""
    frame = _read_csv(path, ("from", "to"))
    pairs = frame[["from", "to"]].to_numpy()
    if not np.all(np.equal(np.mod(pairs, 1), 0)):
        raise ParseError(path, 1, "unit indices must be integers")
    pairs = pairs.astype(np.int64)
    largest = int(pairs.max()) if pairs.size else 0
    if n is None:
        n = largest
    elif largest > n:
        raise InconsistentUnits(f"{path} references unit {largest} but the data have {n} units")
    if pairs.size and pairs.min() < 1:
        raise InconsistentUnits(f"{path} references unit {int(pairs.min())}; units start at 1")
    return build_adjacency(pairs, n)


def ingest_prior(paths: Sequence, X: np.ndarray) -> PriorData:
    """One `unit,observed,expected` file per prior period."""
    if len(paths) == 0:
        return PriorData.from_counts([], [], X)
    observed, expected = [], []
    for path in paths:
        frame = _units(_read_csv(path, COUNT_COLUMNS), path)
        if len(frame) != X.shape[0]:
            raise InconsistentUnits(f"{path} has {len(frame)} units, expected {X.shape[0]}")
        if np.any(frame["expected"] <= 0):
            raise NonPositiveExpected(f"{path}: expected counts must be positive")
        observed.append(_counts(frame, path))
        expected.append(frame["expected"].to_numpy(dtype=np.float64))
    return PriorData.from_counts(observed, expected, X)


def ingest_centroids(path) -> np.ndarray:
    frame = _units(_read_csv(path, ("unit", "x", "y")), path)
    return frame[["x", "y"]].to_numpy(dtype=np.float64)


def ingest_template(path) -> MeanTemplate:
    frame = _units(_read_csv(path, ("unit", "label")), path)
    return MeanTemplate(frame["label"].to_numpy())


def write_adjacency(path, adj: AdjacencyStructure) -> None:
    pd.DataFrame(adj.edges + 1, columns=["from", "to"]).to_csv(path, index=False)


def write_counts(path, observed, expected, covariates=None, names=()) -> None:
    frame = pd.DataFrame({"unit": np.arange(1, len(observed) + 1), "observed": observed, "expected": expected})
    for i, name in enumerate(names):
        frame[name] = covariates[:, i]
    frame.to_csv(path, index=False)


def write_sequence(out_dir, seq: CandidateSequence, trace: ElicitationTrace, prior: PriorData, extra: dict) -> None:
    out_dir = Path(out_dir)
    edges = seq.base.edges[seq.removal_order] + 1
    steps = np.arange(1, seq.n_edges + 1)
    loglik = np.array([s.loglik for s in trace.steps])
    frame = pd.DataFrame({"step": steps, "edge_from": edges[:, 0], "edge_to": edges[:, 1], "loglik": loglik})
    frame.to_csv(out_dir / "sequence.csv", index=False)

    beta_hat = np.stack([s.beta_hat for s in trace.steps])
    for i in range(beta_hat.shape[1]):
        frame[f"beta_hat{i}"] = beta_hat[:, i]
    frame["tau2_hat"] = [s.tau2_hat for s in trace.steps]
    frame.to_csv(out_dir / "trace.csv", index=False)

    sidecar = {
        "n": seq.base.n,
        "n_edges": seq.n_edges,
        "epsilon": seq.epsilon,
        "adjacency_hash": seq.base.digest,
        "continuity_corrected": prior.corrected.tolist(),
        "tau2_floored_steps": trace.tau2_floored,
        **extra,
    }
    (out_dir / "sequence.json").write_text(json.dumps(sidecar, indent=2))


def read_sequence(seq_dir, adj: AdjacencyStructure) -> CandidateSequence:
    seq_dir = Path(seq_dir)
    try:
        sidecar = json.loads((seq_dir / "sequence.json").read_text())
    except FileNotFoundError:
        raise ValidationError(f"{seq_dir}: no sequence.json; run `lcar elicit` first")
    if sidecar["adjacency_hash"] != adj.digest:
        raise InconsistentUnits(f"{seq_dir} was elicited on a different adjacency structure")
    frame = _read_csv(seq_dir / "sequence.csv", ("step", "edge_from", "edge_to"))
    frame = frame.sort_values("step", kind="stable")
    order = np.array([adj.edge_index(int(a), int(b)) for a, b in zip(frame["edge_from"], frame["edge_to"])])
    return CandidateSequence(base=adj, removal_order=order, epsilon=sidecar.get("epsilon"))


def _beta_columns(p1: int) -> List[str]:
    return [f"beta{i}" for i in range(p1)]


def write_samples(out_dir, samples: PosteriorSamples, burn_in: int, thin: int) -> None:
    out_dir = Path(out_dir)
    iterations = burn_in + thin * np.arange(1, samples.n_draws + 1)
    for c in range(samples.n_chains):
        frame = pd.DataFrame({"iter": iterations})
        for i, name in enumerate(_beta_columns(samples.beta.shape[2])):
            frame[name] = samples.beta[c, :, i]
        frame["tau2"] = samples.tau2[c]
        frame["phi_star"] = samples.phi_star[c]
        if samples.candidate_j is not None:
            frame["j"] = samples.candidate_j[c]
        if samples.sigma2 is not None:
            frame["sigma2"] = samples.sigma2[c]
        frame["deviance"] = samples.deviance[c]
        frame.to_csv(out_dir / f"chain_{c + 1}.csv", index=False)

        bulk = {"phi": samples.phi[c]}
        if samples.theta is not None:
            bulk["theta"] = samples.theta[c]
        np.savez(out_dir / f"phi_chain_{c + 1}.npz", **bulk)

    acceptance = {f"chain_{c + 1}": rates for c, rates in enumerate(samples.acceptance)}
    (out_dir / "acceptance.json").write_text(json.dumps(acceptance, indent=2, sort_keys=True))


def read_samples(run_dir, model, n_chains: int, seeds: Sequence[int] = (), n_edges: Optional[int] = None) -> PosteriorSamples:
    run_dir = Path(run_dir)
    model = parse_model(model)
    frames, bulks = [], []
    for c in range(n_chains):
        frames.append(_read_csv(run_dir / f"chain_{c + 1}.csv", ("iter", "tau2", "deviance")))
        with np.load(run_dir / f"phi_chain_{c + 1}.npz") as bulk:
            bulks.append({key: bulk[key] for key in bulk.files})
    beta_names = [c for c in frames[0].columns if re.fullmatch(r"beta\d+", c)]

    def column(name, dtype=np.float64):
        if name not in frames[0].columns:
            return None
        return np.stack([f[name].to_numpy(dtype=dtype) for f in frames])

    acceptance_path = run_dir / "acceptance.json"
    acceptance = json.loads(acceptance_path.read_text()) if acceptance_path.exists() else {}
    return PosteriorSamples(
        model=model,
        beta=np.stack([f[beta_names].to_numpy(dtype=np.float64) for f in frames]),
        tau2=column("tau2"),
        phi=np.stack([b["phi"] for b in bulks]),
        phi_star=column("phi_star"),
        deviance=column("deviance"),
        acceptance=tuple(acceptance.get(f"chain_{c + 1}", {}) for c in range(n_chains)),
        seeds=tuple(seeds),
        candidate_j=column("j", np.int64),
        theta=np.stack([b["theta"] for b in bulks]) if "theta" in bulks[0] else None,
        sigma2=column("sigma2"),
        n_edges=n_edges,
    )
