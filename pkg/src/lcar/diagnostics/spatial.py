import logging
from typing import Optional, Tuple

import attrs
import esda
import libpysal
import numpy as np
import pandas as pd
from scipy import stats

from lcar.errors import ConstantResiduals, DimensionMismatch, ValidationError
from lcar.graph.adjacency import AdjacencyStructure, CandidateSequence
from lcar.model.data import Dataset
from lcar.sampler.chains import PosteriorSamples

logger = logging.getLogger(__name__)

DEFAULT_PERMUTATIONS = 10_000


def spatial_weights(adj: AdjacencyStructure) -> libpysal.weights.W:
    """Binary contiguity weights over 0-based unit ids; islands keep an empty neighbour list."""
    neighbours = {k: [] for k in range(adj.n)}
    for a, b in adj.edges:
        neighbours[int(a)].append(int(b))
        neighbours[int(b)].append(int(a))
    weights = {k: [1.0] * len(v) for k, v in neighbours.items()}
    return libpysal.weights.W(neighbours, weights, silence_warnings=True)


def _centred(values: np.ndarray, adj: AdjacencyStructure) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (adj.n,):
        raise DimensionMismatch(f"{values.shape[0]} residuals against {adj.n} units")
    if adj.n_edges == 0:
        raise ValidationError("Moran's I is undefined without neighbours")
    z = values - values.mean()
    if float(z @ z) <= 1e-24 * max(1.0, float(values @ values)):
        raise ConstantResiduals("Residuals are constant; Moran's I is undefined")
    return z


def morans_i(values: np.ndarray, adj: AdjacencyStructure) -> float:
    z = _centred(values, adj)
    return float(esda.Moran(z, spatial_weights(adj), transformation="B", permutations=0).I)


def morans_i_test(
    residuals: np.ndarray,
    adj: AdjacencyStructure,
    n_perm: int = DEFAULT_PERMUTATIONS,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, float]:
    """
    Moran's I with binary weights and its two-sided permutation p-value, counting
    the observed statistic as one of the permutations.
    """
    if n_perm < 1:
        raise ValidationError(f"At least one permutation is needed, got {n_perm}")
    rng = rng if rng is not None else np.random.default_rng()
    z = _centred(residuals, adj)
    # esda permutes with the legacy global generator; seed it from rng and put it back afterwards.
    saved = np.random.get_state()
    np.random.seed(int(rng.integers(2**32)))
    try:
        moran = esda.Moran(z, spatial_weights(adj), transformation="B", permutations=n_perm)
    finally:
        np.random.set_state(saved)
    observed = float(moran.I)
    threshold = abs(observed) * (1.0 - 1e-12)
    extreme = int(np.count_nonzero(np.abs(moran.sim) >= threshold))
    p_value = (extreme + 1) / (n_perm + 1)
    logger.debug(f"Moran's I {observed:.4f}, permutation p-value {p_value:.4f} from {n_perm} permutations")
    return observed, p_value


def pearson_residuals(data: Dataset, fitted: np.ndarray) -> np.ndarray:
    return (data.Y - fitted) / np.sqrt(fitted)


def posterior_fitted(samples: PosteriorSamples, data: Dataset) -> np.ndarray:
    """(chain*draw, unit) fitted values E_k R_k of every kept draw."""
    eta = samples.linear_predictor(data.X)
    return data.E * np.exp(eta.reshape(-1, data.n))


def unit_summaries(samples: PosteriorSamples, data: Dataset, level: float = 0.95) -> pd.DataFrame:
    """Posterior mean and interval of R_k and E_k R_k, plus Pearson residuals at the mean fit."""
    fitted = posterior_fitted(samples, data)
    risk = fitted / data.E
    tail = 100.0 * (1.0 - level) / 2.0
    risk_lo, risk_hi = np.percentile(risk, [tail, 100.0 - tail], axis=0)
    fit_lo, fit_hi = np.percentile(fitted, [tail, 100.0 - tail], axis=0)
    fitted_mean = fitted.mean(axis=0)
    return pd.DataFrame(
        {
            "unit": np.arange(1, data.n + 1),
            "observed": data.Y,
            "expected": data.E,
            "risk_mean": risk.mean(axis=0),
            "risk_lower": risk_lo,
            "risk_upper": risk_hi,
            "fitted_mean": fitted_mean,
            "fitted_lower": fit_lo,
            "fitted_upper": fit_hi,
            "pearson_residual": pearson_residuals(data, fitted_mean),
        }
    )


@attrs.frozen(eq=False)
class EdgesRemovedDensity:
    """Integer-binned posterior density of the number of edges removed, N_W - j."""

    support: np.ndarray
    per_chain: np.ndarray
    pooled: np.ndarray
    interval: Tuple[int, int]
    modes: Tuple[int, ...]
    kde: Optional[np.ndarray] = None

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"edges_removed": self.support})
        for c, density in enumerate(self.per_chain):
            frame[f"chain_{c + 1}"] = density
        frame["pooled"] = self.pooled
        if self.kde is not None:
            frame["kde"] = self.kde
        return frame


def edges_removed_density(samples: PosteriorSamples, kde: bool = False, level: float = 0.95) -> EdgesRemovedDensity:
    removed = samples.edges_removed()
    n_edges = samples.n_edges
    support = np.arange(n_edges + 1)
    per_chain = np.stack(
        [np.bincount(chain, minlength=n_edges + 1) / chain.size for chain in removed]
    )
    # Chains hold equal numbers of draws, so the pooled histogram is their equal-weight mixture.
    pooled = per_chain.mean(axis=0)
    tail = (1.0 - level) / 2.0
    lower, upper = np.quantile(removed.ravel(), [tail, 1.0 - tail], method="inverted_cdf")
    modes = tuple(int(m) for m in np.flatnonzero(pooled == pooled.max()))

    smooth = None
    if kde:
        draws = removed.ravel().astype(np.float64)
        if np.ptp(draws) > 0:
            smooth = stats.gaussian_kde(draws)(support)
        else:
            logger.debug("All draws remove the same number of edges; no kernel overlay")
    return EdgesRemovedDensity(
        support=support,
        per_chain=per_chain,
        pooled=pooled,
        interval=(int(lower), int(upper)),
        modes=modes,
        kde=smooth,
    )


def edge_removal_probabilities(samples: PosteriorSamples, seq: CandidateSequence) -> pd.DataFrame:
    """
    Posterior probability that each base edge is absent.

    The edge removed at elicitation step t (0-based) is absent from candidate j
    exactly when t < N_W - j.
    """
    if samples.n_edges != seq.n_edges:
        raise DimensionMismatch(f"Samples over {samples.n_edges} edges, sequence has {seq.n_edges}")
    removed = samples.edges_removed().ravel()
    counts = np.bincount(removed, minlength=seq.n_edges + 1)
    # P(removed > t) for t = 0..N_W-1
    p_greater = 1.0 - np.cumsum(counts)[:-1] / removed.size
    step = seq.position
    edges = seq.base.edges
    return pd.DataFrame(
        {
            "edge_from": edges[:, 0] + 1,
            "edge_to": edges[:, 1] + 1,
            "removal_step": step + 1,
            "p_removed": p_greater[step],
        }
    )
