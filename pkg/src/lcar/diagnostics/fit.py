import logging
from typing import Dict, List, Optional, Sequence, Tuple

import arviz as az
import attrs
import numpy as np
import pandas as pd
import statsmodels.api as sm

from lcar.common import MODEL
from lcar.errors import DimensionMismatch, EmptyTrace, NonConvergence
from lcar.graph.adjacency import AdjacencyStructure
from lcar.model.data import Dataset
from lcar.model.likelihood import deviance_from_eta
from lcar.sampler.chains import PosteriorSamples
from lcar.diagnostics.spatial import (
    DEFAULT_PERMUTATIONS,
    EdgesRemovedDensity,
    edges_removed_density,
    morans_i_test,
    pearson_residuals,
    posterior_fitted,
)

logger = logging.getLogger(__name__)

# Potential scale reductions above this are reported as unconverged.
RHAT_THRESHOLD = 1.05

RESIDUAL_TYPE = "pearson_at_posterior_mean_fitted"


def dic(samples: PosteriorSamples, data: Dataset) -> Tuple[float, float]:
    """Deviance information criterion and p_D = mean deviance - deviance at the posterior mean."""
    if samples.deviance.size == 0:
        raise EmptyTrace("No deviance draws to summarise")
    mean_deviance = float(samples.deviance.mean())
    eta_bar = samples.linear_predictor(data.X).reshape(-1, data.n).mean(axis=0)
    p_d = mean_deviance - float(deviance_from_eta(data, eta_bar))
    return mean_deviance + p_d, p_d


@attrs.frozen
class RelativeRisk:
    covariate: str
    median: float
    lower: float
    upper: float
    increment: float


def relative_risks(
    samples: PosteriorSamples,
    covariate_names: Optional[Sequence[str]] = None,
    standardisation: Optional[np.ndarray] = None,
    level: float = 0.95,
) -> List[RelativeRisk]:
    """
    Posterior median and interval of exp(beta) for every covariate.

    Coefficients are per one standard deviation when the covariates were
    standardised at ingestion; `standardisation` (the SDs) is only recorded as the
    reporting increment.
    """
    if samples.beta.size == 0:
        raise EmptyTrace("No beta draws to summarise")
    draws = samples.pooled("beta")[:, 1:]
    names = covariate_names or [f"cov{i + 1}" for i in range(draws.shape[1])]
    if len(names) != draws.shape[1]:
        raise DimensionMismatch(f"{len(names)} covariate names for {draws.shape[1]} coefficients")
    increments = np.ones(draws.shape[1]) if standardisation is None or len(standardisation) == 0 else np.asarray(standardisation)
    tail = 100.0 * (1.0 - level) / 2.0
    median, lower, upper = np.exp(np.percentile(draws, [50.0, tail, 100.0 - tail], axis=0))
    return [
        RelativeRisk(
            covariate=name,
            median=float(median[i]),
            lower=float(lower[i]),
            upper=float(upper[i]),
            increment=float(increments[i]),
        )
        for i, name in enumerate(names)
    ]


def _poisson_glm(data: Dataset):
    model = sm.GLM(data.Y, data.X, family=sm.families.Poisson(), offset=np.log(data.E))
    fit = model.fit()
    if not fit.converged:
        raise NonConvergence("Covariate-only Poisson GLM did not converge")
    return fit


def overdispersion(data: Dataset, covariates_only_fit=None) -> float:
    """Pearson chi-squared over residual degrees of freedom of the covariate-only Poisson GLM."""
    fit = covariates_only_fit if covariates_only_fit is not None else _poisson_glm(data)
    if not getattr(fit, "converged", True):
        raise NonConvergence("Covariate-only Poisson GLM did not converge")
    if fit.df_resid <= 0:
        raise DimensionMismatch("No residual degrees of freedom left for an overdispersion estimate")
    return float(fit.pearson_chi2 / fit.df_resid)


def screen_covariates(data: Dataset, alpha: float = 0.05) -> pd.DataFrame:
    """Wald tests of every covariate in the covariate-only Poisson GLM."""
    fit = _poisson_glm(data)
    names = ["intercept", *data.covariate_names]
    frame = pd.DataFrame(
        {
            "covariate": names,
            "estimate": np.asarray(fit.params),
            "std_error": np.asarray(fit.bse),
            "z": np.asarray(fit.tvalues),
            "p_value": np.asarray(fit.pvalues),
        }
    )
    frame["keep"] = frame["p_value"] < alpha
    frame.loc[0, "keep"] = True
    return frame


def potential_scale_reduction(draws: np.ndarray) -> np.ndarray:
    """
    Rank-normalised split R-hat for draws indexed (chain, draw, ...); nan with
    fewer than two chains or two draws.
    """
    draws = np.asarray(draws, dtype=np.float64)
    m, n = draws.shape[:2]
    if m < 2 or n < 2:
        return np.full(draws.shape[2:], np.nan)
    return np.asarray(az.rhat(az.convert_to_dataset(draws))["x"].values, dtype=np.float64)


def convergence_report(samples: PosteriorSamples, covariate_names: Sequence[str] = ()) -> Dict[str, float]:
    names = ["intercept", *covariate_names]
    names += [f"beta{i}" for i in range(len(names), samples.beta.shape[2])]
    chains = {"tau2": samples.tau2, "deviance": samples.deviance}
    chains.update({name: samples.beta[:, :, k] for k, name in enumerate(names)})
    if samples.sigma2 is not None:
        chains["sigma2"] = samples.sigma2
    if samples.beta.shape[0] < 2 or samples.beta.shape[1] < 2:
        rhat = {name: float("nan") for name in chains}
    else:
        posterior = az.convert_to_dataset({name: np.asarray(v, dtype=np.float64) for name, v in chains.items()})
        rhat = {name: float(v.values) for name, v in az.rhat(posterior).data_vars.items()}
    rhat = {name: rhat[name] for name in [*names, "tau2", *(["sigma2"] if "sigma2" in chains else []), "deviance"]}
    high = [name for name, value in rhat.items() if value > RHAT_THRESHOLD]
    if high:
        logger.warning(f"Potential scale reduction above {RHAT_THRESHOLD} for: {', '.join(high)}")
    return rhat


@attrs.frozen(eq=False)
class FitSummary:
    model: str
    dic: float
    p_d: float
    morans_i: float
    morans_p: float
    n_permutations: int
    relative_risks: List[RelativeRisk]
    overdispersion: Optional[float]
    rhat: Dict[str, float]
    acceptance: Tuple[Dict[str, float], ...]
    residual_type: str = RESIDUAL_TYPE
    edges_removed: Optional[EdgesRemovedDensity] = None

    def to_dict(self) -> dict:
        out = {
            "model": self.model,
            "dic": self.dic,
            "p_d": self.p_d,
            "morans_i": self.morans_i,
            "morans_p": self.morans_p,
            "n_permutations": self.n_permutations,
            "residual_type": self.residual_type,
            "relative_risks": [attrs.asdict(rr) for rr in self.relative_risks],
            "overdispersion": self.overdispersion,
            "rhat": self.rhat,
            "rhat_threshold": RHAT_THRESHOLD,
            "acceptance": list(self.acceptance),
        }
        if self.edges_removed is not None:
            out["edges_removed_interval"] = list(self.edges_removed.interval)
            out["edges_removed_modes"] = list(self.edges_removed.modes)
        return out


def summarise(
    samples: PosteriorSamples,
    data: Dataset,
    adjacency: AdjacencyStructure,
    n_perm: int = DEFAULT_PERMUTATIONS,
    rng: Optional[np.random.Generator] = None,
    with_overdispersion: bool = True,
    kde: bool = False,
) -> FitSummary:
    dic_value, p_d = dic(samples, data)
    fitted = posterior_fitted(samples, data).mean(axis=0)
    morans, p_value = morans_i_test(pearson_residuals(data, fitted), adjacency, n_perm, rng)
    dispersion = None
    try:
        dispersion = overdispersion(data) if with_overdispersion else None
    except NonConvergence as e:
        logger.warning(f"Overdispersion not reported: {e}")
    return FitSummary(
        model=samples.model.name.lower(),
        dic=dic_value,
        p_d=p_d,
        morans_i=morans,
        morans_p=p_value,
        n_permutations=n_perm,
        relative_risks=relative_risks(samples, data.covariate_names, data.sds),
        overdispersion=dispersion,
        rhat=convergence_report(samples, data.covariate_names),
        acceptance=samples.acceptance,
        edges_removed=edges_removed_density(samples, kde) if samples.model == MODEL.LCAR else None,
    )
