import logging

import numpy as np
from scipy.special import gammaln

from lcar.errors import DimensionMismatch
from lcar.model.data import ChainState, Dataset, linear_predictor

logger = logging.getLogger(__name__)


def unit_log_lik(Y: np.ndarray, E: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Per-unit Poisson(E exp(eta)) log-pmf at Y, broadcasting over leading axes of eta."""
    return Y * (np.log(E) + eta) - E * np.exp(eta) - gammaln(Y + 1.0)


def log_poisson_lik(data: Dataset, state: ChainState) -> float:
    if state.beta.shape != (data.X.shape[1],) or state.phi.shape != (data.n,):
        raise DimensionMismatch(
            f"State with beta {state.beta.shape} and phi {state.phi.shape} "
            f"does not match data with design {data.X.shape}"
        )
    return float(np.sum(unit_log_lik(data.Y, data.E, linear_predictor(data, state))))


def deviance_from_eta(data: Dataset, eta: np.ndarray) -> np.ndarray:
    """-2 log-likelihood for one or many linear predictors (last axis is the unit)."""
    return -2.0 * np.sum(unit_log_lik(data.Y, data.E, eta), axis=-1)


def deviance(data: Dataset, state: ChainState) -> float:
    return -2.0 * log_poisson_lik(data, state)
