import logging
from typing import Optional

import attrs
import numpy as np

from lcar.errors import (
    DimensionMismatch,
    NonPositiveExpected,
    SingularDesign,
    ValidationError,
)

logger = logging.getLogger(__name__)


@attrs.frozen(eq=False)
class Dataset:
    """
    Observed counts, expected counts and the design matrix for one period.

    `X` carries the intercept in its first column. `means`/`sds` are the
    standardisation constants of the remaining columns (empty when the
    covariates were used as given).
    """

    Y: np.ndarray
    E: np.ndarray
    X: np.ndarray
    covariate_names: tuple = ()
    means: np.ndarray = attrs.field(factory=lambda: np.zeros(0))
    sds: np.ndarray = attrs.field(factory=lambda: np.zeros(0))

    @property
    def n(self) -> int:
        return int(self.Y.shape[0])

    @property
    def p(self) -> int:
        """Number of covariates, excluding the intercept."""
        return int(self.X.shape[1]) - 1

    @property
    def standardised(self) -> bool:
        return self.sds.size > 0

    @classmethod
    def validated(
        cls,
        Y,
        E,
        covariates=None,
        covariate_names=None,
        standardise: bool = False,
    ) -> "Dataset":
        Y = np.asarray(Y)
        E = np.asarray(E, dtype=np.float64)
        if Y.ndim != 1 or E.shape != Y.shape:
            raise DimensionMismatch(f"Observed {Y.shape} and expected {E.shape} counts disagree")
        if np.any(Y < 0) or not np.all(np.equal(np.mod(Y, 1), 0)):
            raise ValidationError("Observed counts must be non-negative integers")
        if np.any(E <= 0):
            raise NonPositiveExpected(
                f"Expected counts must be positive (unit {int(np.argmax(E <= 0)) + 1})"
            )
        n = Y.shape[0]
        covariates = np.zeros((n, 0)) if covariates is None else np.asarray(covariates, dtype=np.float64)
        covariates = covariates.reshape(n, -1)
        names = tuple(covariate_names or (f"cov{i + 1}" for i in range(covariates.shape[1])))
        if len(names) != covariates.shape[1]:
            raise DimensionMismatch("One name is needed per covariate column")
        means = sds = np.zeros(0)
        if standardise and covariates.shape[1]:
            means = covariates.mean(axis=0)
            sds = covariates.std(axis=0, ddof=1)
            if np.any(sds == 0):
                raise SingularDesign("A covariate is constant and cannot be standardised")
            covariates = (covariates - means) / sds
        X = np.column_stack([np.ones(n), covariates])
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise SingularDesign("Covariate design matrix is rank deficient")
        return cls(
            Y=Y.astype(np.int64),
            E=E,
            X=X,
            covariate_names=names,
            means=means,
            sds=sds,
        )


@attrs.define(eq=False)
class ChainState:
    """One MCMC state. `candidate_j` is used by LCAR only; `theta`/`sigma2` by BYM only."""

    beta: np.ndarray
    tau2: float
    phi: np.ndarray
    phi_star: float = 0.0
    candidate_j: Optional[int] = None
    theta: Optional[np.ndarray] = None
    sigma2: Optional[float] = None

    @property
    def phi_extended(self) -> np.ndarray:
        return np.append(self.phi, self.phi_star)

    def copy(self) -> "ChainState":
        return ChainState(
            beta=self.beta.copy(),
            tau2=self.tau2,
            phi=self.phi.copy(),
            phi_star=self.phi_star,
            candidate_j=self.candidate_j,
            theta=None if self.theta is None else self.theta.copy(),
            sigma2=self.sigma2,
        )


def linear_predictor(data: Dataset, state: ChainState) -> np.ndarray:
    eta = data.X @ state.beta + state.phi
    if state.theta is not None:
        eta = eta + state.theta
    return eta


def relative_risk(data: Dataset, state: ChainState) -> np.ndarray:
    """R_k = exp(x_k beta + phi_k (+ theta_k)); derived, never stored on the state."""
    return np.exp(linear_predictor(data, state))
