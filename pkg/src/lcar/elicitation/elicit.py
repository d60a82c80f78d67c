import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import attrs
import numpy as np

from lcar.common import DEFAULT_EPSILON
from lcar.errors import (
    DimensionMismatch,
    EmptyPriorData,
    SingularDesign,
    ValidationError,
)
from lcar.graph.adjacency import (
    AdjacencyStructure,
    CandidateSequence,
    EdgeState,
    full_state,
)
from lcar.graph.precision import (
    build_sub_precision,
    factorise,
    log_det,
    two_by_two_lemma,
)

logger = logging.getLogger(__name__)

# Continuity correction added to counts in periods containing a zero count.
ZERO_COUNT_CORRECTION = 0.5

# Lower bound on the ML variance estimate; hit only by residual-free prior data.
TAU2_FLOOR = 1e-12

# Scores this close (relative) to the best are ties, resolved by canonical edge order.
TIE_TOLERANCE = 1e-9

BETA_NORMALISERS = ("printed", "periods")


@attrs.frozen(eq=False)
class PriorData:
    """
    Log standardised incidence ratios for the r periods before the study.

    `phi_p` is (r, n). `corrected[j]` records whether period j had a zero count and
    was transformed with the continuity correction.
    """

    phi_p: np.ndarray
    X: np.ndarray
    corrected: np.ndarray

    @property
    def r(self) -> int:
        return int(self.phi_p.shape[0])

    @property
    def n(self) -> int:
        return int(self.phi_p.shape[1])

    @classmethod
    def from_counts(cls, observed: Sequence[np.ndarray], expected: Sequence[np.ndarray], X: np.ndarray) -> "PriorData":
        if len(observed) == 0:
            raise EmptyPriorData("At least one prior period is required")
        if len(observed) != len(expected):
            raise DimensionMismatch("Observed and expected prior periods differ in number")
        phi_p, corrected = [], []
        for Y, E in zip(observed, expected):
            Y = np.asarray(Y, dtype=np.float64)
            E = np.asarray(E, dtype=np.float64)
            if np.any(Y == 0):
                phi_p.append(np.log((Y + ZERO_COUNT_CORRECTION) / (E + ZERO_COUNT_CORRECTION)))
                corrected.append(True)
            else:
                phi_p.append(np.log(Y / E))
                corrected.append(False)
        if any(corrected):
            logger.info(
                f"Continuity correction applied to {sum(corrected)} of {len(corrected)} prior periods"
            )
        return cls.validated(np.vstack(phi_p), X, np.array(corrected))

    @classmethod
    def validated(cls, phi_p: np.ndarray, X: np.ndarray, corrected: Optional[np.ndarray] = None) -> "PriorData":
        phi_p = np.atleast_2d(np.asarray(phi_p, dtype=np.float64))
        X = np.asarray(X, dtype=np.float64)
        if phi_p.shape[0] == 0:
            raise EmptyPriorData("At least one prior period is required")
        if X.ndim != 2 or X.shape[0] != phi_p.shape[1]:
            raise DimensionMismatch(
                f"Design matrix of shape {X.shape} does not match {phi_p.shape[1]} units"
            )
        if not np.all(np.isfinite(phi_p)):
            raise ValidationError("Prior log-SIRs must be finite")
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise SingularDesign("Covariate design matrix is rank deficient")
        if corrected is None:
            corrected = np.zeros(phi_p.shape[0], dtype=bool)
        return cls(phi_p=phi_p, X=X, corrected=np.asarray(corrected, dtype=bool))


@dataclass
class ElicitationStep:
    edge: Tuple[int, int]
    loglik: float
    beta_hat: np.ndarray
    tau2_hat: float


@dataclass
class ElicitationTrace:
    steps: list[ElicitationStep] = field(default_factory=list)
    tau2_floored: int = 0

    def __len__(self) -> int:
        return len(self.steps)


@attrs.define
class ElicitationConfig:
    epsilon: float = DEFAULT_EPSILON
    beta_normaliser: str = attrs.field(
        default="printed", validator=attrs.validators.in_(BETA_NORMALISERS)
    )
    # Re-estimate (beta, tau2) for every trial removal instead of once per step.
    refresh_per_trial: bool = False
    # "fast" uses determinant-lemma updates; "naive" refactorises every trial.
    method: str = attrs.field(default="fast", validator=attrs.validators.in_(("fast", "naive")))
    workers: int = 1


def _check(data: PriorData) -> None:
    if data.r == 0:
        raise EmptyPriorData("At least one prior period is required")


def ml_estimates(
    state: EdgeState,
    data: PriorData,
    epsilon: float,
    beta_normaliser: str = "printed",
) -> Tuple[np.ndarray, float]:
    """
    GLS estimates of (beta, tau2) under Q(W, eps)_{1:n}.

    With `beta_normaliser="printed"` the summed prior log-SIRs are divided by n;
    "periods" divides by r, i.e. uses the period mean.
    """
    _check(data)
    if data.n != state.base.n:
        raise DimensionMismatch(f"Prior data has {data.n} units, adjacency has {state.base.n}")
    Q = build_sub_precision(state, epsilon).matrix
    X = data.X
    QX = Q @ X
    XtQX = X.T @ QX
    normaliser = data.n if beta_normaliser == "printed" else data.r
    phi_bar = data.phi_p.sum(axis=0) / normaliser
    try:
        beta_hat = np.linalg.solve(XtQX, QX.T @ phi_bar)
    except np.linalg.LinAlgError:
        raise SingularDesign("X^T Q X is singular; the design is rank deficient")
    residuals = data.phi_p - X @ beta_hat
    tau2_hat = float(np.einsum("ij,ij->", residuals, (Q @ residuals.T).T)) / (data.n * data.r)
    return beta_hat, tau2_hat


def _floored(tau2_hat: float) -> float:
    return max(tau2_hat, TAU2_FLOOR)


def candidate_loglik(
    state: EdgeState,
    data: PriorData,
    epsilon: float,
    estimates: Optional[Tuple[np.ndarray, float]] = None,
    beta_normaliser: str = "printed",
) -> float:
    """
    Approximate Gaussian log-likelihood of the prior log-SIRs under `state`, up to a
    constant. `estimates` are the (beta, tau2) of the current step's candidate; when
    omitted they are estimated from `state` itself.
    """
    _check(data)
    if estimates is None:
        estimates = ml_estimates(state, data, epsilon, beta_normaliser)
    beta_hat, tau2_hat = estimates
    tau2_hat = _floored(tau2_hat)
    sub = build_sub_precision(state, epsilon)
    residuals = data.phi_p - data.X @ beta_hat
    quad = float(np.einsum("ij,ij->", residuals, (sub.matrix @ residuals.T).T))
    n, r = data.n, data.r
    return 0.5 * r * log_det(sub) - 0.5 * n * r * np.log(tau2_hat) - quad / (2.0 * tau2_hat)


def _select(scores: np.ndarray) -> int:
    """Position of the best score, ties resolved to the earliest (canonical) entry."""
    best = np.max(scores)
    tied = np.flatnonzero(scores >= best - TIE_TOLERANCE * max(1.0, abs(best)))
    return int(tied[0])


def _fast_scores(
    state: EdgeState,
    data: PriorData,
    epsilon: float,
    trial_edges: np.ndarray,
    estimates: Tuple[np.ndarray, float],
) -> np.ndarray:
    """Scores of every single-edge removal from `state`, from one factorisation."""
    beta_hat, tau2_hat = estimates
    tau2_hat = _floored(tau2_hat)
    n, r = data.n, data.r
    sub = build_sub_precision(state, epsilon)
    factor = factorise(sub)
    sigma = factor.inverse()

    k = state.base.edges[trial_edges, 0]
    l = state.base.edges[trial_edges, 1]
    wstar = state.global_links
    # Removing {k,l}: each endpoint loses one edge and gains the global link if it had none.
    d_kk = -1.0 + (~wstar[k])
    d_ll = -1.0 + (~wstar[l])
    delta_logdet = two_by_two_lemma(d_kk, d_ll, 1.0, sigma[k, k], sigma[l, l], sigma[k, l])

    residuals = data.phi_p - data.X @ beta_hat
    quad = float(np.einsum("ij,ij->", residuals, (sub.matrix @ residuals.T).T))
    rk, rl = residuals[:, k], residuals[:, l]
    delta_quad = (d_kk * rk**2 + d_ll * rl**2 + 2.0 * rk * rl).sum(axis=0)

    return (
        0.5 * r * (factor.logdet + delta_logdet)
        - 0.5 * n * r * np.log(tau2_hat)
        - (quad + delta_quad) / (2.0 * tau2_hat)
    )


def _naive_scores(
    state: EdgeState,
    data: PriorData,
    config: ElicitationConfig,
    trial_edges: np.ndarray,
    estimates: Optional[Tuple[np.ndarray, float]],
) -> np.ndarray:
    def score(edge):
        return candidate_loglik(
            state.without(edge),
            data,
            config.epsilon,
            estimates=estimates,
            beta_normaliser=config.beta_normaliser,
        )

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            return np.fromiter(pool.map(score, trial_edges), dtype=np.float64)
    return np.fromiter(map(score, trial_edges), dtype=np.float64)


def elicit_sequence(
    adj: AdjacencyStructure,
    data: PriorData,
    epsilon: Optional[float] = None,
    config: Optional[ElicitationConfig] = None,
) -> Tuple[CandidateSequence, ElicitationTrace]:
    """
    Greedy backward edge removal from the full geography down to no edges.

    At each step every active edge is tried; the removal that maximises the
    approximate prior log-likelihood is taken.
    """
    config = config or ElicitationConfig()
    if epsilon is not None:
        config = attrs.evolve(config, epsilon=epsilon)
    _check(data)
    if adj.n_edges < 1:
        raise ValidationError("The adjacency structure has no edges to remove")
    if data.n != adj.n:
        raise DimensionMismatch(f"Prior data has {data.n} units, adjacency has {adj.n}")

    logger.info(
        f"Eliciting candidate sequence: n={adj.n}, N_W={adj.n_edges}, r={data.r}, "
        f"epsilon={config.epsilon}, method={config.method}"
    )
    state = full_state(adj)
    order = np.empty(adj.n_edges, dtype=np.int64)
    trace = ElicitationTrace()
    for step in range(adj.n_edges):
        trial_edges = np.flatnonzero(state.active)
        if config.refresh_per_trial:
            estimates = None
            scores = _naive_scores(state, data, config, trial_edges, None)
        else:
            estimates = ml_estimates(state, data, config.epsilon, config.beta_normaliser)
            if estimates[1] < TAU2_FLOOR:
                trace.tau2_floored += 1
            if config.method == "fast":
                scores = _fast_scores(state, data, config.epsilon, trial_edges, estimates)
            else:
                scores = _naive_scores(state, data, config, trial_edges, estimates)

        best = _select(scores)
        chosen = int(trial_edges[best])
        order[step] = chosen
        if estimates is None:
            estimates = ml_estimates(state.without(chosen), data, config.epsilon, config.beta_normaliser)
        a, b = adj.edges[chosen]
        trace.steps.append(
            ElicitationStep(
                edge=(int(a) + 1, int(b) + 1),
                loglik=float(scores[best]),
                beta_hat=np.asarray(estimates[0]),
                tau2_hat=float(estimates[1]),
            )
        )
        logger.debug(f"Step {step + 1}/{adj.n_edges}: removed {{{a + 1},{b + 1}}}, loglik={scores[best]:.6f}")
        state = state.without(chosen)

    if trace.tau2_floored:
        logger.warning(
            f"Variance estimate floored at {TAU2_FLOOR} in {trace.tau2_floored} steps; "
            "the prior data are fitted exactly by the covariates"
        )
    logger.info("Elicitation finished")
    seq = CandidateSequence(base=adj, removal_order=order, epsilon=float(config.epsilon))
    return seq, trace
