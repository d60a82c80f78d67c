import logging
from functools import cached_property
from typing import Callable, Dict, Optional

import attrs
import networkx as nx
import numpy as np
from scipy import stats

from lcar.common import MODEL, TAU2_MAX
from lcar.errors import DegenerateProposal, DimensionMismatch, ValidationError
from lcar.graph.adjacency import AdjacencyStructure, CandidateSequence, EdgeState
from lcar.model.data import ChainState, Dataset
from lcar.model.likelihood import unit_log_lik
from lcar.model.priors import (
    iar_conditional_moments,
    iar_quad_form,
    iar_rank,
    lcar_conditional_moments,
    lcar_joint_logprior,
    lcar_quad_form,
)
from lcar.sampler.config import SamplerConfig

logger = logging.getLogger(__name__)

# Optimal random-walk scaling for a d-dimensional Gaussian block is 2.38^2 / d.
BLOCK_SCALING = 2.38**2

LOG_SD_BOUNDS = (-10.0, 5.0)

# Beta draws needed per dimension before the empirical covariance replaces the initial one.
MIN_DRAWS_PER_DIM = 10


def colour_classes(adj: AdjacencyStructure) -> list[np.ndarray]:
    """
    Partition the units into independent sets of the base geography.

    Every candidate's active edges are a subset of the base edges, so units sharing
    a colour are conditionally independent under every candidate and can be
    updated together.
    """
    graph = nx.Graph()
    graph.add_nodes_from(range(adj.n))
    graph.add_edges_from((int(a), int(b)) for a, b in adj.edges)
    colouring = nx.greedy_color(graph, strategy="largest_first")
    colours = np.array([colouring[k] for k in range(adj.n)], dtype=np.int64)
    return [np.flatnonzero(colours == c) for c in range(int(colours.max()) + 1)]


@attrs.define(eq=False, slots=False)
class ChainContext:
    """Everything a chain reads but never writes."""

    data: Dataset
    model: MODEL
    adjacency: AdjacencyStructure
    config: SamplerConfig
    seq: Optional[CandidateSequence] = None
    _edges: Dict[int, EdgeState] = attrs.field(factory=dict, init=False)

    def __attrs_post_init__(self):
        if self.data.n != self.adjacency.n:
            raise DimensionMismatch(
                f"Dataset has {self.data.n} units, adjacency has {self.adjacency.n}"
            )
        if self.model == MODEL.LCAR and self.seq is None:
            raise ValidationError("The LCAR model needs an elicited candidate sequence")

    def edges(self, j: int) -> EdgeState:
        if j not in self._edges:
            self._edges[j] = self.seq.candidate(j)
        return self._edges[j]

    @cached_property
    def colours(self) -> list[np.ndarray]:
        return colour_classes(self.adjacency)

    @cached_property
    def sampled_units(self) -> np.ndarray:
        """Units whose spatial effect is updated; IAR and BYM hold islands at zero."""
        if self.model == MODEL.LCAR:
            return np.ones(self.adjacency.n, dtype=bool)
        return ~self.adjacency.islands

    @cached_property
    def tau2_shape(self) -> float:
        """Shape of the inverse-gamma conditional of tau2 under its Uniform(0, variance_max] prior."""
        rank = self.adjacency.n + 1 if self.model == MODEL.LCAR else iar_rank(self.adjacency)
        shape = rank / 2.0 - 1.0
        if shape <= 0:
            raise ValidationError(f"Too few units ({self.adjacency.n}) to sample the spatial variance")
        return shape

    @cached_property
    def sigma2_shape(self) -> float:
        return self.adjacency.n / 2.0 - 1.0

    def log_lik(self, units, eta) -> np.ndarray:
        if not self.config.use_likelihood:
            return np.zeros(np.shape(eta))
        with np.errstate(over="ignore", invalid="ignore"):
            return unit_log_lik(self.data.Y[units], self.data.E[units], eta)


@attrs.define(eq=False)
class Tally:
    """Acceptance counts per block since the last reset."""

    accepted: Dict[str, int] = attrs.field(factory=dict)
    proposed: Dict[str, int] = attrs.field(factory=dict)
    rate_floored: int = 0

    def record(self, block: str, accepted: int, proposed: int) -> None:
        self.accepted[block] = self.accepted.get(block, 0) + int(accepted)
        self.proposed[block] = self.proposed.get(block, 0) + int(proposed)

    def rates(self) -> Dict[str, float]:
        return {
            block: self.accepted[block] / self.proposed[block]
            for block in self.proposed
            if self.proposed[block]
        }


@attrs.define(eq=False)
class ProposalState:
    """Random-walk scales for every MH block, adapted during burn-in only."""

    phi_log_sd: np.ndarray
    beta_initial_cov: np.ndarray
    theta_log_sd: Optional[np.ndarray] = None
    beta_log_scale: float = 0.0
    adapting: bool = True
    batches: int = 0
    beta_chol: np.ndarray = attrs.field(init=False, default=None)
    phi_accepts: np.ndarray = attrs.field(init=False, default=None)
    theta_accepts: Optional[np.ndarray] = attrs.field(init=False, default=None)
    beta_accepts: int = attrs.field(init=False, default=0)
    beta_count: int = attrs.field(init=False, default=0)
    beta_mean: np.ndarray = attrs.field(init=False, default=None)
    beta_m2: np.ndarray = attrs.field(init=False, default=None)

    def __attrs_post_init__(self):
        self.phi_accepts = np.zeros(self.phi_log_sd.size, dtype=np.int64)
        if self.theta_log_sd is not None:
            self.theta_accepts = np.zeros(self.theta_log_sd.size, dtype=np.int64)
        self.reset_beta()

    @classmethod
    def initial(cls, n: int, beta_cov: np.ndarray, config: SamplerConfig, with_theta: bool) -> "ProposalState":
        log_sd = np.full(n, np.log(config.initial_site_sd))
        return cls(
            phi_log_sd=log_sd,
            theta_log_sd=log_sd.copy() if with_theta else None,
            beta_initial_cov=np.asarray(beta_cov, dtype=np.float64),
        )

    @property
    def dim(self) -> int:
        return self.beta_initial_cov.shape[0]

    def set_beta_cov(self, cov: np.ndarray) -> None:
        scaled = np.exp(2.0 * self.beta_log_scale) * BLOCK_SCALING / self.dim * cov
        try:
            chol = np.linalg.cholesky(scaled)
        except np.linalg.LinAlgError:
            raise DegenerateProposal("Adapted beta proposal covariance is not positive definite")
        if not np.all(np.isfinite(chol)):
            raise DegenerateProposal("Adapted beta proposal covariance is not finite")
        self.beta_chol = chol

    def reset_beta(self) -> None:
        self.beta_log_scale = 0.0
        self.beta_count = 0
        self.beta_mean = np.zeros(self.dim)
        self.beta_m2 = np.zeros((self.dim, self.dim))
        self.set_beta_cov(self.beta_initial_cov)

    def observe(self, beta: np.ndarray) -> None:
        # Welford running covariance of the beta draws
        self.beta_count += 1
        delta = beta - self.beta_mean
        self.beta_mean = self.beta_mean + delta / self.beta_count
        self.beta_m2 = self.beta_m2 + np.outer(delta, beta - self.beta_mean)

    def adapt(self, config: SamplerConfig) -> None:
        """Robbins-Monro step on every scale from the last batch's acceptance rates."""
        self.batches += 1
        gain = min(0.5, self.batches**-0.5)
        self.phi_log_sd = np.clip(
            self.phi_log_sd + gain * (self.phi_accepts / config.adapt_every - config.site_target),
            *LOG_SD_BOUNDS,
        )
        self.phi_accepts[:] = 0
        if self.theta_log_sd is not None:
            self.theta_log_sd = np.clip(
                self.theta_log_sd + gain * (self.theta_accepts / config.adapt_every - config.site_target),
                *LOG_SD_BOUNDS,
            )
            self.theta_accepts[:] = 0
        self.beta_log_scale += gain * (self.beta_accepts / config.adapt_every - config.block_target)
        self.beta_accepts = 0
        if self.beta_count >= MIN_DRAWS_PER_DIM * self.dim:
            cov = self.beta_m2 / (self.beta_count - 1)
        else:
            cov = self.beta_initial_cov
        self.set_beta_cov(cov)
        logger.debug(
            f"Adaptation batch {self.batches}: beta log-scale {self.beta_log_scale:.3f}, "
            f"median site sd {np.exp(np.median(self.phi_log_sd)):.4f}"
        )


def candidate_window(j: int, q: int, n_edges: int) -> np.ndarray:
    """{j-q, ..., j-1, j+1, ..., j+q} clipped to 0..n_edges."""
    window = np.arange(max(0, j - q), min(n_edges, j + q) + 1)
    return window[window != j]


def update_candidate(
    state: ChainState,
    seq: CandidateSequence,
    q: int,
    rng: np.random.Generator,
    log_target: Optional[Callable[[int], float]] = None,
    tally: Optional[Tally] = None,
) -> ChainState:
    """
    Windowed MH move over the candidate index j.

    `log_target(j)` defaults to the LCAR joint log-prior of the current effects
    under candidate j; j enters nothing else.
    """
    window = candidate_window(state.candidate_j, q, seq.n_edges)
    if window.size == 0:
        return state
    proposed = int(window[rng.integers(window.size)])
    if log_target is None:
        def log_target(j):
            return lcar_joint_logprior(attrs.evolve(state, candidate_j=j), seq)

    reverse = candidate_window(proposed, q, seq.n_edges)
    log_ratio = (
        log_target(proposed)
        - log_target(state.candidate_j)
        + np.log(window.size)
        - np.log(reverse.size)
    )
    accepted = np.log(rng.uniform()) < log_ratio
    if tally is not None:
        tally.record("candidate", accepted, 1)
    return attrs.evolve(state, candidate_j=proposed) if accepted else state


def _site_step(
    values: np.ndarray,
    units: np.ndarray,
    mean: np.ndarray,
    variance: np.ndarray,
    eta_rest: np.ndarray,
    log_sd: np.ndarray,
    ctx: ChainContext,
    rng: np.random.Generator,
) -> np.ndarray:
    """Simultaneous single-site RW-MH for conditionally independent `units`."""
    current = values[units]
    proposed = current + np.exp(log_sd[units]) * rng.standard_normal(units.size)
    log_ratio = (
        ctx.log_lik(units, eta_rest[units] + proposed)
        - ctx.log_lik(units, eta_rest[units] + current)
        - ((proposed - mean) ** 2 - (current - mean) ** 2) / (2.0 * variance)
    )
    accepted = np.log(rng.uniform(size=units.size)) < log_ratio
    values[units] = np.where(accepted, proposed, current)
    return accepted


def update_phi(
    state: ChainState,
    ctx: ChainContext,
    proposal: ProposalState,
    tally: Tally,
    rng: np.random.Generator,
) -> ChainState:
    """One sweep over the spatial effects, colour class by colour class; LCAR then draws phi* exactly."""
    phi = state.phi.copy()
    eta_rest = ctx.data.X @ state.beta
    if state.theta is not None:
        eta_rest = eta_rest + state.theta
    epsilon = ctx.config.epsilon

    for units in ctx.colours:
        if ctx.model == MODEL.LCAR:
            edges = ctx.edges(state.candidate_j)
            mean, variance = lcar_conditional_moments(np.append(phi, state.phi_star), edges, epsilon, state.tau2)
        else:
            units = units[ctx.sampled_units[units]]
            if units.size == 0:
                continue
            mean, variance = iar_conditional_moments(phi, ctx.adjacency, state.tau2)
        accepted = _site_step(phi, units, mean[units], variance[units], eta_rest, proposal.phi_log_sd, ctx, rng)
        proposal.phi_accepts[units] += accepted
        tally.record("phi", accepted.sum(), units.size)

    phi_star = state.phi_star
    if ctx.model == MODEL.LCAR:
        # phi* is absent from the likelihood, so its conditional is exactly Gaussian.
        mean, variance = lcar_conditional_moments(
            np.append(phi, phi_star), ctx.edges(state.candidate_j), epsilon, state.tau2
        )
        phi_star = float(mean[-1] + np.sqrt(variance[-1]) * rng.standard_normal())
    return attrs.evolve(state, phi=phi, phi_star=phi_star)


def update_theta(
    state: ChainState,
    ctx: ChainContext,
    proposal: ProposalState,
    tally: Tally,
    rng: np.random.Generator,
) -> ChainState:
    """Independent BYM effects: all units updated together."""
    theta = state.theta.copy()
    units = np.arange(ctx.data.n)
    eta_rest = ctx.data.X @ state.beta + state.phi
    mean = np.zeros(units.size)
    variance = np.full(units.size, state.sigma2)
    accepted = _site_step(theta, units, mean, variance, eta_rest, proposal.theta_log_sd, ctx, rng)
    proposal.theta_accepts += accepted
    tally.record("theta", accepted.sum(), units.size)
    return attrs.evolve(state, theta=theta)


def update_beta(
    state: ChainState,
    ctx: ChainContext,
    proposal: ProposalState,
    tally: Tally,
    rng: np.random.Generator,
) -> ChainState:
    """Block random-walk MH on beta under independent N(0, beta_prior_variance) priors."""
    offset = state.phi if state.theta is None else state.phi + state.theta
    proposed = state.beta + proposal.beta_chol @ rng.standard_normal(state.beta.size)
    units = slice(None)
    log_ratio = (
        np.sum(ctx.log_lik(units, ctx.data.X @ proposed + offset))
        - np.sum(ctx.log_lik(units, ctx.data.X @ state.beta + offset))
        - (proposed @ proposed - state.beta @ state.beta) / (2.0 * ctx.config.beta_prior_variance)
    )
    accepted = bool(np.log(rng.uniform()) < log_ratio)
    proposal.beta_accepts += accepted
    tally.record("beta", accepted, 1)
    return attrs.evolve(state, beta=proposed) if accepted else state


def draw_truncated_inverse_gamma(
    shape: float,
    rate: float,
    rng: np.random.Generator,
    upper: float = TAU2_MAX,
) -> float:
    """
    One draw from InvGamma(shape, rate) restricted to (0, upper], by inverting the
    CDF of the precision 1/x, which is Gamma(shape, rate) restricted to [1/upper, inf).
    """
    scale = 1.0 / rate
    tail = stats.gamma.sf(1.0 / upper, shape, scale=scale)
    if tail <= 0.0:
        # All the mass sits against the bound.
        return float(upper)
    u = 1.0 - rng.uniform()
    precision = stats.gamma.isf(u * tail, shape, scale=scale)
    return float(min(1.0 / precision, upper))


def _variance_draw(shape: float, quad: float, ctx: ChainContext, tally: Tally, rng) -> float:
    rate = quad / 2.0
    if rate < ctx.config.rate_floor:
        tally.rate_floored += 1
        rate = ctx.config.rate_floor
    return draw_truncated_inverse_gamma(shape, rate, rng, upper=ctx.config.variance_max)


def update_tau2(state: ChainState, ctx: ChainContext, tally: Tally, rng: np.random.Generator) -> ChainState:
    if ctx.model == MODEL.LCAR:
        quad = lcar_quad_form(state.phi_extended, ctx.edges(state.candidate_j), ctx.config.epsilon)
    else:
        quad = iar_quad_form(state.phi, ctx.adjacency)
    return attrs.evolve(state, tau2=_variance_draw(ctx.tau2_shape, quad, ctx, tally, rng))


def update_sigma2(state: ChainState, ctx: ChainContext, tally: Tally, rng: np.random.Generator) -> ChainState:
    quad = float(state.theta @ state.theta)
    return attrs.evolve(state, sigma2=_variance_draw(ctx.sigma2_shape, quad, ctx, tally, rng))


def recentre(state: ChainState, ctx: ChainContext) -> ChainState:
    """
    Centre the IAR effects on every connected component, one improper direction
    each. The overall level of the non-island effects moves into the intercept.
    """
    units = ctx.sampled_units
    if not units.any():
        return state
    n_components, labels = ctx.adjacency.components
    labels = labels[units]
    phi = state.phi.copy()
    counts = np.bincount(labels, minlength=n_components)
    sums = np.bincount(labels, weights=phi[units], minlength=n_components)
    levels = np.divide(sums, counts, out=np.zeros(n_components), where=counts > 0)
    phi[units] -= levels[labels]
    beta = state.beta.copy()
    beta[0] += float(sums.sum() / counts.sum())
    return attrs.evolve(state, phi=phi, beta=beta)


def sweep(
    state: ChainState,
    ctx: ChainContext,
    proposal: ProposalState,
    tally: Tally,
    rng: np.random.Generator,
    candidate_target: Optional[Callable[[int], float]] = None,
) -> ChainState:
    if ctx.model == MODEL.LCAR:
        state = update_candidate(state, ctx.seq, ctx.config.q, rng, candidate_target, tally)
    state = update_phi(state, ctx, proposal, tally, rng)
    if ctx.model == MODEL.BYM:
        state = update_theta(state, ctx, proposal, tally, rng)
    state = update_beta(state, ctx, proposal, tally, rng)
    state = update_tau2(state, ctx, tally, rng)
    if ctx.model == MODEL.BYM:
        state = update_sigma2(state, ctx, tally, rng)
    if ctx.model != MODEL.LCAR:
        state = recentre(state, ctx)
    return state
