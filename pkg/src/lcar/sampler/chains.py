import logging
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, Optional, Tuple

import attrs
import numpy as np
import statsmodels.api as sm

from lcar.common import MODEL, parse_model
from lcar.errors import DegenerateProposal, ValidationError
from lcar.graph.adjacency import AdjacencyStructure, CandidateSequence
from lcar.graph.precision import precompute_logdets
from lcar.model.data import ChainState, Dataset
from lcar.model.likelihood import deviance_from_eta
from lcar.sampler.config import SamplerConfig
from lcar.sampler.updates import ChainContext, ProposalState, Tally, recentre, sweep

logger = logging.getLogger(__name__)


@attrs.frozen(eq=False)
class PosteriorSamples:
    """
    Kept draws of every chain. Arrays are indexed (chain, draw, ...); `candidate_j`
    is present for LCAR only and `theta`/`sigma2` for BYM only.
    """

    model: MODEL
    beta: np.ndarray
    tau2: np.ndarray
    phi: np.ndarray
    phi_star: np.ndarray
    deviance: np.ndarray
    acceptance: Tuple[Dict[str, float], ...]
    seeds: Tuple[int, ...]
    candidate_j: Optional[np.ndarray] = None
    theta: Optional[np.ndarray] = None
    sigma2: Optional[np.ndarray] = None
    n_edges: Optional[int] = None
    rate_floored: Tuple[int, ...] = ()

    @property
    def n_chains(self) -> int:
        return int(self.beta.shape[0])

    @property
    def n_draws(self) -> int:
        return int(self.beta.shape[1])

    def pooled(self, name: str) -> np.ndarray:
        values = getattr(self, name)
        return values.reshape((-1,) + values.shape[2:])

    def edges_removed(self) -> np.ndarray:
        if self.candidate_j is None:
            raise ValidationError(f"{self.model.name} samples carry no candidate index trace")
        return self.n_edges - self.candidate_j

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        """(chain, draw, unit) linear predictors of every kept draw."""
        eta = np.einsum("cdp,np->cdn", self.beta, X) + self.phi
        if self.theta is not None:
            eta = eta + self.theta
        return eta


@attrs.frozen(eq=False)
class GlmStart:
    params: np.ndarray
    cov: np.ndarray


def glm_start(data: Dataset) -> GlmStart:
    """Covariate-only Poisson GLM fit used for initial values and the first beta proposal."""
    try:
        fit = sm.GLM(data.Y, data.X, family=sm.families.Poisson(), offset=np.log(data.E)).fit()
        params = np.asarray(fit.params)
        cov = np.asarray(fit.cov_params())
        if not (np.all(np.isfinite(params)) and np.all(np.isfinite(cov))):
            raise ValueError("non-finite GLM estimates")
        np.linalg.cholesky(cov)
        return GlmStart(params=params, cov=cov)
    except (ValueError, np.linalg.LinAlgError) as e:
        logger.warning(f"Could not fit initial GLM, starting from the pooled rate. Error: {e}")
        params = np.zeros(data.X.shape[1])
        params[0] = np.log(max(data.Y.sum(), 0.5) / data.E.sum())
        return GlmStart(params=params, cov=np.eye(data.X.shape[1]) * 1e-2)


def initial_state(ctx: ChainContext, start: GlmStart, rng: np.random.Generator) -> ChainState:
    """Dispersed starting values around the GLM fit, distinct for every chain."""
    n = ctx.data.n
    beta = rng.multivariate_normal(start.params, start.cov)
    phi = np.where(ctx.sampled_units, 0.1 * rng.standard_normal(n), 0.0)
    state = ChainState(beta=beta, tau2=float(rng.uniform(0.1, 1.0)), phi=phi)
    if ctx.model == MODEL.LCAR:
        state.candidate_j = int(rng.integers(0, ctx.seq.n_edges + 1))
    else:
        state = recentre(state, ctx)
    if ctx.model == MODEL.BYM:
        state.theta = 0.1 * rng.standard_normal(n)
        state.sigma2 = float(rng.uniform(0.1, 1.0))
    return state


@attrs.frozen(eq=False)
class ChainDraws:
    beta: np.ndarray
    tau2: np.ndarray
    phi: np.ndarray
    phi_star: np.ndarray
    deviance: np.ndarray
    candidate_j: Optional[np.ndarray]
    theta: Optional[np.ndarray]
    sigma2: Optional[np.ndarray]
    acceptance: Dict[str, float]
    rate_floored: int


def run_chain(
    ctx: ChainContext,
    chain: int,
    start: GlmStart,
    candidate_target: Optional[Callable[[int], float]] = None,
) -> ChainDraws:
    config = ctx.config
    rng = config.rng(chain)
    state = initial_state(ctx, start, rng)
    proposal = ProposalState.initial(ctx.data.n, start.cov, config, with_theta=ctx.model == MODEL.BYM)
    proposal.adapting = config.burn_in > 0
    tally = Tally()

    n_saved, n = config.n_saved, ctx.data.n
    beta = np.empty((n_saved, ctx.data.X.shape[1]))
    tau2, phi_star, dev = np.empty(n_saved), np.empty(n_saved), np.empty(n_saved)
    phi = np.empty((n_saved, n))
    candidate_j = np.empty(n_saved, dtype=np.int64) if ctx.model == MODEL.LCAR else None
    theta = np.empty((n_saved, n)) if ctx.model == MODEL.BYM else None
    sigma2 = np.empty(n_saved) if ctx.model == MODEL.BYM else None

    logger.info(f"Chain {chain}: {config.burn_in} burn-in and {config.keep} kept iterations of {ctx.model.name}")
    saved = 0
    for iteration in range(config.burn_in + config.keep):
        if iteration == config.burn_in and proposal.adapting:
            proposal.adapting = False
            logger.info(f"Chain {chain}: burn-in finished, acceptance {_format_rates(tally.rates())}")
            tally = Tally()
        state = sweep(state, ctx, proposal, tally, rng, candidate_target)

        if proposal.adapting:
            proposal.observe(state.beta)
            if (iteration + 1) % config.adapt_every == 0:
                try:
                    proposal.adapt(config)
                except DegenerateProposal as e:
                    logger.warning(f"Chain {chain}: {e}; resetting the beta proposal to its initial covariance")
                    proposal.reset_beta()

        kept = iteration - config.burn_in + 1
        if kept > 0 and kept % config.thin == 0:
            beta[saved] = state.beta
            tau2[saved] = state.tau2
            phi[saved] = state.phi
            phi_star[saved] = state.phi_star
            eta = ctx.data.X @ state.beta + state.phi
            if ctx.model == MODEL.BYM:
                theta[saved] = state.theta
                sigma2[saved] = state.sigma2
                eta = eta + state.theta
            if candidate_j is not None:
                candidate_j[saved] = state.candidate_j
            dev[saved] = deviance_from_eta(ctx.data, eta)
            saved += 1

    if tally.rate_floored:
        logger.warning(
            f"Chain {chain}: variance rate floored at {config.rate_floor} in {tally.rate_floored} draws"
        )
    logger.info(f"Chain {chain}: finished, kept-phase acceptance {_format_rates(tally.rates())}")
    return ChainDraws(
        beta=beta,
        tau2=tau2,
        phi=phi,
        phi_star=phi_star,
        deviance=dev,
        candidate_j=candidate_j,
        theta=theta,
        sigma2=sigma2,
        acceptance=tally.rates(),
        rate_floored=tally.rate_floored,
    )


def _format_rates(rates: Dict[str, float]) -> str:
    return ", ".join(f"{block}={rate:.3f}" for block, rate in sorted(rates.items())) or "n/a"


def _run_chain(args) -> ChainDraws:
    # Top-level so worker processes can unpickle it.
    ctx, chain, start = args
    return run_chain(ctx, chain, start)


def run_chains(
    data: Dataset,
    seq: Optional[CandidateSequence],
    model,
    config: Optional[SamplerConfig] = None,
    adjacency: Optional[AdjacencyStructure] = None,
    candidate_target: Optional[Callable[[int], float]] = None,
) -> PosteriorSamples:
    """
    Run `config.n_chains` independent chains of the LCAR, IAR or BYM model.

    IAR and BYM use `adjacency` (or the base geography of `seq` when given) and
    ignore the candidate sequence. `candidate_target` replaces the candidate
    move's target and forces sequential chains.
    """
    config = config or SamplerConfig()
    model = parse_model(model)
    if adjacency is None:
        if seq is None:
            raise ValidationError("An adjacency structure or a candidate sequence is required")
        adjacency = seq.base
    if model == MODEL.LCAR:
        if seq is None:
            raise ValidationError("The LCAR model needs an elicited candidate sequence")
        if seq.base.digest != adjacency.digest:
            raise ValidationError("The candidate sequence was elicited on a different adjacency structure")
        if seq.precomputed_logdet is None or seq.epsilon != config.epsilon:
            seq = precompute_logdets(seq, config.epsilon)
    else:
        seq = None

    ctx = ChainContext(data=data, model=model, adjacency=adjacency, config=config, seq=seq)
    start = glm_start(data)
    chains = range(config.n_chains)
    if config.workers > 1 and candidate_target is None:
        mp_context = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=config.workers, mp_context=mp_context) as pool:
            draws = list(pool.map(_run_chain, [(ctx, c, start) for c in chains]))
    else:
        draws = [run_chain(ctx, c, start, candidate_target) for c in chains]

    def stack(name):
        values = [getattr(d, name) for d in draws]
        return None if values[0] is None else np.stack(values)

    return PosteriorSamples(
        model=model,
        beta=stack("beta"),
        tau2=stack("tau2"),
        phi=stack("phi"),
        phi_star=stack("phi_star"),
        deviance=stack("deviance"),
        candidate_j=stack("candidate_j"),
        theta=stack("theta"),
        sigma2=stack("sigma2"),
        acceptance=tuple(d.acceptance for d in draws),
        seeds=tuple(config.chain_seed(c) for c in chains),
        n_edges=seq.n_edges if seq is not None else None,
        rate_floored=tuple(d.rate_floored for d in draws),
    )
