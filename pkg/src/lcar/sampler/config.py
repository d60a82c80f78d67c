import logging
from typing import Optional, Tuple

import attrs
import numpy as np

from lcar.common import BETA_PRIOR_VARIANCE, DEFAULT_EPSILON, TAU2_MAX, stream_seed
from lcar.errors import ValidationError

logger = logging.getLogger(__name__)


def _distinct(instance, attribute, value):
    if value is None:
        return
    if len(set(value)) != len(value):
        raise ValidationError("Chain seeds must be distinct")
    if len(value) != instance.n_chains:
        raise ValidationError(f"{len(value)} chain seeds given for {instance.n_chains} chains")


@attrs.define
class SamplerConfig:
    n_chains: int = attrs.field(default=3, validator=attrs.validators.ge(1))
    burn_in: int = attrs.field(default=100_000, validator=attrs.validators.ge(0))
    keep: int = attrs.field(default=50_000, validator=attrs.validators.ge(0))
    thin: int = attrs.field(default=1, validator=attrs.validators.ge(1))
    # Half-width of the window the candidate move proposes from.
    q: int = attrs.field(default=5, validator=attrs.validators.ge(1))
    epsilon: float = attrs.field(default=DEFAULT_EPSILON, validator=attrs.validators.gt(0))
    seed: int = 17
    chain_seeds: Optional[Tuple[int, ...]] = attrs.field(
        default=None,
        converter=attrs.converters.optional(tuple),
        validator=_distinct,
    )
    site_target: float = 0.44
    block_target: float = 0.35
    # Iterations between adaptation updates during burn-in.
    adapt_every: int = attrs.field(default=50, validator=attrs.validators.ge(1))
    initial_site_sd: float = 0.1
    # Switches the Poisson likelihood off, leaving prior-only sampling. For testing.
    use_likelihood: bool = True
    workers: int = 1
    rate_floor: float = 1e-12
    # Prior hyperparameters: Uniform(0, variance_max] on tau2 and sigma2, N(0, beta_prior_variance) on each beta.
    variance_max: float = attrs.field(default=TAU2_MAX, validator=attrs.validators.gt(0))
    beta_prior_variance: float = attrs.field(default=BETA_PRIOR_VARIANCE, validator=attrs.validators.gt(0))

    @property
    def n_saved(self) -> int:
        return self.keep // self.thin

    def chain_seed(self, chain: int) -> int:
        if self.chain_seeds is not None:
            return int(self.chain_seeds[chain])
        return stream_seed(self.seed, "chain", chain)

    def rng(self, chain: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.chain_seed(chain)))
