from lcar.sampler.chains import PosteriorSamples, glm_start, run_chains
from lcar.sampler.config import SamplerConfig
from lcar.sampler.updates import (
    candidate_window,
    draw_truncated_inverse_gamma,
    update_beta,
    update_candidate,
    update_phi,
    update_sigma2,
    update_tau2,
    update_theta,
)
