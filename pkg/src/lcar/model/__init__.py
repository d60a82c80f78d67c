from lcar.model.data import ChainState, Dataset, linear_predictor, relative_risk
from lcar.model.likelihood import deviance, deviance_from_eta, log_poisson_lik, unit_log_lik
from lcar.model.priors import (
    GLOBAL_NODE,
    bym_logprior,
    iar_conditional_moments,
    iar_logprior,
    iar_partial_correlation,
    iar_phi_full_conditional,
    lcar_conditional_moments,
    lcar_joint_logprior,
    lcar_phi_full_conditional,
    lcar_quad_form,
)
