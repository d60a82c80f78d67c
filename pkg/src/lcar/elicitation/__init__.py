from lcar.elicitation.elicit import (
    ElicitationConfig,
    ElicitationStep,
    ElicitationTrace,
    PriorData,
    candidate_loglik,
    elicit_sequence,
    ml_estimates,
)
