from lcar.diagnostics.fit import (
    FitSummary,
    RelativeRisk,
    convergence_report,
    dic,
    overdispersion,
    potential_scale_reduction,
    relative_risks,
    screen_covariates,
    summarise,
)
from lcar.diagnostics.rmse import RmseReport, rmse_report
from lcar.diagnostics.spatial import (
    EdgesRemovedDensity,
    edge_removal_probabilities,
    edges_removed_density,
    morans_i,
    morans_i_test,
    pearson_residuals,
    spatial_weights,
    unit_summaries,
)
