from lcar.simulation.fields import MaternField, calibrate_range, matern_correlation, matern_field
from lcar.simulation.geometry import Geometry, MeanTemplate, lattice_geometry, three_band_template
from lcar.simulation.scenarios import (
    Replicate,
    ReplicateEstimate,
    SimScenario,
    StudyConfig,
    TruthRecord,
    epsilon_sensitivity,
    fit_replicate,
    generate_replicate,
    full_grid,
    run_scenarios,
)
