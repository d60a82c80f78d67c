from lcar.graph.adjacency import (
    AdjacencyStructure,
    CandidateSequence,
    EdgeState,
    build_adjacency,
    candidate,
    extended_row_sums,
    full_state,
)
from lcar.graph.precision import (
    PrecisionMatrix,
    SubPrecision,
    build_precision,
    build_sub_precision,
    edge_delta_logdet,
    log_det,
    precompute_logdets,
    quad_form,
)
