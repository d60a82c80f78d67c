import hashlib
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import attrs

from lcar import __version__
from lcar.graph.precision import cholmod

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

# Modelling choices in effect for every run, recorded so results can be interpreted.
DESIGN_FLAGS = {
    "zero_count_correction": 0.5,
    "tie_break": "smallest_canonical_edge_index",
    "island_policy": "islands_never_linked_to_global_node",
    "iar_constraint": "sum_to_zero_per_component_overall_level_into_intercept",
    "iar_islands": "held_at_zero",
    "bym_sigma2_prior": "uniform(0,1000]",
    "tau2_prior": "uniform(0,1000]",
    "beta_prior": "normal(0,1000)",
    "candidate_boundary_correction": True,
    "adaptation": "robbins_monro_burn_in_only",
    "initial_values": "poisson_glm",
    "residual_type": "pearson_at_posterior_mean_fitted",
    "fitted_values": "posterior_mean",
    "simulated_field_variance": 1.0,
    "prior_period_counts": "fresh_poisson_draws",
    "factorisation": "superlu" if cholmod is None else "cholmod",
}


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@attrs.define
class RunManifest:
    command: str
    argv: List[str]
    config: Dict = attrs.field(factory=dict)
    # Resolved command options; a rerun replays exactly these.
    options: Dict = attrs.field(factory=dict)
    inputs: Dict[str, str] = attrs.field(factory=dict)
    seeds: Dict = attrs.field(factory=dict)
    standardisation: Dict = attrs.field(factory=dict)
    flags: Dict = attrs.field(factory=lambda: dict(DESIGN_FLAGS))
    version: str = __version__
    started: str = attrs.field(factory=_now)
    finished: Optional[str] = None
    status: str = "running"
    error: Optional[str] = None

    def record_input(self, path) -> None:
        path = Path(path)
        if path.is_dir():
            for child in sorted(p for p in path.iterdir() if p.is_file() and p.name != MANIFEST_NAME):
                self.inputs[str(child)] = file_digest(child)
        else:
            self.inputs[str(path)] = file_digest(path)

    def changed_inputs(self) -> List[str]:
        return [
            path for path, digest in self.inputs.items()
            if not Path(path).exists() or file_digest(path) != digest
        ]

    def finish(self, status: str, error: Optional[str] = None) -> None:
        self.status = status
        self.error = error
        self.finished = _now()

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(attrs.asdict(self), indent=2, default=str))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        return cls(**json.loads(path.read_text()))
