import logging

import attrs
import numpy as np

from lcar.errors import DimensionMismatch, ValidationError
from lcar.graph.adjacency import AdjacencyStructure, build_adjacency

logger = logging.getLogger(__name__)

TEMPLATE_LABELS = (-1, 0, 1)


def _labels(instance, attribute, value):
    if not np.all(np.isin(value, TEMPLATE_LABELS)):
        raise ValidationError(f"Template labels must be in {TEMPLATE_LABELS}")


@attrs.frozen(eq=False)
class MeanTemplate:
    """Piecewise-constant mean of the residual surface, one label per unit."""

    labels: np.ndarray = attrs.field(converter=lambda v: np.asarray(v, dtype=np.int64), validator=_labels)

    @property
    def n(self) -> int:
        return int(self.labels.size)


@attrs.frozen(eq=False)
class Geometry:
    adjacency: AdjacencyStructure
    centroids: np.ndarray
    template: MeanTemplate

    def __attrs_post_init__(self):
        n = self.adjacency.n
        if self.centroids.shape != (n, 2) or self.template.n != n:
            raise DimensionMismatch(
                f"Geometry disagrees on the number of units: adjacency {n}, "
                f"centroids {self.centroids.shape[0]}, template {self.template.n}"
            )


def three_band_template(centroids: np.ndarray) -> MeanTemplate:
    """Three contiguous vertical bands labelled -1, 0, 1 from left to right."""
    x = centroids[:, 0]
    width = np.ptp(x)
    if width == 0:
        return MeanTemplate(np.zeros(x.size, dtype=np.int64))
    band = np.minimum(np.floor(3.0 * (x - x.min()) / width), 2)
    return MeanTemplate(band.astype(np.int64) - 1)


def lattice_edges(side: int) -> list[tuple[int, int]]:
    """1-based rook adjacency of a side x side lattice numbered row by row."""
    edges = []
    for row in range(side):
        for col in range(side):
            k = row * side + col + 1
            if col + 1 < side:
                edges.append((k, k + 1))
            if row + 1 < side:
                edges.append((k, k + side))
    return edges


def lattice_geometry(side: int = 8) -> Geometry:
    if side < 2:
        raise ValidationError(f"Lattice side must be at least 2, got {side}")
    rows, cols = np.divmod(np.arange(side * side), side)
    centroids = np.column_stack([cols + 0.5, rows + 0.5]).astype(np.float64)
    adjacency = build_adjacency(lattice_edges(side), side * side)
    return Geometry(adjacency=adjacency, centroids=centroids, template=three_band_template(centroids))
