import itertools
import logging
from typing import Optional

import attrs
import numpy as np

from lcar.errors import DimensionMismatch, EmptyTrace

logger = logging.getLogger(__name__)

# Largest replicate count for which every resample is enumerated.
MAX_EXHAUSTIVE_REPLICATES = 8


@attrs.frozen
class RmseReport:
    rmse: float
    lower: float
    upper: float
    n_replicates: int
    n_boot: int


def _replicate_errors(true_values, estimates) -> np.ndarray:
    estimates = np.asarray(estimates, dtype=np.float64)
    true_values = np.asarray(true_values, dtype=np.float64)
    if estimates.ndim == 0:
        raise DimensionMismatch("Estimates need a leading replicate axis")
    if estimates.shape[0] == 0:
        raise EmptyTrace("No replicates to score")
    try:
        shape = np.broadcast_shapes(true_values.shape, estimates.shape)
    except ValueError:
        raise DimensionMismatch(f"Truth {true_values.shape} and estimates {estimates.shape} are not aligned")
    if shape != estimates.shape:
        raise DimensionMismatch(f"Truth {true_values.shape} and estimates {estimates.shape} are not aligned")
    squared = (estimates - true_values) ** 2
    return squared.reshape(squared.shape[0], -1).mean(axis=1)


def rmse_report(
    true_values,
    estimates,
    n_boot: int = 1000,
    rng: Optional[np.random.Generator] = None,
    exhaustive: bool = False,
    level: float = 0.95,
) -> RmseReport:
    """
    Root mean square error over replicates (axis 0) with a percentile bootstrap
    interval from resampling whole replicates.

    With `exhaustive` every one of the R^R resamples is used instead of `n_boot`
    random ones.
    """
    errors = _replicate_errors(true_values, estimates)
    n_rep = errors.size
    rmse = float(np.sqrt(errors.mean()))

    if exhaustive:
        if n_rep > MAX_EXHAUSTIVE_REPLICATES:
            raise DimensionMismatch(f"Exhaustive bootstrap over {n_rep} replicates is too large")
        index = np.array(list(itertools.product(range(n_rep), repeat=n_rep)))
    else:
        rng = rng if rng is not None else np.random.default_rng()
        index = rng.integers(0, n_rep, size=(n_boot, n_rep))
    boot = np.sqrt(errors[index].mean(axis=1))
    tail = (1.0 - level) / 2.0
    lower, upper = np.quantile(boot, [tail, 1.0 - tail])
    return RmseReport(
        rmse=rmse,
        lower=float(lower),
        upper=float(upper),
        n_replicates=n_rep,
        n_boot=int(index.shape[0]),
    )
