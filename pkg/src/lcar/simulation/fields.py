import logging
from functools import cached_property

import attrs
import numpy as np
from scipy import optimize
from scipy.spatial.distance import pdist, squareform
from scipy.special import gammaln, kve

from lcar.errors import NoBracket, SingularCovariance, ValidationError

logger = logging.getLogger(__name__)

JITTERS = (0.0, 1e-12, 1e-11, 1e-10)

# Relative size of negative eigenvalues tolerated (and clipped) when Cholesky fails.
EIGEN_TOLERANCE = 1e-8

CALIBRATION_TOLERANCE = 1e-6


def matern_correlation(distance, smoothness: float, range_: float) -> np.ndarray:
    """
    2^(1-nu) / Gamma(nu) (sqrt(2 nu) d / rho)^nu K_nu(sqrt(2 nu) d / rho).

    Evaluated in log space with the exponentially scaled Bessel function so large
    distances underflow cleanly to zero.
    """
    if not range_ > 0:
        raise ValidationError(f"Matern range must be positive, got {range_}")
    if not smoothness > 0:
        raise ValidationError(f"Matern smoothness must be positive, got {smoothness}")
    d = np.asarray(distance, dtype=np.float64)
    scaled = np.sqrt(2.0 * smoothness) * d / range_
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        log_corr = (
            (1.0 - smoothness) * np.log(2.0)
            - gammaln(smoothness)
            + smoothness * np.log(scaled)
            + np.log(kve(smoothness, scaled))
            - scaled
        )
        corr = np.exp(log_corr)
    corr = np.where(scaled == 0.0, 1.0, corr)
    return np.where(np.isfinite(corr), corr, 0.0)


def matern_covariance(centroids: np.ndarray, smoothness: float, range_: float) -> np.ndarray:
    return matern_correlation(squareform(pdist(centroids)), smoothness, range_)


def covariance_factor(cov: np.ndarray) -> np.ndarray:
    """A matrix L with L L' = cov, from Cholesky with at most 1e-10 jitter, else a clipped eigendecomposition."""
    identity = np.eye(cov.shape[0])
    for jitter in JITTERS:
        try:
            factor = np.linalg.cholesky(cov + jitter * identity)
            if jitter:
                logger.warning(f"Matern covariance needed jitter {jitter} to factorise")
            return factor
        except np.linalg.LinAlgError:
            continue
    eigenvalues, vectors = np.linalg.eigh(cov)
    if eigenvalues.min() < -EIGEN_TOLERANCE * eigenvalues.max():
        raise SingularCovariance(
            f"Matern covariance is indefinite (smallest eigenvalue {eigenvalues.min():.3e})"
        )
    logger.warning("Matern covariance is numerically singular; using a clipped eigendecomposition")
    return vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))


@attrs.frozen(eq=False, slots=False)
class MaternField:
    """Zero-mean, unit-variance Gaussian field with Matern correlation over fixed centroids."""

    centroids: np.ndarray
    smoothness: float
    range_: float

    def __attrs_post_init__(self):
        if self.centroids.shape[0] > 1 and np.min(pdist(self.centroids)) == 0:
            raise ValidationError("Centroids must be distinct")

    @cached_property
    def factor(self) -> np.ndarray:
        return covariance_factor(matern_covariance(self.centroids, self.smoothness, self.range_))

    def draw(self, rng: np.random.Generator, size: int = None) -> np.ndarray:
        n = self.centroids.shape[0]
        if size is None:
            return self.factor @ rng.standard_normal(n)
        return rng.standard_normal((size, n)) @ self.factor.T


def matern_field(centroids, smoothness: float, range_: float, rng: np.random.Generator) -> np.ndarray:
    return MaternField(np.asarray(centroids, dtype=np.float64), smoothness, range_).draw(rng)


def _median_correlation(distances: np.ndarray, smoothness: float, range_: float) -> float:
    return float(np.median(matern_correlation(distances, smoothness, range_)))


def calibrate_range(centroids, smoothness: float, target_median_corr: float) -> float:
    """Range at which the median pairwise Matern correlation equals the target, by bisection."""
    if not 0.0 < target_median_corr < 1.0:
        raise ValidationError(f"Target median correlation must lie in (0, 1), got {target_median_corr}")
    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.shape[0] < 2:
        raise ValidationError("At least two centroids are needed to calibrate a range")
    distances = pdist(centroids)
    positive = distances[distances > 0]
    if positive.size == 0:
        raise NoBracket("All centroids coincide; no range reaches the target correlation")

    def gap(range_):
        return _median_correlation(distances, smoothness, range_) - target_median_corr

    lo, hi = positive.min(), positive.max()
    for _ in range(200):
        if gap(lo) < 0:
            break
        lo /= 2.0
    else:
        raise NoBracket("Could not find a range with median correlation below the target")
    for _ in range(200):
        if gap(hi) > 0:
            break
        hi *= 2.0
    else:
        raise NoBracket("Could not find a range with median correlation above the target")

    range_ = optimize.bisect(gap, lo, hi, xtol=1e-14 * hi, rtol=1e-13, maxiter=1000)
    if abs(gap(range_)) >= CALIBRATION_TOLERANCE:
        raise NoBracket(f"Bisection ended {gap(range_):.2e} away from the target correlation")
    logger.debug(f"Calibrated Matern range {range_:.6f} for median correlation {target_median_corr}")
    return float(range_)
