import logging
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple

import attrs
import numpy as np
import pandas as pd

from lcar.common import DEFAULT_EPSILON, MODEL, parse_model, stream_seed, substream
from lcar.diagnostics.rmse import rmse_report
from lcar.elicitation import ElicitationConfig, PriorData, elicit_sequence
from lcar.errors import ValidationError
from lcar.model.data import Dataset
from lcar.sampler import SamplerConfig, run_chains
from lcar.simulation.fields import MaternField, calibrate_range
from lcar.simulation.geometry import Geometry, MeanTemplate

logger = logging.getLogger(__name__)

GRID_MAGNITUDES = (0.5, 1.0, 1.5)
GRID_EXPECTED_RANGES = ((10.0, 25.0), (50.0, 100.0), (150.0, 250.0))


def _positive_range(instance, attribute, value):
    lo, hi = value
    if not 0 < lo <= hi:
        raise ValidationError(f"{attribute.name} must be a positive interval, got {value}")


@attrs.frozen
class SimScenario:
    M: float = attrs.field(default=1.0, validator=attrs.validators.ge(0))
    e_range: Tuple[float, float] = attrs.field(default=(50.0, 100.0), converter=tuple, validator=_positive_range)
    beta_true: float = 0.1
    smoothness: float = 2.5
    target_median_corr: float = attrs.field(default=0.5)
    r_prior: int = attrs.field(default=3, validator=attrs.validators.ge(1))
    prior_noise: Tuple[float, float] = attrs.field(default=(-0.1, 0.1), converter=tuple)
    n_replicates: int = attrs.field(default=500, validator=attrs.validators.ge(1))
    seed: int = 1

    @target_median_corr.validator
    def _check_corr(self, attribute, value):
        if not 0 < value < 1:
            raise ValidationError(f"target_median_corr must lie in (0, 1), got {value}")

    @property
    def label(self) -> str:
        lo, hi = self.e_range
        return f"M={self.M:g},E={lo:g}-{hi:g}"

    @classmethod
    def parse(cls, text: str, **kwargs) -> "SimScenario":
        """Scenario from 'M=1,E=50-100'."""
        fields = {}
        try:
            for part in text.split(","):
                key, _, value = part.partition("=")
                key = key.strip().upper()
                if key == "M":
                    fields["M"] = float(value)
                elif key == "E":
                    lo, _, hi = value.partition("-")
                    fields["e_range"] = (float(lo), float(hi))
                else:
                    raise ValidationError(f"Unknown scenario key '{key}' in '{text}'")
            return cls(**{**kwargs, **fields})
        except ValueError as e:
            raise ValidationError(f"Invalid scenario '{text}': {e}")


def full_grid(**kwargs) -> List[SimScenario]:
    """All nine magnitude and expected-count combinations."""
    return [SimScenario(M=M, e_range=e, **kwargs) for M in GRID_MAGNITUDES for e in GRID_EXPECTED_RANGES]


@attrs.frozen(eq=False)
class TruthRecord:
    beta: float
    covariate: np.ndarray
    residual: np.ndarray
    log_risk: np.ndarray
    fitted: np.ndarray


@attrs.frozen(eq=False)
class Replicate:
    dataset: Dataset
    prior_observed: List[np.ndarray]
    prior_expected: List[np.ndarray]
    truth: TruthRecord


def generate_replicate(
    scenario: SimScenario,
    template: MeanTemplate,
    centroids: np.ndarray,
    rng: np.random.Generator,
    field: Optional[MaternField] = None,
) -> Replicate:
    """
    One simulated study period plus `r_prior` prior periods.

    Covariate and residual are fresh, independent Matern draws; the residual is
    shifted by M times the template. Prior periods perturb the residual with
    uniform noise and redraw expected and observed counts.
    """
    n = template.n
    if centroids.shape[0] != n:
        raise ValidationError(f"Template has {n} units, centroids {centroids.shape[0]}")
    if field is None:
        range_ = calibrate_range(centroids, scenario.smoothness, scenario.target_median_corr)
        field = MaternField(centroids, scenario.smoothness, range_)
    x = field.draw(rng)
    residual = scenario.M * template.labels + field.draw(rng)
    E = rng.uniform(*scenario.e_range, size=n)
    log_risk = scenario.beta_true * x + residual
    Y = rng.poisson(E * np.exp(log_risk))

    prior_observed, prior_expected = [], []
    for _ in range(scenario.r_prior):
        perturbed = residual + rng.uniform(*scenario.prior_noise, size=n)
        E_p = rng.uniform(*scenario.e_range, size=n)
        prior_observed.append(rng.poisson(E_p * np.exp(scenario.beta_true * x + perturbed)))
        prior_expected.append(E_p)

    return Replicate(
        dataset=Dataset.validated(Y, E, x[:, None], covariate_names=("x",)),
        prior_observed=prior_observed,
        prior_expected=prior_expected,
        truth=TruthRecord(
            beta=scenario.beta_true,
            covariate=x,
            residual=residual,
            log_risk=log_risk,
            fitted=E * np.exp(log_risk),
        ),
    )


@attrs.frozen(eq=False)
class ReplicateEstimate:
    beta_hat: float
    fitted: np.ndarray


def _short_sampler() -> SamplerConfig:
    return SamplerConfig(n_chains=1, burn_in=5_000, keep=5_000)


@attrs.frozen(eq=False)
class StudyConfig:
    scenarios: List[SimScenario] = attrs.field(factory=list)
    models: Tuple[str, ...] = ("iar", "bym", "lcar")
    sampler: SamplerConfig = attrs.field(factory=_short_sampler)
    epsilon: float = DEFAULT_EPSILON
    n_boot: int = 1000
    workers: int = 1


def fit_replicate(
    model: MODEL,
    replicate: Replicate,
    geometry: Geometry,
    sampler: SamplerConfig,
    epsilon: float,
) -> ReplicateEstimate:
    """Posterior median of the covariate effect and posterior-mean fitted values."""
    data = replicate.dataset
    seq = None
    sampler = attrs.evolve(sampler, epsilon=epsilon, workers=1)
    if model == MODEL.LCAR:
        prior = PriorData.from_counts(replicate.prior_observed, replicate.prior_expected, data.X)
        seq, _ = elicit_sequence(geometry.adjacency, prior, config=ElicitationConfig(epsilon=epsilon))
    samples = run_chains(data, seq, model, sampler, adjacency=geometry.adjacency)
    beta_hat = float(np.median(samples.pooled("beta")[:, 1]))
    eta = samples.linear_predictor(data.X).reshape(-1, data.n)
    fitted = (data.E * np.exp(eta)).mean(axis=0)
    return ReplicateEstimate(beta_hat=beta_hat, fitted=fitted)


FitFn = Callable[[MODEL, Replicate, Geometry, SamplerConfig, float], ReplicateEstimate]


@attrs.frozen(eq=False)
class ReplicateResult:
    scenario: int
    index: int
    replicate: Replicate
    estimates: dict


def _run_replicate(args) -> ReplicateResult:
    s, scenario, index, geometry, field, models, sampler, epsilon, fit_fn = args
    replicate = generate_replicate(
        scenario, geometry.template, geometry.centroids, substream(scenario.seed, "replicate", index), field
    )
    estimates = {}
    for m, model in enumerate(models):
        seeded = attrs.evolve(sampler, seed=stream_seed(scenario.seed, "chain", index, m), chain_seeds=None)
        estimates[model.name.lower()] = fit_fn(model, replicate, geometry, seeded, epsilon)
    logger.debug(f"Scenario {scenario.label}: replicate {index + 1}/{scenario.n_replicates} done")
    return ReplicateResult(scenario=s, index=index, replicate=replicate, estimates=estimates)


def run_scenarios(
    config: StudyConfig,
    geometry: Geometry,
    fit_fn: Optional[FitFn] = None,
    on_replicate: Optional[Callable[[SimScenario, ReplicateResult], None]] = None,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Simulate every scenario, fit every model and score the estimates.

    Returns the aggregate table (`scenario,model,beta_rmse,beta_lower,...`) and the
    per-replicate estimates of beta. `fit_fn` replaces the posterior fit; it must be
    a module-level function when `config.workers > 1`.
    """
    fit_fn = fit_fn or fit_replicate
    models = [parse_model(m) for m in config.models]
    rows, replicate_rows = [], []
    for s, scenario in enumerate(config.scenarios):
        range_ = calibrate_range(geometry.centroids, scenario.smoothness, scenario.target_median_corr)
        field = MaternField(geometry.centroids, scenario.smoothness, range_)
        logger.info(
            f"Scenario {scenario.label}: {scenario.n_replicates} replicates, Matern range {range_:.4f}"
        )
        tasks = [
            (s, scenario, i, geometry, field, models, config.sampler, config.epsilon, fit_fn)
            for i in range(scenario.n_replicates)
        ]
        if config.workers > 1:
            with ProcessPoolExecutor(max_workers=config.workers, mp_context=mp.get_context("spawn")) as pool:
                results = list(pool.map(_run_replicate, tasks))
        else:
            results = [_run_replicate(task) for task in tasks]

        for result in results:
            if on_replicate is not None:
                on_replicate(scenario, result)
            for name, estimate in result.estimates.items():
                replicate_rows.append(
                    {"scenario": scenario.label, "replicate": result.index + 1, "model": name, "beta_hat": estimate.beta_hat}
                )

        for m, model in enumerate(models):
            name = model.name.lower()
            beta_hat = np.array([r.estimates[name].beta_hat for r in results])
            fitted = np.stack([r.estimates[name].fitted for r in results])
            fitted_truth = np.stack([r.replicate.truth.fitted for r in results])
            beta = rmse_report(scenario.beta_true, beta_hat, config.n_boot, substream(scenario.seed, "bootstrap", s, m, 0))
            fit = rmse_report(fitted_truth, fitted, config.n_boot, substream(scenario.seed, "bootstrap", s, m, 1))
            rows.append(
                {
                    "scenario": scenario.label,
                    "M": scenario.M,
                    "e_lower": scenario.e_range[0],
                    "e_upper": scenario.e_range[1],
                    "model": name,
                    "n_replicates": beta.n_replicates,
                    "beta_rmse": beta.rmse,
                    "beta_lower": beta.lower,
                    "beta_upper": beta.upper,
                    "fitted_rmse": fit.rmse,
                    "fitted_lower": fit.lower,
                    "fitted_upper": fit.upper,
                }
            )
            logger.info(f"Scenario {scenario.label}, {name}: beta RMSE {beta.rmse:.4f}, fitted RMSE {fit.rmse:.3f}")
    return pd.DataFrame(rows), pd.DataFrame(replicate_rows)


def epsilon_sensitivity(
    config: StudyConfig,
    geometry: Geometry,
    epsilons: Sequence[float],
    fit_fn: Optional[FitFn] = None,
) -> pd.DataFrame:
    """LCAR beta RMSE at each epsilon, relative to the first epsilon given."""
    frames = []
    for epsilon in epsilons:
        table, _ = run_scenarios(attrs.evolve(config, models=("lcar",), epsilon=float(epsilon)), geometry, fit_fn)
        frames.append(table.assign(epsilon=float(epsilon)))
    table = pd.concat(frames, ignore_index=True)
    baseline = table[table["epsilon"] == float(epsilons[0])].set_index("scenario")["beta_rmse"]
    table["relative_change"] = table["beta_rmse"] / table["scenario"].map(baseline) - 1.0
    return table
