import attrs
import numpy as np
import pytest

from lcar.errors import SingularCovariance, ValidationError
from lcar.simulation import (
    MaternField,
    ReplicateEstimate,
    SimScenario,
    StudyConfig,
    calibrate_range,
    epsilon_sensitivity,
    full_grid,
    generate_replicate,
    lattice_geometry,
    matern_correlation,
    matern_field,
    run_scenarios,
    three_band_template,
)
from lcar.simulation.fields import covariance_factor
from lcar.simulation.geometry import MeanTemplate


def truthful_fit(model, replicate, geometry, sampler, epsilon):
    return ReplicateEstimate(beta_hat=replicate.truth.beta, fitted=replicate.truth.fitted)


def epsilon_biased_fit(model, replicate, geometry, sampler, epsilon):
    return ReplicateEstimate(beta_hat=replicate.truth.beta + epsilon, fitted=replicate.truth.fitted)


def test_exponential_case():
    d = np.array([0.0, 0.3, 1.0, 2.5, 7.0])
    np.testing.assert_allclose(matern_correlation(d, 0.5, 1.7), np.exp(-d / 1.7), rtol=1e-10)


def test_correlation_vanishes_for_tiny_range():
    assert matern_correlation(np.array([1.0]), 2.5, 1e-3)[0] == pytest.approx(0.0, abs=1e-12)
    assert matern_correlation(np.array([0.0]), 2.5, 1e-3)[0] == 1.0


def test_calibrate_two_points():
    centroids = np.array([[0.0, 0.0], [3.0, 4.0]])
    range_ = calibrate_range(centroids, 2.5, 0.5)
    assert matern_correlation(np.array([5.0]), 2.5, range_)[0] == pytest.approx(0.5, abs=1e-6)


@pytest.mark.parametrize("c", [0.25, 4.0])
def test_calibrated_range_scales_with_geometry(c):
    centroids = lattice_geometry(4).centroids
    assert calibrate_range(c * centroids, 2.5, 0.3) == pytest.approx(c * calibrate_range(centroids, 2.5, 0.3), rel=1e-6)


def test_calibrate_rejects_bad_target():
    with pytest.raises(ValidationError):
        calibrate_range(np.array([[0.0, 0.0], [1.0, 0.0]]), 2.5, 1.0)


def test_field_has_unit_variance():
    geometry = lattice_geometry(4)
    field = MaternField(geometry.centroids, 2.5, calibrate_range(geometry.centroids, 2.5, 0.5))
    draws = field.draw(np.random.default_rng(0), size=20_000)
    np.testing.assert_allclose(draws.var(axis=0), 1.0, atol=0.05)


def test_covariance_factor_fallbacks():
    singular = np.ones((3, 3))
    factor = covariance_factor(singular)
    np.testing.assert_allclose(factor @ factor.T, singular, atol=1e-8)
    with pytest.raises(SingularCovariance):
        covariance_factor(np.diag([1.0, -1.0]))


def test_matern_field_covariance():
    rng = np.random.default_rng(12)
    centroids = rng.uniform(0.0, 5.0, size=(10, 2))
    target = matern_correlation(np.linalg.norm(centroids[:, None] - centroids[None], axis=2), 2.5, 1.5)
    draws = np.array([matern_field(centroids, 2.5, 1.5, rng) for _ in range(5000)])
    assert draws.shape == (5000, 10)
    np.testing.assert_allclose(np.cov(draws.T), target, atol=0.1)


def test_matern_field_rejects_repeated_centroids():
    with pytest.raises(ValidationError):
        matern_field(np.array([[0.0, 0.0], [0.0, 0.0]]), 2.5, 1.0, np.random.default_rng(0))


def test_lattice_geometry():
    geometry = lattice_geometry(8)
    assert geometry.adjacency.n == 64
    assert geometry.adjacency.n_edges == 112
    np.testing.assert_allclose(geometry.centroids[9], [1.5, 1.5])
    labels = geometry.template.labels.reshape(8, 8)
    np.testing.assert_array_equal(labels[0], [-1, -1, -1, 0, 0, 1, 1, 1])
    assert np.all(labels == labels[0])


def test_template_labels_validated():
    with pytest.raises(ValidationError):
        MeanTemplate(np.array([0, 2]))


def test_three_band_template_on_line():
    centroids = np.column_stack([np.arange(6.0), np.zeros(6)])
    np.testing.assert_array_equal(three_band_template(centroids).labels, [-1, -1, 0, 0, 1, 1])


def test_scenario_parsing():
    scenario = SimScenario.parse("M=1.5,E=150-250", n_replicates=10)
    assert scenario.M == 1.5
    assert scenario.e_range == (150.0, 250.0)
    assert scenario.n_replicates == 10
    assert scenario.label == "M=1.5,E=150-250"
    with pytest.raises(ValidationError):
        SimScenario.parse("M=1,F=2")
    with pytest.raises(ValidationError):
        SimScenario.parse("M=abc")
    assert len(full_grid()) == 9


def test_generated_replicate():
    geometry = lattice_geometry(4)
    scenario = SimScenario(M=1.0, e_range=(50.0, 100.0), r_prior=3)
    first = generate_replicate(scenario, geometry.template, geometry.centroids, np.random.default_rng(3))
    again = generate_replicate(scenario, geometry.template, geometry.centroids, np.random.default_rng(3))
    data = first.dataset
    assert data.covariate_names == ("x",)
    assert not data.standardised
    np.testing.assert_array_equal(data.X[:, 1], first.truth.covariate)
    assert np.all((data.E >= 50.0) & (data.E <= 100.0))
    assert len(first.prior_observed) == len(first.prior_expected) == 3
    np.testing.assert_allclose(first.truth.fitted, data.E * np.exp(first.truth.log_risk))
    np.testing.assert_array_equal(data.Y, again.dataset.Y)
    np.testing.assert_array_equal(first.prior_observed[2], again.prior_observed[2])


def test_zero_magnitude_has_no_template_shift():
    geometry = lattice_geometry(3)
    scenario = SimScenario(M=0.0)
    replicate = generate_replicate(scenario, geometry.template, geometry.centroids, np.random.default_rng(1))
    assert replicate.truth.residual.shape == (9,)


def test_covariate_and_residual_fields_are_independent():
    geometry = lattice_geometry(3)
    scenario = SimScenario(M=0.0)
    field = MaternField(geometry.centroids, 2.5, calibrate_range(geometry.centroids, 2.5, 0.5))
    rng = np.random.default_rng(6)
    truths = [generate_replicate(scenario, geometry.template, geometry.centroids, rng, field).truth for _ in range(2000)]
    covariate = np.array([truth.covariate for truth in truths])
    residual = np.array([truth.residual for truth in truths])
    cross = np.corrcoef(covariate, residual, rowvar=False)[:9, 9:]
    assert np.abs(cross).max() < 0.1
    # each field on its own is spatially correlated
    assert np.corrcoef(covariate, rowvar=False)[0, 1] > 0.3


def test_truthful_fit_scores_zero():
    geometry = lattice_geometry(3)
    config = StudyConfig(
        scenarios=[SimScenario(M=1.0, n_replicates=2, seed=5)],
        models=("iar", "lcar"),
        n_boot=20,
    )
    seen = []
    table, estimates = run_scenarios(config, geometry, fit_fn=truthful_fit, on_replicate=lambda s, r: seen.append(r.index))
    assert sorted(seen) == [0, 1]
    assert list(table["model"]) == ["iar", "lcar"]
    np.testing.assert_allclose(table[["beta_rmse", "beta_lower", "beta_upper", "fitted_rmse"]], 0.0)
    assert len(estimates) == 4
    np.testing.assert_allclose(estimates["beta_hat"], 0.1)


def test_study_is_reproducible():
    geometry = lattice_geometry(3)
    config = StudyConfig(scenarios=[SimScenario(n_replicates=2, seed=9)], models=("bym",), n_boot=20)
    captured = [], []
    for store in captured:
        run_scenarios(config, geometry, fit_fn=truthful_fit, on_replicate=lambda s, r, store=store: store.append(r.replicate.dataset.Y))
    for a, b in zip(*captured):
        np.testing.assert_array_equal(a, b)


def test_epsilon_sensitivity_relative_change():
    geometry = lattice_geometry(3)
    config = StudyConfig(scenarios=[SimScenario(n_replicates=2, seed=2)], n_boot=10)
    table = epsilon_sensitivity(config, geometry, [0.001, 0.002], fit_fn=epsilon_biased_fit)
    assert list(table["model"]) == ["lcar", "lcar"]
    np.testing.assert_allclose(table["beta_rmse"], [0.001, 0.002])
    np.testing.assert_allclose(table["relative_change"], [0.0, 1.0])


@pytest.mark.slow
def test_lcar_beats_comparators_at_reduced_scale():
    geometry = lattice_geometry(8)
    config = StudyConfig(
        scenarios=[SimScenario(M=M, n_replicates=50, seed=100 + i) for i, M in enumerate((0.5, 1.0, 1.5))],
        workers=4,
    )
    table, _ = run_scenarios(config, geometry)
    beta = table.pivot(index="scenario", columns="model", values="beta_rmse")
    fitted = table.pivot(index="scenario", columns="model", values="fitted_rmse")
    for label in ("M=1,E=50-100", "M=1.5,E=50-100"):
        assert beta.loc[label, "lcar"] < beta.loc[label, "bym"] < beta.loc[label, "iar"]
    reduction = 1.0 - beta["lcar"] / beta["bym"]
    labels = ["M=0.5,E=50-100", "M=1,E=50-100", "M=1.5,E=50-100"]
    assert np.all(reduction[labels] > 0)
    assert np.all(np.diff(reduction[labels].to_numpy()) > 0)
    wins = ((fitted["lcar"] <= fitted["bym"]) & (fitted["lcar"] <= fitted["iar"])).sum()
    assert wins >= 2


@pytest.mark.slow
def test_epsilon_robustness_at_reduced_scale():
    geometry = lattice_geometry(8)
    config = StudyConfig(scenarios=[SimScenario(M=1.0, n_replicates=10, seed=7)], workers=4)
    table = epsilon_sensitivity(config, geometry, [0.001, 0.0001, 0.01])
    assert np.all(np.abs(table["relative_change"]) < 0.10)
