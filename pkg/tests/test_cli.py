import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from lcar.cli import run
from lcar.cli.manifest import RunManifest
from lcar.cli.run import FIT_OPTIONS, build_parser, main, resolve_options
from lcar.cli.storage import (
    ingest_adjacency,
    ingest_dataset,
    ingest_prior,
    read_samples,
    read_sequence,
    write_samples,
    write_sequence,
)
from lcar.elicitation import PriorData, elicit_sequence
from lcar.errors import InconsistentUnits, NonPositiveExpected, NotPositiveDefinite, ParseError
from lcar.sampler import SamplerConfig, run_chains


def write_csv(path, text):
    path.write_text(text)
    return path


@pytest.fixture
def path_files(tmp_path):
    data = write_csv(tmp_path / "data.csv", "unit,observed,expected,smoke\n1,4,3.5,0.2\n2,7,5.0,1.3\n3,2,2.5,-0.4\n4,9,6.1,0.9\n")
    adjacency = write_csv(tmp_path / "adjacency.csv", "from,to\n1,2\n3,2\n3,4\n")
    priors = [
        write_csv(tmp_path / f"prior_{t}.csv", f"unit,observed,expected\n1,{3 + t},3.0\n2,{6 - t},5.5\n3,2,2.0\n4,{8 + t},6.0\n")
        for t in range(3)
    ]
    return data, adjacency, priors


def test_ingest_dataset_standardises(path_files):
    data = ingest_dataset(path_files[0])
    assert data.n == 4
    assert data.covariate_names == ("smoke",)
    assert data.X[:, 1].std(ddof=1) == pytest.approx(1.0)
    raw = ingest_dataset(path_files[0], standardise=False)
    np.testing.assert_allclose(raw.X[:, 1], [0.2, 1.3, -0.4, 0.9])


def test_ingest_rejects_zero_expected(tmp_path):
    path = write_csv(tmp_path / "bad.csv", "unit,observed,expected\n1,4,0\n2,3,1.0\n")
    with pytest.raises(NonPositiveExpected):
        ingest_dataset(path)


def test_ingest_rejects_unknown_unit(tmp_path, path_files):
    path = write_csv(tmp_path / "adj.csv", "from,to\n1,2\n4,5\n")
    with pytest.raises(InconsistentUnits):
        ingest_adjacency(path, 4)


def test_ingest_reports_line_numbers(tmp_path):
    path = write_csv(tmp_path / "bad.csv", "unit,observed,expected\n1,4,3.0\n2,x,1.0\n")
    with pytest.raises(ParseError) as info:
        ingest_dataset(path)
    assert info.value.line == 3


def test_ingest_requires_contiguous_units(tmp_path):
    path = write_csv(tmp_path / "gap.csv", "unit,observed,expected\n1,4,3.0\n3,2,1.0\n")
    with pytest.raises(InconsistentUnits):
        ingest_dataset(path)


def test_sequence_files_round_trip(tmp_path, path_files):
    data = ingest_dataset(path_files[0])
    adj = ingest_adjacency(path_files[1], data.n)
    prior = ingest_prior(path_files[2], data.X)
    seq, trace = elicit_sequence(adj, prior)
    write_sequence(tmp_path, seq, trace, prior, {"method": "fast"})
    again = read_sequence(tmp_path, adj)
    np.testing.assert_array_equal(again.removal_order, seq.removal_order)
    assert again.epsilon == seq.epsilon
    trace_frame = pd.read_csv(tmp_path / "trace.csv")
    assert list(trace_frame.columns) == ["step", "edge_from", "edge_to", "loglik", "beta_hat0", "beta_hat1", "tau2_hat"]


def test_sequence_on_other_adjacency_rejected(tmp_path, path_files):
    data = ingest_dataset(path_files[0])
    adj = ingest_adjacency(path_files[1], data.n)
    prior = PriorData.validated(np.random.default_rng(0).normal(size=(2, 4)), data.X)
    seq, trace = elicit_sequence(adj, prior)
    write_sequence(tmp_path, seq, trace, prior, {})
    other = ingest_adjacency(write_csv(tmp_path / "other.csv", "from,to\n1,2\n2,3\n1,4\n"), 4)
    with pytest.raises(InconsistentUnits):
        read_sequence(tmp_path, other)


def test_sample_files_round_trip(tmp_path, path_files):
    data = ingest_dataset(path_files[0])
    adj = ingest_adjacency(path_files[1], data.n)
    samples = run_chains(data, None, "bym", SamplerConfig(n_chains=2, burn_in=20, keep=10), adjacency=adj)
    write_samples(tmp_path, samples, burn_in=20, thin=1)
    again = read_samples(tmp_path, "bym", 2, seeds=samples.seeds)
    for name in ("beta", "tau2", "phi", "theta", "sigma2", "deviance"):
        np.testing.assert_allclose(getattr(again, name), getattr(samples, name), rtol=1e-12)
    assert pd.read_csv(tmp_path / "chain_1.csv")["iter"].tolist() == list(range(21, 31))


def test_option_precedence(tmp_path, monkeypatch):
    config = write_csv(tmp_path / "fit.env", "burn_in=9\nkeep=4\n")
    base = ["fit", "--model", "iar", "--data", "d.csv", "--adjacency", "a.csv", "--out", "o"]
    parser = build_parser()
    monkeypatch.setenv("LCAR_BURN_IN", "7")
    monkeypatch.setenv("LCAR_SEED", "3")
    assert resolve_options(parser.parse_args(base), FIT_OPTIONS) == {"burn_in": 7, "seed": 3}
    options = resolve_options(parser.parse_args(base + ["--config", str(config)]), FIT_OPTIONS)
    assert options == {"burn_in": 9, "keep": 4, "seed": 3}
    options = resolve_options(parser.parse_args(base + ["--config", str(config), "--burnin", "5"]), FIT_OPTIONS)
    assert options["burn_in"] == 5


def test_fit_lcar_without_sequence_exits_1(tmp_path, path_files):
    out = tmp_path / "run"
    code = main(["fit", "--model", "lcar", "--data", str(path_files[0]), "--adjacency", str(path_files[1]), "--out", str(out)])
    assert code == 1
    manifest = RunManifest.read(out)
    assert manifest.status == "failed"
    assert "sequence" in manifest.error


def test_invalid_option_exits_1(tmp_path, path_files):
    out = tmp_path / "run"
    argv = ["fit", "--model", "iar", "--data", str(path_files[0]), "--adjacency", str(path_files[1])]
    assert main(argv + ["--thin", "0", "--out", str(out)]) == 1


def test_numerical_failure_exits_2(tmp_path, path_files, monkeypatch):
    def broken(*args, **kwargs):
        raise NotPositiveDefinite("forced failure")

    monkeypatch.setattr(run, "elicit_sequence", broken)
    out = tmp_path / "seq"
    argv = ["elicit", "--adjacency", str(path_files[1]), "--prior", *map(str, path_files[2]), "--out", str(out)]
    assert main(argv) == 2
    assert RunManifest.read(out).error.startswith("NotPositiveDefinite")


def test_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert "lcar" in capsys.readouterr().out


def test_end_to_end_on_small_lattice(tmp_path):
    sim = tmp_path / "sim"
    assert main([
        "simulate", "--lattice", "4", "--replicates", "1", "--models", "lcar", "--burnin", "30", "--keep", "30",
        "--boot", "10", "--seed", "5", "--out", str(sim),
    ]) == 0
    for name in ("rmse.csv", "estimates.csv", "adjacency.csv", "centroids.csv", "template.csv", "manifest.json"):
        assert (sim / name).exists()
    rep = sim / "replicates" / "M1_E50-100" / "rep_1"
    adjacency = sim / "adjacency.csv"
    priors = [str(rep / f"prior_{t}.csv") for t in (1, 2, 3)]

    seq = tmp_path / "seq"
    assert main([
        "elicit", "--adjacency", str(adjacency), "--prior", *priors, "--covariates", str(rep / "data.csv"),
        "--out", str(seq),
    ]) == 0
    for name in ("sequence.csv", "trace.csv", "sequence.json"):
        assert (seq / name).exists()

    fit = tmp_path / "fit"
    fit_argv = [
        "fit", "--model", "lcar", "--data", str(rep / "data.csv"), "--adjacency", str(adjacency),
        "--sequence", str(seq), "--chains", "2", "--burnin", "40", "--keep", "40", "--seed", "3", "--out", str(fit),
    ]
    assert main(fit_argv) == 0
    manifest = RunManifest.read(fit)
    assert manifest.status == "ok"
    assert manifest.standardisation["covariates"] == ["x"]
    assert len(manifest.seeds["chains"]) == 2
    for name in ("chain_1.csv", "chain_2.csv", "phi_chain_1.npz", "acceptance.json"):
        assert (fit / name).exists()

    diag = tmp_path / "diag"
    assert main([
        "diagnose", "--run", str(fit), "--data", str(rep / "data.csv"), "--adjacency", str(adjacency),
        "--sequence", str(seq), "--permutations", "99", "--kde", "--screen", "--out", str(diag),
    ]) == 0
    summary = json.loads((diag / "summary.json").read_text())
    assert summary["model"] == "lcar"
    assert 0.0 < summary["morans_p"] <= 1.0
    assert [rr["covariate"] for rr in summary["relative_risks"]] == ["x"]
    for name in ("fitted.csv", "traces.csv", "edges_removed_density.csv", "edge_removal.csv", "screening.csv"):
        assert (diag / name).exists()

    again = tmp_path / "again"
    assert main(["rerun", str(fit), "--out", str(again)]) == 0
    for name in ("chain_1.csv", "chain_2.csv"):
        assert (again / name).read_bytes() == (fit / name).read_bytes()


def test_rerun_refuses_changed_inputs(tmp_path, path_files):
    out = tmp_path / "run"
    argv = ["fit", "--model", "iar", "--data", str(path_files[0]), "--adjacency", str(path_files[1])]
    assert main(argv + ["--chains", "1", "--burnin", "10", "--keep", "10", "--out", str(out)]) == 0
    path_files[0].write_text(path_files[0].read_text().replace("4,9,6.1", "4,10,6.1"))
    assert main(["rerun", str(out), "--out", str(tmp_path / "again")]) == 1


def test_rerun_replays_recorded_options(tmp_path, path_files, monkeypatch):
    out = tmp_path / "run"
    argv = ["fit", "--model", "iar", "--data", str(path_files[0]), "--adjacency", str(path_files[1])]
    monkeypatch.setenv("LCAR_SEED", "1")
    assert main(argv + ["--chains", "1", "--burnin", "10", "--keep", "10", "--out", str(out)]) == 0
    assert RunManifest.read(out).options["seed"] == 1

    monkeypatch.setenv("LCAR_SEED", "2")
    monkeypatch.setenv("LCAR_KEEP", "20")
    again = tmp_path / "again"
    assert main(["rerun", str(out), "--out", str(again)]) == 0
    assert (again / "chain_1.csv").read_bytes() == (out / "chain_1.csv").read_bytes()
    assert RunManifest.read(again).options == RunManifest.read(out).options


def test_rerun_refuses_changed_config_file(tmp_path, path_files):
    config = write_csv(tmp_path / "fit.env", "burn_in=10\nkeep=10\nn_chains=1\n")
    out = tmp_path / "run"
    argv = ["fit", "--model", "iar", "--data", str(path_files[0]), "--adjacency", str(path_files[1])]
    assert main(argv + ["--config", str(config), "--out", str(out)]) == 0
    assert str(config) in RunManifest.read(out).inputs
    config.write_text("burn_in=10\nkeep=12\nn_chains=1\n")
    assert main(["rerun", str(out), "--out", str(tmp_path / "again")]) == 1


def test_diagnose_without_manifest_exits_1(tmp_path, path_files):
    empty = tmp_path / "empty"
    empty.mkdir()
    out = tmp_path / "diag"
    argv = ["diagnose", "--run", str(empty), "--data", str(path_files[0]), "--adjacency", str(path_files[1])]
    assert main(argv + ["--out", str(out)]) == 1
    assert RunManifest.read(out).error.startswith("ValidationError")


def test_setuptools_is_build_only():
    tomllib = pytest.importorskip("tomllib")
    with open(Path(__file__).parents[1] / "pyproject.toml", "rb") as f:
        project = tomllib.load(f)
    assert "setuptools" in project["build-system"]["requires"]
    runtime = {dep.split(">")[0].split("=")[0].strip() for dep in project["project"]["dependencies"]}
    assert "setuptools" not in runtime
    assert {"esda", "libpysal", "arviz"} <= runtime


def test_manifest_records_factorisation_backend(tmp_path, path_files):
    out = tmp_path / "run"
    argv = ["fit", "--model", "iar", "--data", str(path_files[0]), "--adjacency", str(path_files[1])]
    assert main(argv + ["--chains", "1", "--burnin", "10", "--keep", "10", "--out", str(out)]) == 0
    assert RunManifest.read(out).flags["factorisation"] in ("cholmod", "superlu")
