import json
import shutil
import subprocess

import pandas as pd
import pytest

from nlmesaem.cli import main
from nlmesaem.report import read_report

import oracles

QUICK = ["--k1", "20", "--k2", "10", "--chains", "2", "--seed", "3"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    oracles.binary_frame(seed=1, n_per_arm=40).to_csv(d / "bin.csv", index=False)
    return d


@pytest.fixture(scope="module")
def binary_report(workdir):
    rc = main(["fit", "--data", str(workdir / "bin.csv"), "--model", "binary-logistic", "--outcome", "binary",
               "--covariates", "trt", "--out", str(workdir), "--prefix", "bin", "--M", "200", *QUICK])
    assert rc == 0
    return workdir / "bin.json"


def test_fit_outputs(binary_report, capsys):
    d = binary_report.parent
    rep = json.loads(binary_report.read_text())
    assert rep["seed"] == 3
    assert rep["likelihood"]["method"] == "is"
    assert {"aic", "bic", "bicc"} <= set(rep["criteria"])
    trace = pd.read_csv(d / "bin_trace.csv")
    assert len(trace) == 31
    ind = pd.read_csv(d / "bin_individual.csv")
    assert len(ind) == 80 * 2


def test_fit_is_reproducible(workdir, binary_report):
    rc = main(["fit", "--data", str(workdir / "bin.csv"), "--model", "binary-logistic", "--outcome", "binary",
               "--covariates", "trt", "--out", str(workdir), "--prefix", "again", "--M", "200", *QUICK])
    assert rc == 0
    assert (workdir / "again.json").read_bytes() == binary_report.read_bytes()


def test_fit_with_config(workdir):
    cfg = workdir / "m.ini"
    cfg.write_text("""[data]
group = id
predictors = time, y
response = y
covariates = trt
outcome = binary

[model]
name = binary-logistic
covariates = trt
covariate_model = 0 1

[options]
k1 = 10
k2 = 5
n_chains = 1
""")
    rc = main(["fit", "--data", str(workdir / "bin.csv"), "--config", str(cfg), "--out", str(workdir),
               "--prefix", "cfg", "--ll", "none", "--no-individual"])
    assert rc == 0
    fit, rep = read_report(workdir / "cfg.json")
    assert fit.model.fixed_names() == ["theta1", "theta2", "beta_trt(theta2)"]
    assert fit.options.k1 == 10
    assert "likelihood" not in rep
    assert not (workdir / "cfg_individual.csv").exists()


def test_zero_iterations_echo_start(workdir):
    rc = main(["fit", "--data", str(workdir / "bin.csv"), "--model", "binary-logistic", "--outcome", "binary",
               "--out", str(workdir), "--prefix", "zero", "--k1", "0", "--k2", "0", "--ll", "none",
               "--no-individual"])
    assert rc == 0
    fit, _ = read_report(workdir / "zero.json")
    assert fit.estimates()["theta1"] == -0.5


def test_simulate_and_vpc(binary_report, workdir):
    out = workdir / "sims.csv"
    assert main(["simulate", "--fit", str(binary_report), "--nsim", "3", "--seed", "1", "--out", str(out)]) == 0
    sims = pd.read_csv(out)
    assert sims.replicate.nunique() == 3 and len(sims) == 3 * 80 * 7
    vpc = workdir / "vpc.csv"
    assert main(["vpc", "--fit", str(binary_report), "--nsim", "100", "--stratify-by", "trt",
                 "--out", str(vpc)]) == 0
    df = pd.read_csv(vpc)
    assert set(df.columns) == {"stratum", "bin", "category", "obs", "lo", "med", "hi"}


def test_compare(binary_report, capsys):
    assert main(["compare", "--fit", str(binary_report), str(binary_report), "--ll", "gq", "--nodes", "5"]) == 0
    df = pd.read_csv(pd.io.common.StringIO(capsys.readouterr().out))
    assert len(df) == 2
    assert df.bicc.iloc[0] == df.bicc.iloc[1]


def test_bootstrap(binary_report, workdir):
    stem = workdir / "boot"
    assert main(["bootstrap", "--fit", str(binary_report), "--B", "2", "--seed", "4", "--out", str(stem),
                 "--threads", "2"]) == 0
    assert len(pd.read_csv(f"{stem}_replicates.csv")) == 2
    assert "se" in pd.read_csv(f"{stem}_summary.csv").columns


def test_explore(workdir):
    out = workdir / "explore.csv"
    assert main(["explore", "--data", str(workdir / "bin.csv"), "--outcome", "binary", "--stratify-by", "trt",
                 "--out", str(out)]) == 0
    df = pd.read_csv(out)
    assert set(df.stratum) == {"trt=0", "trt=1"}


def test_explore_lung_km(tmp_path):
    out = tmp_path / "km.csv"
    assert main(["explore", "--data", "lung", "--stratify-by", "sex", "--out", str(out)]) == 0
    assert len(pd.read_csv(out)) > 100


def test_errors_are_reported(tmp_path, capsys):
    rc = main(["fit", "--data", str(tmp_path / "missing.csv"), "--model", "binary-logistic"])
    assert rc == 1
    assert "error: FileNotFoundError" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["fit"])
    assert exc.value.code == 2


def test_conditional_bootstrap_refused_for_lung(tmp_path, capsys):
    assert main(["fit", "--data", "lung", "--model", "tte-weibull", "--k1", "5", "--k2", "0", "--ll", "none",
                 "--no-individual", "--out", str(tmp_path), "--prefix", "w"]) == 0
    rc = main(["bootstrap", "--fit", str(tmp_path / "w.json"), "--method", "conditional", "--B", "2",
               "--out", str(tmp_path / "b")])
    assert rc == 1
    assert "UnsupportedOperation" in capsys.readouterr().err
    assert not (tmp_path / "b_summary.csv").exists()


def test_simstudy_command(tmp_path):
    stem = tmp_path / "ss"
    assert main(["simstudy", "--S", "1", "--k1", "10", "--k2", "5", "--chains", "1", "--start", "all",
                 "--out", str(stem)]) == 0
    m = pd.read_csv(f"{stem}_metrics.csv")
    assert set(m.start) == {"true", "pop", "far"}


def test_stepwise_command(binary_report, workdir):
    stem = workdir / "step"
    assert main(["stepwise", "--fit", str(binary_report), "--covariates", "trt", "--no-iiv",
                 "--direction", "forward", "--M", "100", "--out", str(stem)]) == 0
    assert (workdir / "step_final.json").exists()
    assert len(pd.read_csv(f"{stem}_steps.csv")) >= 1


@pytest.mark.skipif(shutil.which("nlmesaem") is None, reason="console script not installed")
def test_console_script_help():
    r = subprocess.run(["nlmesaem", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("fit", "simulate", "vpc", "bootstrap", "stepwise", "compare", "simstudy", "explore"):
        assert cmd in r.stdout
