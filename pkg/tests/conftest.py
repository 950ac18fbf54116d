import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402
from nlmesaem.dataset import Schema, from_frame, load_lung  # noqa: E402
from nlmesaem.model import builtin_model  # noqa: E402
from nlmesaem.saem import SaemOptions, run_saem  # noqa: E402

BINARY_SCHEMA = Schema.make("id", ["time", "y"], "y", ["trt"])
LMM_SCHEMA = Schema.make("id", ["time"], "y")


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


@pytest.fixture(scope="session")
def lung():
    return load_lung()


@pytest.fixture(scope="session")
def binary_df():
    return oracles.binary_frame(seed=1)


@pytest.fixture(scope="session")
def binary_ds(binary_df):
    return from_frame(binary_df, BINARY_SCHEMA, "binary")


@pytest.fixture(scope="session")
def binary_model():
    return builtin_model("binary-logistic", covariates=("trt",), covariate_model=[[0, 1]])


@pytest.fixture(scope="session")
def binary_fit(binary_model, binary_ds):
    return run_saem(binary_model, binary_ds, SaemOptions(k1=150, k2=60, n_chains=3, seed=11))


@pytest.fixture(scope="session")
def lmm_df():
    return oracles.lmm_frame(seed=2)


@pytest.fixture(scope="session")
def lmm_ds(lmm_df):
    return from_frame(lmm_df, LMM_SCHEMA, "gaussian")


@pytest.fixture(scope="session")
def lmm_fit(lmm_ds):
    return run_saem(builtin_model("gaussian-linear"), lmm_ds, SaemOptions(k1=200, k2=200, n_chains=5, seed=5))


@pytest.fixture(scope="session")
def weibull_fit(lung):
    return run_saem(builtin_model("tte-weibull"), lung, SaemOptions(k1=150, k2=50, seed=3))


def lmm_true_posterior(df, fit):
    return oracles.lmm_posterior(df, fit.fixed, np.diag(fit.omega), fit.sigma[0] ** 2)
