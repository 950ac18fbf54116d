import warnings

import numpy as np
import pytest

from nlmesaem.dataset import from_frame
from nlmesaem.model import ModelError, builtin_model
from nlmesaem.saem import InitializationError, SaemOptions, initial_fit, repair_psd, run_saem

import oracles
from conftest import BINARY_SCHEMA

# maximum-likelihood estimates of the random-intercept logistic model on
# binary_frame(seed=1), from the dense-grid marginal likelihood in oracles.py
BINARY_MLE = dict(theta1=-2.4777097, theta2=-0.36465058, beta=-0.16201769, omega=4.6403198)
# and of the linear mixed model on lmm_frame(seed=2)
LMM_MLE = dict(mu=(9.94282218, 2.00349477), sd=(1.64989476, 0.44943804), sigma=0.8141132480380608)


def test_options_validation():
    for bad in (dict(k1=-1), dict(n_chains=0), dict(tau=0.0), dict(tau=1.5), dict(kernel_iters=(1, 2))):
        with pytest.raises(ValueError):
            SaemOptions(**bad)


def test_step_size_schedule():
    o = SaemOptions(k1=10, k2=5)
    assert [o.step_size(k) for k in (1, 10, 11, 12, 15)] == [1.0, 1.0, 0.5, 1 / 3, 1 / 6]
    assert o.anneal_length == 5
    assert SaemOptions(k1=10, anneal_iters=0).anneal_length == 0


def test_options_dict_round_trip():
    o = SaemOptions(k1=12, kernel_iters=(1, 0, 3), tau=0.9, anneal_iters=4)
    assert SaemOptions.from_dict(o.to_dict()) == o
    assert SaemOptions.from_dict({"kernel_iters": "2, 1, 0", "k1": "5"}).kernel_iters == (2, 1, 0)
    with pytest.raises(ValueError):
        SaemOptions.from_dict({"nope": 1})


def test_repair_psd():
    m, changed = repair_psd(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert changed
    assert np.linalg.eigvalsh(m).min() > 0
    m2, changed = repair_psd(np.eye(2))
    assert not changed and np.array_equal(m2, np.eye(2))


def test_binary_fit_near_mle(binary_model, binary_ds):
    fit = run_saem(binary_model, binary_ds, SaemOptions(k1=300, k2=200, n_chains=10, seed=1))
    est = fit.estimates()
    assert est["theta1"] == pytest.approx(BINARY_MLE["theta1"], abs=0.1)
    assert est["theta2"] == pytest.approx(BINARY_MLE["theta2"], abs=0.01)
    assert est["beta_trt(theta2)"] == pytest.approx(BINARY_MLE["beta"], abs=0.01)
    assert est["omega_theta1"] == pytest.approx(BINARY_MLE["omega"], abs=0.1)
    assert fit.omega[1, 1] == 0.0


def test_lmm_fit_near_mle(lmm_fit):
    est = lmm_fit.estimates()
    np.testing.assert_allclose([est["intercept"], est["slope"]], LMM_MLE["mu"], rtol=2.5e-3)
    np.testing.assert_allclose([est["omega_intercept"], est["omega_slope"]], LMM_MLE["sd"], rtol=2.5e-3)
    assert est["sigma_a"] == pytest.approx(LMM_MLE["sigma"], rel=2.5e-3)


def test_acceptance_rates_near_target(binary_fit):
    assert np.all((binary_fit.acceptance > 0.2) & (binary_fit.acceptance < 0.7))


def test_same_seed_same_fit(binary_model, binary_ds, binary_fit):
    again = run_saem(binary_model, binary_ds, binary_fit.options)
    np.testing.assert_array_equal(again.trace, binary_fit.trace)


def test_threads_do_not_change_results(binary_model, binary_ds, binary_fit):
    from dataclasses import replace
    threaded = run_saem(binary_model, binary_ds, replace(binary_fit.options, threads=3))
    np.testing.assert_array_equal(threaded.trace, binary_fit.trace)


def test_seed_changes_results(binary_model, binary_ds):
    a = run_saem(binary_model, binary_ds, SaemOptions(k1=5, k2=0, seed=1))
    b = run_saem(binary_model, binary_ds, SaemOptions(k1=5, k2=0, seed=2))
    assert not np.array_equal(a.trace, b.trace)


def test_zero_iterations_return_initial_values(binary_model, binary_ds):
    fit = run_saem(binary_model, binary_ds, SaemOptions(k1=0, k2=0))
    init = initial_fit(binary_model, binary_ds)
    np.testing.assert_array_equal(fit.fixed, init.fixed)
    np.testing.assert_array_equal(fit.omega, init.omega)
    assert fit.trace.shape[0] == 1


def test_trace_frame(binary_fit):
    df = binary_fit.trace_frame()
    assert len(df) == 1 + 150 + 60
    assert list(df.columns[:2]) == ["iteration", "step_size"]
    assert df.step_size.iloc[150] == 1.0 and df.step_size.iloc[151] == 0.5
    assert df.theta1.iloc[-1] == pytest.approx(binary_fit.estimates()["theta1"])


def test_start_values_used(binary_model, binary_ds, binary_fit):
    fit = run_saem(binary_model, binary_ds, SaemOptions(k1=0, k2=0), start=binary_fit)
    np.testing.assert_array_equal(fit.fixed, binary_fit.fixed)


def test_constant_covariate_is_singular(binary_model, binary_df):
    df = binary_df.assign(trt=1)
    ds = from_frame(df, BINARY_SCHEMA, "binary")
    with pytest.raises(ModelError, match="trt"):
        run_saem(binary_model, ds, SaemOptions(k1=2, k2=0))


def test_non_finite_start_is_reported(lung):
    with pytest.raises(InitializationError):
        run_saem(builtin_model("tte-weibull", psi0=np.array([1e-300, 300.0])), lung, SaemOptions(k1=1, k2=0))


def test_parameter_without_variability(lung):
    model = builtin_model("tte-weibull", omega_pattern=np.array([[1, 0], [0, 0]]))
    fit = run_saem(model, lung, SaemOptions(k1=100, k2=50, seed=2))
    est = fit.estimates()
    assert 0.8 < est["gamma"] < 2.5
    assert fit.omega[1, 1] == 0.0


def test_missing_covariate_subjects_dropped(lung):
    model = builtin_model("tte-weibull", covariates=("pat.karno",), covariate_model=[[1, 0]])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = run_saem(model, lung, SaemOptions(k1=3, k2=0))
    assert fit.data.n_subjects == lung.n_subjects - np.isnan(lung.covariate("pat.karno")).sum()
