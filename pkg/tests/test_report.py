import json

import numpy as np
import pytest

from nlmesaem.report import (ReportError, dumps, fit_from_dict, fit_to_dict, model_from_dict, model_to_dict,
                             read_report, write_report)
from nlmesaem.model import builtin_model


def test_model_round_trip(binary_model):
    back = model_from_dict(model_to_dict(binary_model))
    assert back.name == binary_model.name
    assert back.covariates == ("trt",)
    np.testing.assert_array_equal(back.covariate_model, binary_model.covariate_model)
    np.testing.assert_array_equal(back.omega_pattern, binary_model.omega_pattern)


def test_model_without_covariates_round_trip():
    m = builtin_model("tte-gompertz")
    back = model_from_dict(model_to_dict(m))
    assert back.covariate_model.shape == (0, 2)
    np.testing.assert_array_equal(back.psi0, m.psi0)


def test_report_round_trip_is_byte_identical(tmp_path, binary_fit):
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    write_report(p1, binary_fit, likelihood={"ll": -570.5, "method": "is"})
    fit, rep = read_report(p1)
    write_report(p2, fit, likelihood=rep["likelihood"])
    a = p1.read_bytes()
    assert a == p2.read_bytes()
    np.testing.assert_array_equal(fit.fixed, binary_fit.fixed)
    np.testing.assert_array_equal(fit.data.y, binary_fit.data.y)
    assert fit.data.ids == binary_fit.data.ids
    assert fit.options == binary_fit.options


def test_report_contents(binary_fit):
    rep = fit_to_dict(binary_fit)
    assert rep["seed"] == binary_fit.options.seed
    assert rep["estimates"]["theta1"] == pytest.approx(binary_fit.estimates()["theta1"])
    assert rep["format_version"] == 1
    text = dumps(rep)
    assert json.loads(text) == rep


def test_lung_report_round_trip(tmp_path, weibull_fit):
    p = tmp_path / "w.json"
    write_report(p, weibull_fit)
    fit, _ = read_report(p)
    np.testing.assert_array_equal(fit.data.censor, weibull_fit.data.censor)
    assert fit.data.outcome == "tte"
    np.testing.assert_array_equal(fit.data.covariate("pat.karno"), weibull_fit.data.covariate("pat.karno"))


def test_bad_reports(tmp_path, binary_fit):
    rep = fit_to_dict(binary_fit)
    rep["format_version"] = 99
    with pytest.raises(ReportError, match="version"):
        fit_from_dict(rep)
    p = tmp_path / "junk.json"
    p.write_text("{not json")
    with pytest.raises(ReportError):
        read_report(p)
