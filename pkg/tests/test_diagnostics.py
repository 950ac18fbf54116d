import numpy as np
import pandas as pd
import pytest
from scipy import stats

from nlmesaem.dataset import Schema, from_frame
from nlmesaem.diagnostics import SimulationTable, compute_vpc, coverage, simulate_from_fit, vpc_frame
from nlmesaem.model import builtin_model
from nlmesaem.saem import SaemOptions, fit_from_estimates

COUNT_SCHEMA = Schema.make("id", ["time", "y"], "y")


def _count_ds(n=400, times=(0.0, 1.0, 2.0)):
    df = pd.DataFrame({"id": np.repeat(np.arange(n), len(times)), "time": np.tile(times, n), "y": 0})
    return from_frame(df, COUNT_SCHEMA, "count")


def test_identical_replicates_give_zero_width(binary_ds):
    sims = SimulationTable(binary_ds, np.tile(binary_ds.y, (100, 1)))
    bands = compute_vpc(sims, stratify_by="trt")
    assert len(bands) == 2 * 7 * 2
    for b in bands:
        assert b.lo == b.med == b.hi == b.obs
    assert coverage(bands) == 1.0


def test_median_statistic(binary_ds):
    sims = SimulationTable(binary_ds, np.tile(binary_ds.y, (100, 1)))
    df = vpc_frame(compute_vpc(sims, statistic="median"))
    assert set(df.category) == {"median"}
    assert len(df) == 7
    with pytest.raises(ValueError):
        compute_vpc(sims, statistic="mode")


def test_few_replicates_warn(binary_ds):
    sims = SimulationTable(binary_ds, np.tile(binary_ds.y, (10, 1)))
    with pytest.warns(RuntimeWarning, match="100"):
        compute_vpc(sims)


def test_simulated_binary_bands(binary_fit):
    sims = simulate_from_fit(binary_fit, nsim=200, seed=1)
    assert sims.y.shape == (200, binary_fit.data.n_rows)
    assert set(np.unique(sims.y)) <= {0.0, 1.0}
    bands = compute_vpc(sims, stratify_by="trt")
    assert coverage(bands) >= 0.8
    wide = compute_vpc(simulate_from_fit(binary_fit, nsim=200, seed=1, omega_scale=4.0), stratify_by="trt")
    w1 = np.mean([b.hi - b.lo for b in bands])
    w4 = np.mean([b.hi - b.lo for b in wide])
    assert w4 > w1


def test_simulation_is_reproducible(binary_fit):
    a = simulate_from_fit(binary_fit, nsim=3, seed=7)
    b = simulate_from_fit(binary_fit, nsim=3, seed=7)
    c = simulate_from_fit(binary_fit, nsim=3, seed=8)
    np.testing.assert_array_equal(a.y, b.y)
    assert not np.array_equal(a.y, c.y)


def test_replicate_and_frame(binary_fit):
    sims = simulate_from_fit(binary_fit, nsim=2, seed=1)
    rep = sims.replicate(1)
    np.testing.assert_array_equal(rep.y, sims.y[1])
    np.testing.assert_array_equal(rep.predictor("y"), sims.y[1])
    df = sims.to_frame()
    assert list(df.columns) == ["replicate", "id", "time", "y"]
    assert len(df) == 2 * binary_fit.data.n_rows


def test_zip_zero_proportion():
    ds = _count_ds()
    model = builtin_model("zip-lin")
    p0, a0 = 0.3, np.log(2.0)
    fit = fit_from_estimates(model, ds, SaemOptions(), [a0, 0.0, np.log(p0 / (1 - p0))], np.zeros((3, 3)), [])
    sims = simulate_from_fit(fit, nsim=50, seed=3)
    expected = p0 + (1 - p0) * np.exp(-2.0)
    n = sims.y.size
    assert abs((sims.y == 0).mean() - expected) < 4 * np.sqrt(expected * (1 - expected) / n)


def test_count_breaks_sum_to_one():
    ds = _count_ds(n=60)
    model = builtin_model("poisson-lin")
    fit = fit_from_estimates(model, ds, SaemOptions(), [1.5, 0.2], np.diag([0.5, 0.0]), [])
    sims = simulate_from_fit(fit, nsim=100, seed=1)
    df = vpc_frame(compute_vpc(sims, breaks=[0, 1, 3, 6, 10]))
    assert set(df.category) == {"0", "1-2", "3-5", "6-9", "10+"}
    np.testing.assert_allclose(df.groupby("bin").med.sum().to_numpy(), 1.0, atol=0.1)
    np.testing.assert_allclose(df.groupby("bin").obs.sum().to_numpy(), 1.0)


def test_weibull_event_times_follow_distribution():
    n = 20000
    df = pd.DataFrame({"id": np.repeat(np.arange(n), 2), "time": np.tile([0.0, 1e9], n),
                       "status": np.tile([0, 1], n), "cens": 0})
    ds = from_frame(df, Schema.make("id", ["time", "status", "cens"], "status", censoring="cens"), "tte")
    model = builtin_model("tte-weibull")
    Te, g = 300.0, 1.4
    fit = fit_from_estimates(model, ds, SaemOptions(), np.log([Te, g]), np.zeros((2, 2)), [])
    sims = simulate_from_fit(fit, nsim=1, seed=2)
    last = ds.offsets[1:] - 1
    t = sims.x[0, last, 0]
    assert np.all(sims.y[0, last] == 1)
    assert stats.kstest(t, stats.weibull_min(g, scale=Te).cdf).pvalue > 0.001


def test_km_vpc_starts_at_one(weibull_fit):
    sims = simulate_from_fit(weibull_fit, nsim=100, seed=4)
    bands = compute_vpc(sims, stratify_by="sex")
    first = [b for b in bands if b.bin == "0"]
    assert len(first) == 2
    for b in first:
        assert b.obs == b.lo == b.med == b.hi == 1.0
    for s in ("sex=0", "sex=1"):
        med = [b.med for b in bands if b.stratum == s]
        assert np.all(np.diff(med) <= 1e-12)


def test_tte_simulation_censoring(weibull_fit):
    sims = simulate_from_fit(weibull_fit, nsim=20, seed=5)
    ds = weibull_fit.data
    last = ds.offsets[1:] - 1
    t = sims.x[:, last, 0]
    assert np.all(t <= ds.time.max() + 1e-9)
    censored = ds.censor[last] == 1
    assert np.all(t[:, censored] <= ds.time[last][censored] + 1e-9)


def test_mismatched_design(binary_ds, lmm_ds):
    sims = SimulationTable(binary_ds, np.tile(binary_ds.y, (100, 1)))
    with pytest.raises(ValueError, match="design"):
        compute_vpc(sims, ds=lmm_ds)
