"""End-to-end acceptance criteria 1-9.

Each test prints one ``criterion k: PASS|FAIL ...`` line with the measured
values, then asserts. Reference values taken from the published analysis
are marked as such; everything else comes from oracles.py.
"""

import os
import warnings
from dataclasses import replace

import numpy as np
import pytest

from nlmesaem.conditional import estimate_conditional
from nlmesaem.dataset import load_lung, load_named
from nlmesaem.diagnostics import simulate_from_fit
from nlmesaem.likelihood import ll_gauss_hermite, ll_importance_sampling
from nlmesaem.model import HAZARD_FAMILIES, HazardFamily, builtin_model, subject_rows
from nlmesaem.report import dumps, fit_to_dict
from nlmesaem.saem import SaemOptions, run_saem
from nlmesaem.selection import compute_criteria, stepwise_select
from nlmesaem.simstudy import run_simstudy, scenario, simulate_replicate
from nlmesaem.uncertainty import conditional_bootstrap

import oracles
from conftest import lmm_true_posterior

pytestmark = pytest.mark.acceptance

LINES = {}


def verdict(k, ok, detail, capsys=None):
    line = f"criterion {k}: {'PASS' if ok else 'FAIL'} | {detail}"
    LINES[k] = line
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    assert ok, line


def rel(a, b):
    return abs(a - b) / abs(b)


# ---------------------------------------------------------------- 1 toenail

# published estimates of the logistic random-intercept model
TOENAIL_REF = {"theta1": -1.71, "theta2": -0.39, "omega_theta1": 4.02, "beta_trt": -0.15}


def test_criterion1_toenail(capsys):
    if not os.environ.get("NLMESAEM_TOENAIL_CSV"):
        verdict(1, False, "toenail data not bundled; set NLMESAEM_TOENAIL_CSV to a CSV with id,time,y,treatment",
                capsys)
    ds = load_named("toenail")
    model = builtin_model("binary-logistic", covariates=("treatment",), covariate_model=[[0, 1]])
    rows, ok = [], True
    for seed in (1234567, 1, 2, 3, 4):
        est = run_saem(model, ds, SaemOptions(k1=600, k2=100, n_chains=10, seed=seed)).estimates()
        b = est["beta_treatment(theta2)"]
        good = (rel(est["theta1"], -1.71) <= 0.10 and rel(est["theta2"], -0.39) <= 0.10
                and rel(est["omega_theta1"], 4.02) <= 0.10 and abs(b + 0.15) <= 0.08)
        ok &= good
        rows.append(f"seed {seed}: th1 {est['theta1']:.3f} th2 {est['theta2']:.3f} "
                    f"om1 {est['omega_theta1']:.3f} beta {b:.3f}")
    verdict(1, ok, "; ".join(rows), capsys)


# ---------------------------------------------------------------- 2 rapi

def test_criterion2_rapi(capsys):
    if not os.environ.get("NLMESAEM_RAPI_CSV"):
        verdict(2, False, "rapi data not bundled; set NLMESAEM_RAPI_CSV to a CSV with id,time,rapi,gender "
                          "(gender 1 = men)", capsys)
    ds = load_named("rapi")
    opts = SaemOptions(k1=600, k2=100, n_chains=10, seed=632545)
    cm = dict(covariates=("gender",))
    pois = run_saem(builtin_model("poisson-lin", covariate_model=[[1, 1]], **cm), ds, opts)
    zip_ = run_saem(builtin_model("zip-lin", covariate_model=[[1, 1, 0]], **cm), ds, opts)
    bic_p = compute_criteria(pois, ll_importance_sampling(pois, M=5000)).bic
    bic_z = compute_criteria(zip_, ll_importance_sampling(zip_, M=5000)).bic
    p0 = zip_.estimates()["p0"]
    sims = simulate_from_fit(zip_, nsim=200, seed=1)
    obs0, sim0 = float(np.mean(ds.y == 0)), float(np.mean(sims.y == 0))
    diff = bic_p - bic_z
    ok = abs(diff - 995.7) <= 10 and abs(p0 - 0.08) <= 0.02 and abs(sim0 - obs0) <= 0.02
    verdict(2, ok, f"BIC Poisson {bic_p:.1f} ZIP {bic_z:.1f} diff {diff:.1f} (ref 995.7 +/-10); p0 {p0:.3f} "
                   f"(ref 0.08 +/-0.02); zeros observed {obs0:.3f} simulated {sim0:.3f}", capsys)


# ---------------------------------------------------------------- 3 lung ranking

TABLE6 = {"exponential": 2303.05, "weibull": 2291.02, "gompertz": 2291.78, "gamma": 2378.34,
          "loglogistic": 2306.24}
ORDER = ["weibull", "gompertz", "exponential", "loglogistic", "gamma"]


def test_criterion3_lung_ranking(capsys):
    lung = load_lung()
    bic = {}
    for fam in HAZARD_FAMILIES:
        m = builtin_model(f"tte-{fam}")
        # data-scale start used for the published lung fits, published seed
        m = m.with_changes(psi0=np.array([300.0, 2.0][: m.n_params]))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = run_saem(m, lung, SaemOptions(seed=632545))
            bic[fam] = compute_criteria(fit, ll_importance_sampling(fit, M=10000, seed=1)).bic
    within = {f: abs(bic[f] - TABLE6[f]) <= 4 for f in bic}
    ranked = sorted(bic, key=bic.get)
    ok = all(within.values()) and ranked == ORDER
    detail = ", ".join(f"{f} {bic[f]:.2f} (ref {TABLE6[f]})" for f in ORDER) + f"; order {' < '.join(ranked)}"
    verdict(3, ok, detail, capsys)


# ---------------------------------------------------------------- 4 lung covariates

TABLE7 = {"Te": 405.4, "beta_sex(Te)": 0.36, "beta_ecog23(Te)": -0.49, "gamma": 1.47}


def test_criterion4_lung_covariates(capsys):
    lung = load_lung()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base = run_saem(builtin_model("tte-weibull", psi0=np.array([1.0, 2.0])), lung, SaemOptions(seed=632545))
        res = stepwise_select(base, ["sex", "ecog1", "ecog23"], M=10000)
    m = res.model
    on_te = {c for k, c in enumerate(m.covariates) if m.covariate_model[k, 0]}
    on_g = {c for k, c in enumerate(m.covariates) if m.covariate_model[k, 1]}
    selected = on_te == {"sex", "ecog23"} and not on_g
    # refit of the published final model: covariates on Te, variability on gamma
    final = builtin_model("tte-weibull", psi0=np.array([300.0, 2.0]), covariates=("sex", "ecog23"),
                          covariate_model=[[1, 0], [1, 0]], omega_pattern=np.array([[0, 0], [0, 1]]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        est = run_saem(final, lung, SaemOptions(seed=632545)).estimates()
    close = {k: rel(est[k], v) <= 0.10 for k, v in TABLE7.items()}
    ok = selected and all(close.values())
    detail = (f"selected on Te {sorted(on_te)} on gamma {sorted(on_g)}; refit "
              + ", ".join(f"{k} {est[k]:.3f} (ref {v}, {100 * rel(est[k], v):.1f}%)" for k, v in TABLE7.items()))
    verdict(4, ok, detail, capsys)


# ---------------------------------------------------------------- 5 and 6 simulation study

TABLE8_RRMSE = {"theta1": 19.0, "theta2": 12.0, "omega_theta1": 10.0}


@pytest.fixture(scope="module")
def simstudy():
    out = {}
    for tag in ("true", "pop", "far"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out[tag] = run_simstudy(scenario(1, S=50, start=tag))
    return out


def test_criterion5_simulation_study(simstudy, capsys):
    ok, parts = True, []
    for tag, res in simstudy.items():
        m = res.metrics.set_index("parameter")
        for p, ref in TABLE8_RRMSE.items():
            rb, rr = m.loc[p, "rb"], m.loc[p, "rrmse"]
            ok &= abs(rb) < 5 and 0.5 * ref <= rr <= 1.5 * ref
            parts.append(f"{tag} {p} RB {rb:.2f} RRMSE {rr:.1f}")
        ok &= res.failures == 0
    for p in TABLE8_RRMSE:
        lo = max(r.metrics.set_index("parameter").loc[p, "rb_ci_low"] for r in simstudy.values())
        hi = min(r.metrics.set_index("parameter").loc[p, "rb_ci_high"] for r in simstudy.values())
        ok &= lo <= hi
        parts.append(f"{p} common RB CI [{lo:.2f}, {hi:.2f}]")
    verdict(5, ok, "; ".join(parts), capsys)


def test_criterion6_bootstrap_calibration(simstudy, capsys):
    sc = scenario(1)
    data = simulate_replicate(sc, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = run_saem(sc.model(), data, replace(sc.options, seed=11))
        boot = conditional_bootstrap(fit, B=100, seed=5)
    emp = simstudy["true"].metrics.set_index("parameter")["sd"]
    ok, parts = boot.failures <= 5, []
    for p in TABLE8_RRMSE:
        se = boot.se_of(p)
        r = se / emp[p]
        ok &= abs(r - 1) <= 0.25
        parts.append(f"{p} boot SE {se:.4f} empirical SD {emp[p]:.4f} ratio {r:.2f}")
    verdict(6, ok, "; ".join(parts) + f"; failures {boot.failures}", capsys)


# ---------------------------------------------------------------- 7 oracle equivalence

def test_criterion7_gaussian_oracle(lmm_df, lmm_fit, capsys):
    mu, sd, sigma, _ = oracles.lmm_mle(lmm_df)
    est = lmm_fit.estimates()
    got = np.array([est["intercept"], est["slope"], est["omega_intercept"], est["omega_slope"], est["sigma_a"]])
    ref = np.r_[mu, sd, sigma]
    saem_err = np.max(np.abs(got - ref) / np.abs(ref))
    exact = oracles.lmm_loglik(lmm_df, lmm_fit.fixed, np.diag(lmm_fit.omega), lmm_fit.sigma[0] ** 2).sum()
    is_ = ll_importance_sampling(lmm_fit, M=5000, seed=1)
    gq = ll_gauss_hermite(lmm_fit, nodes=9)
    cond = estimate_conditional(lmm_fit, tol=0.002, n_chains=20)
    pm, psd = lmm_true_posterior(lmm_df, lmm_fit)
    m_err = np.max(np.abs(cond.mean - pm) / np.abs(pm))
    s_err = np.max(np.abs(cond.sd - psd) / psd)
    ok = (saem_err < 0.01 and abs(is_.ll - exact) < 3 * is_.mc_se and abs(gq.ll - exact) < 3 * is_.mc_se
          and m_err < 0.02 and s_err < 0.02)
    verdict(7, ok, f"SAEM max rel err {100 * saem_err:.3f}%; LL exact {exact:.4f} IS {is_.ll:.4f} "
                   f"(MC-SE {is_.mc_se:.4f}) GQ {gq.ll:.6f}; conditional mean err {100 * m_err:.2f}% "
                   f"SD err {100 * s_err:.2f}%", capsys)


# ---------------------------------------------------------------- 8 generative correctness

def _ks_distance(samples, cdf):
    """Sup distance between the empirical CDF (infinite draws count as no
    event) and ``cdf`` evaluated at the finite order statistics."""
    n = len(samples)
    x = np.sort(samples[np.isfinite(samples)])
    F = cdf(x)
    i = np.arange(1, len(x) + 1)
    return float(max(np.max(i / n - F, initial=0.0), np.max(F - (i - 1) / n, initial=0.0)))


def _normalisation_error():
    worst = 0.0
    rng = np.random.default_rng(0)
    for _ in range(30):
        t = rng.uniform(0, 12)
        a0, a1, p0 = rng.uniform(-2, 2.5), rng.uniform(-0.3, 0.3), rng.uniform(0, 0.95)
        lam = np.exp(a0 + a1 * t)
        n = np.arange(0, int(lam + 40 * np.sqrt(lam) + 60), dtype=float)
        rows = subject_rows(np.column_stack([np.full(len(n), t), n]))
        pos = subject_rows(np.column_stack([np.full(len(n) - 1, t), n[1:]]))
        sums = [np.exp(builtin_model("poisson-lin").row_loglik(np.tile([a0, a1], (len(n), 1)), rows)).sum(),
                np.exp(builtin_model("zip-lin").row_loglik(np.tile([a0, a1, p0], (len(n), 1)), rows)).sum(),
                np.exp(builtin_model("truncpoisson-lin").row_loglik(np.tile([a0, a1], (len(n) - 1, 1)), pos)).sum()]
        psi = [rng.normal(0, 3), *rng.uniform(0.05, 3, 3), rng.uniform(0.01, 1)]
        cat = subject_rows(np.column_stack([np.full(5, t), np.arange(1.0, 6.0)]))
        sums.append(np.exp(builtin_model("ordinal-po5").row_loglik(np.tile(psi, (5, 1)), cat)).sum())
        b = subject_rows(np.column_stack([[t, t], [0.0, 1.0]]))
        sums.append(np.exp(builtin_model("binary-logistic").row_loglik(np.tile(rng.normal(0, 3, 2), (2, 1)), b)).sum())
        worst = max(worst, max(abs(s - 1) for s in sums))
    return worst


def test_criterion8_generative(capsys):
    rng = np.random.default_rng(2024)
    dists = {}
    for fam in HAZARD_FAMILIES:
        d = 0.0
        for Te, g in ((300.0, 0.7), (300.0, 1.5), (100.0, 3.0)):
            hz = HazardFamily(fam, Te, g)
            u = rng.random(100_000)
            t = hz.solve_cumhaz(-np.log(u)) if fam == "gamma" else hz.inverse_survival(u)
            d = max(d, _ks_distance(t, lambda x: 1 - oracles.survival(fam, x, Te, g)))
        dists[fam] = d
    norm = _normalisation_error()
    ok = max(dists.values()) < 0.01 and norm < 1e-8
    verdict(8, ok, ", ".join(f"{f} KS {v:.4f}" for f, v in dists.items()) + f"; max |sum p - 1| {norm:.1e}",
            capsys)


# ---------------------------------------------------------------- 9 determinism

def test_criterion9_determinism(binary_model, binary_ds, capsys):
    opts = SaemOptions(k1=150, k2=60, n_chains=3, seed=21, threads=1)

    def report(o):
        fit = run_saem(binary_model, binary_ds, o)
        ll = ll_importance_sampling(fit, M=1000, seed=2)
        return fit, dumps(fit_to_dict(fit, likelihood=ll.to_dict()))

    f1, r1 = report(opts)
    _, r2 = report(opts)
    identical = r1.encode() == r2.encode()
    threaded = run_saem(binary_model, binary_ds, replace(opts, threads=4)).estimates()
    names = list(threaded)
    # Monte Carlo spread of the estimates across seeds
    spread = np.array([list(run_saem(binary_model, binary_ds, replace(opts, seed=s)).estimates().values())
                       for s in range(100, 106)])
    mcse = spread.std(axis=0, ddof=1)
    single = np.array([f1.estimates()[n] for n in names])
    diff = np.abs(np.array([threaded[n] for n in names]) - single)
    ok = identical and bool(np.all(diff <= 3 * mcse))
    verdict(9, ok, f"reports byte-identical {identical}; threads=4 max |diff|/MC-SE "
                   f"{np.max(diff / mcse):.2f}", capsys)


def test_zz_summary(capsys):
    with capsys.disabled():
        print("\nacceptance summary")
        for k in range(1, 10):
            print(LINES.get(k, f"criterion {k}: NOT RUN"))
