"""Standard errors and confidence intervals: linearised Fisher information
(gaussian outcomes), case bootstrap and conditional bootstrap."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import linalg

from .conditional import ConditionalEstimates, estimate_conditional, map_estimates
from .likelihood import _linearisation, _residual_var
from .model import UnsupportedOperation, simulate_dataset, transform_to_natural
from .rng import derive_rng, derive_seed
from .saem import Fit, omega_entries, run_saem, sigma_names

FAILURE_LIMIT = 0.2


@dataclass
class UncertaintyResult:
    method: str
    names: list[str]
    estimate: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    B: int = 0
    replicates: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    failures: int = 0
    flags: list[str] = field(default_factory=list)

    @property
    def rse(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return 100.0 * self.se / np.abs(self.estimate)

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"parameter": self.names, "estimate": self.estimate, "se": self.se,
                             "rse": self.rse, "ci_low": self.ci_low, "ci_high": self.ci_high,
                             "method": self.method, "B": self.B, "failures": self.failures})

    def replicate_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.replicates, columns=self.names)
        df.insert(0, "replicate", np.arange(len(df)))
        return df

    def se_of(self, name: str) -> float:
        return float(self.se[self.names.index(name)])


# --------------------------------------------------------------------------
# linearised Fisher information
# --------------------------------------------------------------------------

def fim_linearized(fit: Fit, cond: ConditionalEstimates | None = None) -> UncertaintyResult:
    """Expected information of the model linearised around the individual
    estimates; block diagonal between fixed effects and variance terms."""
    model, ds = fit.model, fit.data
    if model.outcome != "gaussian":
        raise UnsupportedOperation("the linearised Fisher information is only available for gaussian outcomes")
    iiv = np.flatnonzero(model.has_iiv)
    phi_hat = map_estimates(fit, start=None if cond is None else cond.map)
    phi_pop = fit.population_phi()
    eta = phi_hat - phi_pop
    f0, J, pred = _linearisation(fit, phi_hat)
    design = model.design(ds)

    # derivative of the linearised mean with respect to the fixed effects
    n_fix = len(fit.fixed)
    X = np.zeros((ds.n_rows, n_fix))
    for c in range(n_fix):
        h = 1e-6 * max(1.0, abs(fit.fixed[c]))
        shift = design[:, :, c] * h
        X[:, c] = (pred(phi_hat + shift) - pred(phi_hat - shift)) / (2 * h)

    om = fit.omega[np.ix_(iiv, iiv)]
    ent = [(i, j) for i, j in omega_entries(model)]
    pos = {p: k for k, p in enumerate(iiv)}
    sig = np.atleast_1d(fit.sigma)
    n_var = len(ent) + len(sig)
    F_fix = np.zeros((n_fix, n_fix))
    F_var = np.zeros((n_var, n_var))
    for i in range(ds.n_subjects):
        sl = ds.rows_of(i)
        Ji, fi = J[sl], f0[sl]
        R = _residual_var(model, fi, sig)
        V = Ji @ om @ Ji.T + np.diag(R)
        Vi = linalg.inv(V)
        F_fix += X[sl].T @ Vi @ X[sl]
        dV = []
        for a, b in ent:
            E = np.zeros_like(om)
            E[pos[a], pos[b]] = E[pos[b], pos[a]] = 1.0
            dV.append(Ji @ E @ Ji.T)
        ff = fi if model.error_model != "exponential" else np.zeros_like(fi)
        kind = model.error_model
        if kind in ("constant", "exponential"):
            dV.append(np.diag(np.full_like(fi, 2 * sig[0])))
        elif kind == "proportional":
            dV.append(np.diag(2 * sig[0] * ff ** 2))
        else:
            dV.append(np.diag(np.full_like(fi, 2 * sig[0])))
            dV.append(np.diag(2 * sig[1] * ff ** 2))
        A = [Vi @ d for d in dV]
        for k in range(n_var):
            for m in range(k, n_var):
                F_var[k, m] = F_var[m, k] = F_var[k, m] + 0.5 * np.trace(A[k] @ A[m])
    flags = []

    def invert(F, labels):
        try:
            if np.linalg.cond(F) > 1e12:
                raise np.linalg.LinAlgError
            return np.linalg.inv(F)
        except np.linalg.LinAlgError:
            flags.append("singular information for: " + ", ".join(labels))
            return np.linalg.pinv(F)

    fix_names = model.fixed_names()
    C_fix = invert(F_fix, fix_names)
    var_labels = [f"omega[{a},{b}]" for a, b in ent] + sigma_names(model)
    C_var = invert(F_var, var_labels)
    est = fit.estimates()
    names = list(est)
    se = np.full(len(names), np.nan)
    # fixed effects: delta method to the reporting scale
    for c, ((j, k), nm) in enumerate(zip(model.fixed_layout(), fix_names)):
        s = np.sqrt(max(C_fix[c, c], 0.0))
        if k < 0:
            v = fit.fixed[c]
            h = 1e-6 * max(1.0, abs(v))
            t = (model.transforms[j],)
            deriv = (transform_to_natural(np.array([v + h]), t) - transform_to_natural(np.array([v - h]), t))[0] / (2 * h)
            s *= abs(deriv)
        se[names.index(nm)] = s
    for k, (a, b) in enumerate(ent):
        s = np.sqrt(max(C_var[k, k], 0.0))
        if a == b:
            w = np.sqrt(fit.omega[a, a])
            se[names.index(f"omega_{model.param_names[a]}")] = s / (2 * w) if w > 0 else np.nan
        else:
            se[names.index(f"cov_{model.param_names[a]}_{model.param_names[b]}")] = s
    for k, nm in enumerate(sigma_names(model)):
        se[names.index(nm)] = np.sqrt(max(C_var[len(ent) + k, len(ent) + k], 0.0))
    values = np.array([est[n] for n in names])
    z = 1.959963984540054
    return UncertaintyResult("fim-lin", names, values, se, values - z * se, values + z * se, flags=flags)


# --------------------------------------------------------------------------
# bootstrap
# --------------------------------------------------------------------------

def _summarise(method, fit: Fit, reps: list, B: int, flags: list[str]) -> UncertaintyResult:
    est = fit.estimates()
    names = list(est)
    values = np.array([est[n] for n in names])
    ok = [r for r in reps if r is not None]
    failures = len(reps) - len(ok)
    if failures > FAILURE_LIMIT * max(B, 1):
        flags.append(f"unreliable: {failures} of {B} refits failed")
    if not ok:
        nan = np.full(len(names), np.nan)
        return UncertaintyResult(method, names, values, nan, nan, nan, B, np.zeros((0, len(names))),
                                 failures, flags)
    R = np.array([[r[n] for n in names] for r in ok])
    se = R.std(axis=0, ddof=1) if len(R) > 1 else np.zeros(len(names))
    lo, hi = np.percentile(R, [2.5, 97.5], axis=0)
    return UncertaintyResult(method, names, values, se, lo, hi, B, R, failures, flags)


def _run_replicates(fn, B: int, threads: int):
    def safe(b):
        try:
            return fn(b)
        except Exception as exc:
            warnings.warn(f"bootstrap replicate {b} failed: {exc}", RuntimeWarning, stacklevel=2)
            return None

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(safe, range(B)))
    return [safe(b) for b in range(B)]


def _refit(fit: Fit, data, b: int, seed: int, from_estimates: bool):
    opts = replace(fit.options, seed=derive_seed(seed, "replicate-fit", b), threads=1)
    start = fit if from_estimates else None
    return run_saem(fit.model, data, opts, start=start).estimates()


def case_bootstrap(fit: Fit, B: int = 200, seed: int | None = None, threads: int = 1,
                   from_estimates: bool = False) -> UncertaintyResult:
    """Resample subjects with replacement and refit each replicate.

    Refits start from the model's initial values unless ``from_estimates``.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    seed = fit.options.seed if seed is None else seed
    N = fit.data.n_subjects
    if N == 1:
        est = fit.estimates()
        reps = [dict(est) for _ in range(B)]
        return _summarise("case-boot", fit, reps, B, ["degenerate: a single subject gives identical replicates"])

    def one(b):
        rng = derive_rng(seed, "case-bootstrap", b)
        idx = rng.integers(0, N, N)
        return _refit(fit, fit.data.subset(idx, relabel=True), b, seed, from_estimates)

    return _summarise("case-boot", fit, _run_replicates(one, B, threads), B, [])


def single_event_tte(fit: Fit) -> bool:
    ds = fit.data
    if ds.outcome != "tte":
        return False
    ev = np.bincount(ds.subject, weights=(ds.y == 1).astype(float), minlength=ds.n_subjects)
    return bool(np.all(ev <= 1))


def pooled_random_effects(fit: Fit, cond: ConditionalEstimates) -> np.ndarray:
    """Conditional draws of the random effects pooled over subjects and
    linearly rescaled so their empirical covariance equals the estimate."""
    iiv = fit.iiv
    eta = (cond.samples - cond.phi_pop[:, None, :])[:, :, iiv].reshape(-1, len(iiv))
    eta = eta - eta.mean(axis=0)
    emp = np.atleast_2d(np.cov(eta, rowvar=False))
    om = fit.omega[np.ix_(iiv, iiv)]
    w, v = np.linalg.eigh(emp)
    w = np.maximum(w, 1e-300)
    whiten = (v / np.sqrt(w)) @ v.T
    wo, vo = np.linalg.eigh(om)
    colour = (vo * np.sqrt(np.maximum(wo, 0.0))) @ vo.T
    return eta @ whiten @ colour


def conditional_bootstrap(fit: Fit, cond: ConditionalEstimates | None = None, B: int = 200,
                          seed: int | None = None, threads: int = 1,
                          from_estimates: bool = False) -> UncertaintyResult:
    """Simulate replicates from random effects drawn from the pooled,
    rescaled conditional distributions, then refit each replicate."""
    model = fit.model
    if model.outcome != "gaussian" and model.simulate is None:
        raise UnsupportedOperation(f"model {model.name} has no simulation kernel; supply one to use "
                                   "the conditional bootstrap")
    if single_event_tte(fit):
        raise UnsupportedOperation("conditional bootstrap is not meaningful for single-event time-to-event "
                                   "data: random effects are not identifiable; use the case bootstrap")
    if B < 2:
        raise ValueError("B must be at least 2")
    seed = fit.options.seed if seed is None else seed
    cond = cond or estimate_conditional(fit)
    pool = pooled_random_effects(fit, cond)
    phi_pop = fit.population_phi()
    iiv, N = fit.iiv, fit.data.n_subjects
    flags = []
    if np.all(np.diag(fit.omega)[iiv] < 1e-8):
        flags.append("variance estimates near zero: replicate variability comes from residual simulation only")

    def one(b):
        rng = derive_rng(seed, "conditional-bootstrap", b)
        phi = phi_pop.copy()
        phi[:, iiv] += pool[rng.integers(0, len(pool), N)]
        data = simulate_dataset(model, fit.data, phi, fit.sigma, rng)[0]
        return _refit(fit, data, b, seed, from_estimates)

    return _summarise("cond-boot", fit, _run_replicates(one, B, threads), B, flags)
