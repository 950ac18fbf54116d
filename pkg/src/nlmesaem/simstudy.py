"""Simulation studies on the longitudinal binary template: simulate replicate
datasets from known parameters, refit, and summarise relative errors."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .dataset import Dataset, Schema, from_frame
from .model import ModelSpec, builtin_model, simulate_dataset
from .rng import derive_rng, derive_seed
from .saem import Fit, SaemOptions, fit_from_estimates, run_saem

TIMES = (0.0, 1.0, 2.0, 3.0, 5.5, 8.0, 11.0)
START_TAGS = ("true", "pop", "far")


@dataclass
class SimStudyScenario:
    """Design, truth and estimation settings of one study.

    ``truth`` maps fixed-effect names to values and ``omega_sd`` maps
    parameters with variability to their SDs.
    """

    name: str
    truth: dict[str, float]
    omega_sd: dict[str, float]
    times: tuple[float, ...] = TIMES
    n_per_arm: int = 137
    S: int = 200
    start: str = "true"
    options: SaemOptions = field(default_factory=lambda: SaemOptions(k1=300, k2=100, n_chains=10))
    seed: int = 20240101

    def __post_init__(self):
        if self.S < 1:
            raise ValueError("S must be at least 1")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("design times must be strictly increasing")
        if self.start not in START_TAGS:
            raise ValueError(f"start must be one of {', '.join(START_TAGS)}")

    def model(self) -> ModelSpec:
        base = builtin_model("binary-logistic")
        pat = np.diag([int(p in self.omega_sd) for p in base.param_names])
        return base.with_changes(covariates=("trt",), covariate_model=[[0, 1]], omega_pattern=pat)

    def design(self) -> Dataset:
        n = 2 * self.n_per_arm
        t = np.tile(self.times, n)
        df = pd.DataFrame({"id": np.repeat(np.arange(1, n + 1), len(self.times)), "time": t,
                           "y": 0, "trt": np.repeat(np.arange(n) >= self.n_per_arm, len(self.times)).astype(int)})
        return from_frame(df, Schema.make("id", ["time", "y"], "y", ["trt"]), "binary", source=self.name)

    def reporting_truth(self) -> dict[str, float]:
        out = dict(self.truth)
        out.update({f"omega_{p}": v for p, v in self.omega_sd.items()})
        return out

    def _omega(self, model: ModelSpec, sd: dict[str, float]) -> np.ndarray:
        return np.diag([sd.get(p, 0.0) ** 2 if p in self.omega_sd else 0.0 for p in model.param_names])

    def start_fit(self, model: ModelSpec, data: Dataset, opts: SaemOptions) -> Fit:
        names = model.fixed_names()
        if self.start == "true":
            fixed, sd = [self.truth[n] for n in names], self.omega_sd
        elif self.start == "pop":
            pop = {"theta1": -0.5, "theta2": -0.19}
            fixed, sd = [pop.get(n, 0.0) for n in names], {"theta1": 1.0, "theta2": 1.0}
        else:
            fixed, sd = [0.0] * len(names), {"theta1": 2.0, "theta2": 0.7}
        return fit_from_estimates(model, data, opts, fixed, self._omega(model, sd), np.zeros(0))


def scenario(number: int, **kw) -> SimStudyScenario:
    """Scenario 1: variability on the intercept only. Scenario 2: on both parameters."""
    truth = {"theta1": -1.71, "theta2": -0.39, "beta_trt(theta2)": -0.15}
    if number == 1:
        return SimStudyScenario("scenario1", truth, {"theta1": 4.02}, **kw)
    if number == 2:
        return SimStudyScenario("scenario2", truth, {"theta1": 1.0, "theta2": 0.2}, **kw)
    raise ValueError("scenario must be 1 or 2")


def simulate_replicate(sc: SimStudyScenario, s: int, design: Dataset | None = None) -> Dataset:
    """Replicate ``s``; the same data for every start setting."""
    design = design or sc.design()
    model = sc.model()
    rng = derive_rng(sc.seed, "simstudy-data", s)
    truth_fit = fit_from_estimates(model, design, sc.options, [sc.truth[n] for n in model.fixed_names()],
                                   sc._omega(model, sc.omega_sd), np.zeros(0))
    phi = truth_fit.population_phi()
    iiv = truth_fit.iiv
    sd = np.sqrt(np.diag(truth_fit.omega)[iiv])
    phi[:, iiv] += rng.standard_normal((design.n_subjects, len(iiv))) * sd
    return simulate_dataset(model, design, phi, np.zeros(0), rng)[0]


def relative_errors(estimates: pd.DataFrame, truth: dict[str, float]) -> pd.DataFrame:
    """Per-parameter RB and RRMSE (percent) from a replicate x parameter table."""
    rows = []
    for p, t0 in truth.items():
        est = estimates[p].to_numpy(dtype=float)
        est = est[np.isfinite(est)]
        ree = (est - t0) / t0 * 100.0
        n = len(ree)
        rb = ree.mean() if n else np.nan
        half = 1.959963984540054 * ree.std(ddof=1) / np.sqrt(n) if n > 1 else np.nan
        rows.append({"parameter": p, "true": t0, "n": n, "rb": rb,
                     "rrmse": np.sqrt(np.mean(ree ** 2)) if n else np.nan,
                     "rb_ci_low": rb - half, "rb_ci_high": rb + half,
                     "sd": est.std(ddof=1) if n > 1 else np.nan})
    return pd.DataFrame(rows)


@dataclass
class SimStudyResult:
    scenario: SimStudyScenario
    estimates: pd.DataFrame
    metrics: pd.DataFrame
    failures: int

    def ree_frame(self) -> pd.DataFrame:
        """Long table of relative estimation errors, ready for violin plots."""
        truth = self.scenario.reporting_truth()
        long = self.estimates.melt(id_vars=["replicate"], value_vars=list(truth),
                                   var_name="parameter", value_name="estimate")
        long["ree"] = (long["estimate"] - long["parameter"].map(truth)) / long["parameter"].map(truth) * 100
        long.insert(0, "start", self.scenario.start)
        return long


def run_simstudy(sc: SimStudyScenario, replicates=None, progress=None) -> SimStudyResult:
    """Simulate and refit ``sc.S`` replicates (or the given replicate indices)."""
    design = sc.design()
    model = sc.model()
    truth = sc.reporting_truth()
    rows, failures = [], 0
    for s in (range(sc.S) if replicates is None else replicates):
        data = simulate_replicate(sc, s, design)
        opts = replace(sc.options, seed=derive_seed(sc.seed, "simstudy-fit", sc.start, s))
        try:
            est = run_saem(model, data, opts, start=sc.start_fit(model, data, opts)).estimates()
        except Exception as exc:
            warnings.warn(f"replicate {s} failed: {exc}", RuntimeWarning, stacklevel=2)
            failures += 1
            continue
        rows.append({"replicate": s, **{p: est[p] for p in truth}})
        if progress:
            progress(s)
    est = pd.DataFrame(rows, columns=["replicate", *truth])
    return SimStudyResult(sc, est, relative_errors(est, truth), failures)
