"""Simulation under a fitted model and visual predictive check tables."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .dataset import (Dataset, _fmt, count_categories, kaplan_meier, step_eval, strata,
                      time_bins)
from .model import Rows, UnsupportedOperation, transform_to_natural
from .rng import derive_rng
from .saem import Fit

PERCENTILES = (2.5, 50.0, 97.5)


@dataclass(frozen=True, eq=False)
class SimulationTable:
    """Simulated responses on the design of ``data``.

    ``y`` is (nsim, n_rows). For time-to-event data ``x`` holds the
    simulated predictor columns (time, status, censoring flag).
    """

    data: Dataset
    y: np.ndarray
    x: np.ndarray | None = None

    @property
    def nsim(self) -> int:
        return len(self.y)

    def replicate(self, k: int) -> Dataset:
        return self.data.with_response(self.y[k], None if self.x is None else self.x[k])

    def to_frame(self) -> pd.DataFrame:
        ds = self.data
        n = ds.n_rows
        df = pd.DataFrame({
            "replicate": np.repeat(np.arange(self.nsim), n),
            ds.schema.group: np.tile(np.asarray(ds.ids)[ds.subject], self.nsim),
        })
        preds = ds.schema.predictors
        x = self.x if self.x is not None else np.broadcast_to(ds.x, (self.nsim,) + ds.x.shape)
        for k, p in enumerate(preds):
            if p != ds.schema.response:
                df[p] = x[:, :, k].ravel()
        df[ds.schema.response] = self.y.ravel()
        return df


def simulate_from_fit(fit: Fit, nsim: int = 1000, seed: int | None = None, omega_scale: float = 1.0,
                      batch: int = 100) -> SimulationTable:
    """Draw random effects from N(0, omega_scale * Omega) and simulate
    responses on the original design."""
    model, ds = fit.model, fit.data
    if model.outcome != "gaussian" and model.simulate is None:
        raise UnsupportedOperation(f"model {model.name} has no simulation kernel; supply one to simulate")
    seed = fit.options.seed if seed is None else seed
    iiv = fit.iiv
    om = omega_scale * fit.omega[np.ix_(iiv, iiv)]
    w, v = np.linalg.eigh(om)
    root = v * np.sqrt(np.maximum(w, 0.0))
    phi_pop = fit.population_phi()
    N, n = ds.n_subjects, ds.n_rows
    ys, xs = [], []
    done, b = 0, 0
    while done < nsim:
        k = min(batch, nsim - done)
        rng = derive_rng(seed, "simulate", b)
        rows = Rows.from_dataset(ds, k)
        phi = np.tile(phi_pop, (k, 1))
        phi[:, iiv] += rng.standard_normal((k * N, len(iiv))) @ root.T
        psi = transform_to_natural(phi, model.transforms)
        y, x = model.simulate_rows(np.take(psi, rows.subject, axis=0), rows, rng, fit.sigma)
        ys.append(y.reshape(k, n))
        if x is not None:
            xs.append(x[:, : ds.x.shape[1]].reshape(k, n, -1))
        done += k
        b += 1
    return SimulationTable(ds, np.concatenate(ys), np.concatenate(xs) if xs else None)


# --------------------------------------------------------------------------
# VPC
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class VpcBand:
    stratum: str
    bin: str
    category: str
    obs: float
    lo: float
    med: float
    hi: float


def _levels(ds: Dataset, sims: SimulationTable) -> np.ndarray:
    return np.unique(np.concatenate([ds.y, sims.y.ravel()]))


def _discrete_stats(y: np.ndarray, ds: Dataset, t_idx, s_rows, n_s, n_b, breaks, levels, statistic):
    """Statistic per (stratum, bin, category) for each row of ``y`` (reps, n_rows)."""
    y = np.atleast_2d(y)
    R = len(y)
    if statistic == "median":
        out = np.full((R, n_s, n_b, 1), np.nan)
        for s in range(n_s):
            for b in range(n_b):
                sel = (s_rows == s) & (t_idx == b)
                if sel.any():
                    out[:, s, b, 0] = np.median(y[:, sel], axis=1)
        return out
    if breaks is not None:
        c_idx, _ = count_categories(y.ravel(), breaks)
        n_c = len(breaks)
    else:
        c_idx = np.searchsorted(levels, y.ravel())
        n_c = len(levels)
    c_idx = c_idx.reshape(R, -1)
    valid = s_rows >= 0
    rep = np.repeat(np.arange(R), valid.sum())
    cell = (s_rows[valid] * n_b + t_idx[valid]) * n_c
    flat = (rep * n_s * n_b * n_c) + np.tile(cell, R) + c_idx[:, valid].ravel()
    counts = np.bincount(flat, minlength=R * n_s * n_b * n_c).reshape(R, n_s, n_b, n_c)
    tot = counts.sum(axis=3, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, counts / np.maximum(tot, 1), np.nan)


def _km_on_grid(time, event, s_idx, n_s, grid):
    out = np.empty((n_s, len(grid)))
    for s in range(n_s):
        sel = s_idx == s
        t, surv, _ = kaplan_meier(time[sel], event[sel])
        out[s] = step_eval(t, surv, grid)
    return out


def compute_vpc(sims: SimulationTable, ds: Dataset | None = None, outcome_kind: str | None = None,
                stratify_by: str | None = None, breaks: Sequence[float] | None = None,
                statistic: str = "proportion") -> list[VpcBand]:
    """Observed statistics and 2.5/50/97.5 percentile bands over replicates.

    Discrete outcomes: category proportions (or medians) per time bin.
    Time-to-event: Kaplan-Meier survival on the union of observed event times.
    """
    ds = ds or sims.data
    kind = outcome_kind or ds.outcome
    if ds.n_rows != sims.y.shape[1]:
        raise ValueError("simulations do not match the dataset design")
    if sims.nsim < 100:
        warnings.warn(f"only {sims.nsim} replicates; at least 100 are recommended", RuntimeWarning,
                      stacklevel=2)
    if statistic not in ("proportion", "median"):
        raise ValueError("statistic must be 'proportion' or 'median'")
    s_idx, s_labels = strata(ds, stratify_by)
    n_s = len(s_labels)
    if n_s and np.any(np.bincount(s_idx[s_idx >= 0], minlength=n_s) == 0):
        raise ValueError("a stratum has no subjects in the simulated design")
    bands: list[VpcBand] = []
    if kind == "tte":
        last = ds.offsets[1:] - 1
        t_obs, e_obs = ds.time[last], ds.y[last] == 1
        grid = np.concatenate([[0.0], np.unique(t_obs[e_obs])])
        obs = _km_on_grid(t_obs, e_obs, s_idx, n_s, grid)
        sim = np.empty((sims.nsim, n_s, len(grid)))
        for r in range(sims.nsim):
            t_r = sims.x[r, last, 0] if sims.x is not None else t_obs
            sim[r] = _km_on_grid(t_r, sims.y[r, last] == 1, s_idx, n_s, grid)
        lo, med, hi = np.percentile(sim, PERCENTILES, axis=0)
        for s, lab in enumerate(s_labels):
            for g, t in enumerate(grid):
                bands.append(VpcBand(lab, _fmt(t), "survival", obs[s, g], lo[s, g], med[s, g], hi[s, g]))
        return bands

    t_idx, t_labels = time_bins(ds.time)
    s_rows = s_idx[ds.subject]
    levels = _levels(ds, sims)
    if breaks is not None:
        cat_labels = count_categories(np.zeros(1), breaks)[1]
    elif statistic == "median":
        cat_labels = ["median"]
    else:
        cat_labels = [_fmt(v) for v in levels]
    args = (ds, t_idx, s_rows, n_s, len(t_labels), breaks, levels, statistic)
    obs = _discrete_stats(ds.y, *args)[0]
    sim = _discrete_stats(sims.y, *args)
    lo, med, hi = np.nanpercentile(sim, PERCENTILES, axis=0)
    for s, lab in enumerate(s_labels):
        for b, blab in enumerate(t_labels):
            if np.isnan(obs[s, b]).all():
                continue
            for c, clab in enumerate(cat_labels):
                bands.append(VpcBand(lab, blab, clab, obs[s, b, c], lo[s, b, c], med[s, b, c], hi[s, b, c]))
    return bands


def vpc_frame(bands: Sequence[VpcBand]) -> pd.DataFrame:
    return pd.DataFrame([(b.stratum, b.bin, b.category, b.obs, b.lo, b.med, b.hi) for b in bands],
                        columns=["stratum", "bin", "category", "obs", "lo", "med", "hi"])


def coverage(bands: Sequence[VpcBand]) -> float:
    """Fraction of bands whose observed statistic lies inside [lo, hi]."""
    inside = [b.lo - 1e-12 <= b.obs <= b.hi + 1e-12 for b in bands if np.isfinite(b.obs)]
    return float(np.mean(inside)) if inside else float("nan")
