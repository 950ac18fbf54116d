"""Long-format hierarchical data: loading, validation and exploratory summaries."""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

OUTCOME_KINDS = ("gaussian", "binary", "categorical", "count", "tte")

MAX_EXACT_TIME_BINS = 12
N_QUANTILE_BINS = 8


class SchemaError(ValueError):
    """A mapped column is missing from the input table."""


class ValidationError(ValueError):
    """The table violates a structural requirement of the data layout."""


@dataclass(frozen=True)
class Schema:
    group: str
    predictors: tuple[str, ...]
    response: str
    covariates: tuple[str, ...] = ()
    censoring: str | None = None

    @classmethod
    def make(cls, group, predictors, response, covariates=(), censoring=None) -> "Schema":
        return cls(group, tuple(predictors), response, tuple(covariates), censoring)

    def columns(self) -> list[str]:
        cols = [self.group, *self.predictors, self.response, *self.covariates]
        if self.censoring:
            cols.append(self.censoring)
        return list(dict.fromkeys(cols))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations grouped by subject, rows sorted by time within subject.

    Row-level arrays are stored flat and concatenated subject by subject;
    ``offsets[i]:offsets[i + 1]`` selects subject ``i``.
    """

    ids: tuple[str, ...]
    schema: Schema
    outcome: str
    x: np.ndarray  # (n_rows, n_predictors)
    y: np.ndarray  # (n_rows,)
    covariates: np.ndarray  # (n_subjects, n_covariates), NaN for missing
    offsets: np.ndarray
    censor: np.ndarray | None = None
    source: str | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for arr in (self.x, self.y, self.covariates, self.offsets):
            arr.flags.writeable = False

    @property
    def n_subjects(self) -> int:
        return len(self.ids)

    @property
    def n_rows(self) -> int:
        return len(self.y)

    @property
    def n_obs(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def subject(self) -> np.ndarray:
        """Subject index of every row."""
        if "subject" not in self._cache:
            self._cache["subject"] = np.repeat(np.arange(self.n_subjects), self.n_obs)
        return self._cache["subject"]

    @property
    def time(self) -> np.ndarray:
        return self.x[:, 0]

    def predictor(self, name: str) -> np.ndarray:
        return self.x[:, self.schema.predictors.index(name)]

    def covariate(self, name: str) -> np.ndarray:
        try:
            k = self.schema.covariates.index(name)
        except ValueError:
            raise KeyError(f"{name!r} is not a covariate of this dataset") from None
        return self.covariates[:, k]

    def rows_of(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i + 1])

    def to_frame(self) -> pd.DataFrame:
        s = self.schema
        df = pd.DataFrame(self.x, columns=list(s.predictors))
        df.insert(0, s.group, np.asarray(self.ids, dtype=object)[self.subject])
        if s.response not in s.predictors:
            df[s.response] = self.y
        for k, name in enumerate(s.covariates):
            df[name] = self.covariates[self.subject, k]
        if s.censoring and s.censoring not in df:
            df[s.censoring] = self.censor
        return df

    def with_response(self, y: np.ndarray, x: np.ndarray | None = None) -> "Dataset":
        """Same design, new responses (kept in sync with predictor columns)."""
        y = np.asarray(y, dtype=float)
        x = np.array(self.x if x is None else x, dtype=float)
        if self.schema.response in self.schema.predictors:
            x[:, self.schema.predictors.index(self.schema.response)] = y
        censor = None if self.censor is None else self.censor.copy()
        if censor is not None and self.schema.censoring in self.schema.predictors:
            censor = x[:, self.schema.predictors.index(self.schema.censoring)].copy()
        return Dataset(self.ids, self.schema, self.outcome, x, y, self.covariates.copy(),
                       self.offsets.copy(), censor, self.source)

    def subset(self, subjects: Sequence[int], relabel: bool = False) -> "Dataset":
        """Dataset made of the given subject indices (repeats allowed)."""
        subjects = np.asarray(subjects, dtype=int)
        rows = np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in subjects]) \
            if len(subjects) else np.zeros(0, dtype=int)
        offsets = np.concatenate([[0], np.cumsum(self.n_obs[subjects])])
        if relabel:
            ids = tuple(str(k + 1) for k in range(len(subjects)))
        else:
            ids = tuple(self.ids[i] for i in subjects)
        return Dataset(ids, self.schema, self.outcome, self.x[rows], self.y[rows],
                       self.covariates[subjects], offsets,
                       None if self.censor is None else self.censor[rows], self.source)

    def complete_for(self, covariates: Sequence[str]) -> "Dataset":
        """Drop subjects with a missing value in any of ``covariates``."""
        if not covariates:
            return self
        cols = np.column_stack([self.covariate(c) for c in covariates])
        keep = np.flatnonzero(~np.isnan(cols).any(axis=1))
        if len(keep) < self.n_subjects:
            log.warning("excluding %d subject(s) with missing %s", self.n_subjects - len(keep),
                        ", ".join(covariates))
            return self.subset(keep)
        return self

    def impute_median(self, name: str) -> "Dataset":
        k = self.schema.covariates.index(name)
        cov = self.covariates.copy()
        col = cov[:, k]
        col[np.isnan(col)] = np.nanmedian(col)
        return Dataset(self.ids, self.schema, self.outcome, self.x, self.y, cov, self.offsets,
                       self.censor, self.source)

    def add_covariate(self, name: str, values: np.ndarray) -> "Dataset":
        schema = Schema(self.schema.group, self.schema.predictors, self.schema.response,
                        self.schema.covariates + (name,), self.schema.censoring)
        cov = np.column_stack([self.covariates, np.asarray(values, dtype=float)])
        return Dataset(self.ids, schema, self.outcome, self.x, self.y, cov, self.offsets,
                       self.censor, self.source)


def from_frame(df: pd.DataFrame, schema: Schema, outcome: str, source: str | None = None) -> Dataset:
    """Validate a long-format frame and build a :class:`Dataset`."""
    if outcome not in OUTCOME_KINDS:
        raise ValueError(f"unknown outcome kind {outcome!r}; expected one of {OUTCOME_KINDS}")
    for col in schema.columns():
        if col not in df.columns:
            raise SchemaError(f"missing column {col!r}")
    if outcome in ("binary", "categorical", "count", "tte") and schema.response not in schema.predictors:
        raise ValidationError(
            f"for {outcome} outcomes the response {schema.response!r} must also be a predictor column")
    if outcome == "tte" and not schema.censoring:
        raise ValidationError("tte outcome requires a censoring column")

    df = df.reset_index(drop=True)
    mandatory = [schema.group, *schema.predictors, schema.response]
    if schema.censoring:
        mandatory.append(schema.censoring)
    numeric = {}
    for col in list(dict.fromkeys(mandatory[1:] + list(schema.covariates))):
        numeric[col] = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=float)
    bad = np.zeros(len(df), dtype=bool)
    for col in mandatory[1:]:
        bad |= ~np.isfinite(numeric[col])
    bad |= df[schema.group].isna().to_numpy()
    if bad.any():
        rows = np.flatnonzero(bad)
        shown = ", ".join(str(r) for r in rows[:20])
        raise ValidationError(f"{len(rows)} row(s) with missing or non-numeric mandatory values "
                              f"(row index: {shown}{' ...' if len(rows) > 20 else ''})")

    group = df[schema.group].astype(str).to_numpy()
    ids = tuple(pd.unique(group))
    code = pd.Categorical(group, categories=ids).codes
    time = numeric[schema.predictors[0]]
    # canonical order: subject of first appearance, then time (stable)
    order = np.lexsort((time, code))
    code = code[order]
    x = np.column_stack([numeric[p][order] for p in schema.predictors])
    y = numeric[schema.response][order]
    censor = numeric[schema.censoring][order] if schema.censoring else None
    counts = np.bincount(code, minlength=len(ids))
    offsets = np.concatenate([[0], np.cumsum(counts)])

    ncov = len(schema.covariates)
    covs = np.full((len(ids), ncov), np.nan)
    for k, name in enumerate(schema.covariates):
        vals = numeric[name][order]
        for i in range(len(ids)):
            v = vals[offsets[i]:offsets[i + 1]]
            finite = v[np.isfinite(v)]
            if len(finite) and np.ptp(finite) > 0:
                raise ValidationError(f"covariate {name!r} is not constant within subject {ids[i]!r}")
            covs[i, k] = finite[0] if len(finite) else np.nan

    ds = Dataset(ids, schema, outcome, x, y, covs, offsets, censor, source)
    _validate(ds)
    return ds


def _validate(ds: Dataset) -> None:
    t = ds.time
    for i, sid in enumerate(ds.ids):
        ti = t[ds.rows_of(i)]
        if np.any(np.diff(ti) < 0):
            raise ValidationError(f"time is not monotone within subject {sid!r}")
    y = ds.y
    if ds.outcome == "binary" and not np.all(np.isin(y, (0, 1))):
        raise ValidationError("binary responses must be 0/1")
    if ds.outcome == "count" and (np.any(y < 0) or np.any(y != np.round(y))):
        raise ValidationError("count responses must be non-negative integers")
    if ds.outcome == "tte":
        if not np.all(np.isin(ds.censor, (0, 1))):
            raise ValidationError("censoring column must contain only 0/1")
        for i, sid in enumerate(ds.ids):
            if t[ds.offsets[i]] != 0:
                raise ValidationError(f"tte subject {sid!r} lacks a time-0 row")


def load_dataset(path: str | Path, schema: Schema, outcome: str,
                 impute_median: Sequence[str] = ()) -> Dataset:
    """Read a comma-separated table with a header row."""
    df = pd.read_csv(path, sep=",", decimal=".", encoding="utf-8")
    ds = from_frame(df, schema, outcome, source=str(path))
    for name in impute_median:
        ds = ds.impute_median(name)
    n_missing = np.isnan(ds.covariates).any(axis=0)
    for name, miss in zip(schema.covariates, n_missing):
        if miss:
            log.warning("covariate %r has missing values; subjects will be excluded from fits using it", name)
    return ds


# --------------------------------------------------------------------------
# exploratory summaries
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ProportionSeries:
    stratum: str
    bin: str
    category: str
    prop: float
    n: int


def time_bins(times: np.ndarray) -> tuple[np.ndarray, list[str]]:
    """Bin index per row and bin labels.

    Exact distinct values when there are few of them, otherwise equal-count
    quantile bins.
    """
    times = np.asarray(times, dtype=float)
    distinct = np.unique(times)
    if len(distinct) <= MAX_EXACT_TIME_BINS:
        idx = np.searchsorted(distinct, times)
        return idx, [_fmt(v) for v in distinct]
    edges = np.unique(np.quantile(times, np.linspace(0, 1, N_QUANTILE_BINS + 1)))
    idx = np.clip(np.searchsorted(edges, times, side="right") - 1, 0, len(edges) - 2)
    labels = [f"[{_fmt(a)},{_fmt(b)}{']' if k == len(edges) - 2 else ')'}"
              for k, (a, b) in enumerate(zip(edges[:-1], edges[1:]))]
    return idx, labels


def count_categories(y: np.ndarray, breaks: Sequence[float]) -> tuple[np.ndarray, list[str]]:
    """Regroup counts into ``[b_k, b_{k+1})`` intervals; the last is open-ended."""
    b = np.asarray(breaks, dtype=float)
    if np.any(np.diff(b) <= 0):
        raise ValueError("breaks must be strictly increasing")
    idx = np.clip(np.searchsorted(b, y, side="right") - 1, 0, len(b) - 1)
    labels = []
    for k in range(len(b)):
        lo = b[k]
        if k == len(b) - 1:
            labels.append(f"{_fmt(lo)}+")
        elif b[k + 1] - lo == 1:
            labels.append(_fmt(lo))
        else:
            labels.append(f"{_fmt(lo)}-{_fmt(b[k + 1] - 1)}")
    return idx, labels


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else f"{v:g}"


def strata(ds: Dataset, stratify_by: str | None) -> tuple[np.ndarray, list[str]]:
    """Stratum index per subject and stratum labels."""
    if stratify_by is None:
        return np.zeros(ds.n_subjects, dtype=int), ["all"]
    if stratify_by not in ds.schema.covariates:
        raise KeyError(f"{stratify_by!r} is not a covariate of this dataset")
    vals = ds.covariate(stratify_by)
    levels = np.unique(vals[~np.isnan(vals)])
    idx = np.full(ds.n_subjects, -1)
    for k, v in enumerate(levels):
        idx[vals == v] = k
    return idx, [f"{stratify_by}={_fmt(v)}" for v in levels]


def category_table(y: np.ndarray, time_idx: np.ndarray, stratum_idx: np.ndarray,
                   cat_idx: np.ndarray, n_strata: int, n_bins: int, n_cat: int):
    """Counts per (stratum, bin, category) and totals per (stratum, bin)."""
    valid = stratum_idx >= 0
    flat = (stratum_idx[valid] * n_bins + time_idx[valid]) * n_cat + cat_idx[valid]
    counts = np.bincount(flat, minlength=n_strata * n_bins * n_cat).reshape(n_strata, n_bins, n_cat)
    return counts, counts.sum(axis=2)


def kaplan_meier(time: np.ndarray, event: np.ndarray):
    """Product-limit estimate at the distinct event times.

    Returns (event_times, survival, at_risk).
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    ev_times = np.unique(time[event])
    # at risk: time >= t ; deaths: event & time == t
    sorted_t = np.sort(time)
    at_risk = len(time) - np.searchsorted(sorted_t, ev_times, side="left")
    d_sorted = np.sort(time[event])
    deaths = np.searchsorted(d_sorted, ev_times, side="right") - np.searchsorted(d_sorted, ev_times, side="left")
    surv = np.cumprod(1.0 - deaths / at_risk)
    return ev_times, surv, at_risk


def step_eval(times: np.ndarray, surv: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Right-continuous step function S(t) evaluated on ``grid`` (S=1 before the first time)."""
    k = np.searchsorted(times, grid, side="right")
    return np.concatenate([[1.0], surv])[k]


def last_rows(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """(follow-up time, event flag) from each subject's last row."""
    last = ds.offsets[1:] - 1
    return ds.time[last], ds.y[last] == 1


def summarize_discrete(ds: Dataset, breaks: Sequence[float] | None = None,
                       stratify_by: str | None = None) -> list[ProportionSeries]:
    """Observed category proportions per time bin, or Kaplan–Meier curves for tte."""
    if ds.outcome not in ("binary", "categorical", "count", "tte"):
        raise ValueError(f"no discrete summary for outcome {ds.outcome!r}")
    if breaks is not None and np.any(np.diff(np.asarray(breaks, dtype=float)) <= 0):
        raise ValueError("breaks must be strictly increasing")
    s_idx, s_labels = strata(ds, stratify_by)
    out: list[ProportionSeries] = []

    if ds.outcome == "tte":
        t_last, ev = last_rows(ds)
        for k, lab in enumerate(s_labels):
            sel = s_idx == k
            if not sel.any():
                warnings.warn(f"empty stratum {lab} omitted")
                continue
            times, surv, risk = kaplan_meier(t_last[sel], ev[sel])
            out.append(ProportionSeries(lab, "0", "survival", 1.0, int(sel.sum())))
            out.extend(ProportionSeries(lab, _fmt(t), "survival", float(s), int(r))
                       for t, s, r in zip(times, surv, risk))
        return out

    t_idx, t_labels = time_bins(ds.time)
    c_idx, c_labels = response_categories(ds, breaks)
    counts, totals = category_table(ds.y, t_idx, s_idx[ds.subject], c_idx,
                                    len(s_labels), len(t_labels), len(c_labels))
    for k, lab in enumerate(s_labels):
        if totals[k].sum() == 0:
            warnings.warn(f"empty stratum {lab} omitted")
            continue
        for b, blab in enumerate(t_labels):
            n = totals[k, b]
            if n == 0:
                continue
            for c, clab in enumerate(c_labels):
                out.append(ProportionSeries(lab, blab, clab, counts[k, b, c] / n, int(n)))
    return out


def response_categories(ds: Dataset, breaks: Sequence[float] | None = None,
                        y: np.ndarray | None = None) -> tuple[np.ndarray, list[str]]:
    """Category index per row; categories come from the observed data."""
    y_obs = ds.y
    y = y_obs if y is None else y
    if ds.outcome == "count" and breaks is not None:
        return count_categories(y, breaks)
    levels = np.unique(y_obs)
    idx = np.searchsorted(levels, y)
    if np.any(idx >= len(levels)) or np.any(levels[np.minimum(idx, len(levels) - 1)] != y):
        # simulated values outside the observed support get their own trailing levels
        levels = np.unique(np.concatenate([y_obs, y]))
        idx = np.searchsorted(levels, y)
    return idx, [_fmt(v) for v in levels]


def proportions_to_frame(series: Sequence[ProportionSeries]) -> pd.DataFrame:
    return pd.DataFrame([(s.stratum, s.bin, s.category, s.prop, s.n) for s in series],
                        columns=["stratum", "bin", "category", "prop", "n"])


def bundled_path(name: str) -> Path:
    """Path of a CSV shipped in the package ``data`` directory."""
    return Path(__file__).with_name("data") / f"{name}.csv"


LUNG_SCHEMA = Schema.make("id", ["time", "status", "cens"], "status",
                          ["age", "sex", "ph.ecog", "ph.karno", "pat.karno", "ecog1", "ecog23"],
                          censoring="cens")


def load_lung(impute_median: Sequence[str] = ()) -> Dataset:
    return load_dataset(bundled_path("lung"), LUNG_SCHEMA, "tte", impute_median=impute_median)


# Datasets known by name. Only lung ships with the package; the others are
# read from a CSV named by an environment variable.
NAMED_DATASETS = {
    "lung": (LUNG_SCHEMA, "tte", None),
    "toenail": (Schema.make("id", ["time", "y"], "y", ["treatment"]), "binary", "NLMESAEM_TOENAIL_CSV"),
    "rapi": (Schema.make("id", ["time", "rapi"], "rapi", ["gender"]), "count", "NLMESAEM_RAPI_CSV"),
}


def load_named(name: str, impute_median: Sequence[str] = ()) -> Dataset:
    """Load a dataset by name (``lung``, ``toenail`` or ``rapi``)."""
    try:
        schema, outcome, env = NAMED_DATASETS[name]
    except KeyError:
        raise KeyError(f"unknown dataset {name!r}; known: {', '.join(NAMED_DATASETS)}") from None
    if env is None:
        return load_dataset(bundled_path(name), schema, outcome, impute_median)
    path = os.environ.get(env)
    if not path:
        raise FileNotFoundError(f"dataset {name!r} is not bundled; set {env} to a CSV with columns "
                                f"{','.join(schema.columns())}")
    return load_dataset(path, schema, outcome, impute_median)


def hurdle_split(ds: Dataset) -> tuple[Dataset, Dataset]:
    """(binarised response on all rows, positive-count rows only).

    Subjects without a positive count are absent from the second dataset.
    """
    if ds.outcome != "count":
        raise ValueError("the hurdle split needs count data")
    df = ds.to_frame()
    r = ds.schema.response
    zero = df.assign(**{r: (df[r] > 0).astype(int)})
    pos = df[df[r] > 0]
    if pos.empty:
        raise ValidationError("no positive counts to fit the positive part of the hurdle model")
    return (from_frame(zero, ds.schema, "binary", source=ds.source),
            from_frame(pos, ds.schema, "count", source=ds.source))
