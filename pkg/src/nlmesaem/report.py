"""Self-contained JSON fit reports.

A report holds the model definition, the data, the options and the
estimates, so later commands can rebuild the :class:`Fit` from it alone.
Keys are sorted and no timestamps are written, so identical runs produce
identical bytes.
"""

from __future__ import annotations

import io
import json
import math
from pathlib import Path

import numpy as np
import pandas as pd

from .dataset import Dataset, Schema, from_frame
from .model import ModelSpec, builtin_model
from .saem import Fit, SaemOptions

FORMAT_VERSION = 1
MODEL_FIELDS = ("psi0", "transforms", "covariates", "covariate_model", "beta0", "omega_pattern",
                "omega_init", "error_model", "sigma0")


class ReportError(ValueError):
    pass


def _plain(v):
    """JSON-safe copy: arrays to lists, non-finite floats to null."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def model_to_dict(model: ModelSpec) -> dict:
    return {"name": model.name, **{f: getattr(model, f) for f in MODEL_FIELDS}}


def model_from_dict(d: dict) -> ModelSpec:
    kw = {}
    shape = (len(d["covariates"]), len(d["psi0"]))
    for f in MODEL_FIELDS:
        v = d[f]
        if f in ("transforms", "covariates"):
            v = tuple(v)
        elif f in ("covariate_model", "omega_pattern"):
            v = np.asarray(v, dtype=int).reshape(shape) if f == "covariate_model" else np.asarray(v, dtype=int)
        elif f == "beta0":
            v = np.asarray(v, dtype=float).reshape(shape)
        elif f != "error_model":
            v = np.asarray([np.nan if x is None else x for x in np.ravel(v)], dtype=float).reshape(np.shape(v))
        kw[f] = v
    return builtin_model(d["name"], **kw)


def data_to_dict(ds: Dataset) -> dict:
    s = ds.schema
    df = ds.to_frame()
    return {"outcome": ds.outcome, "source": ds.source,
            "schema": {"group": s.group, "predictors": list(s.predictors), "response": s.response,
                       "covariates": list(s.covariates), "censoring": s.censoring},
            "csv": df.to_csv(index=False, lineterminator="\n")}


def data_from_dict(d: dict) -> Dataset:
    sc = d["schema"]
    schema = Schema.make(sc["group"], sc["predictors"], sc["response"], sc["covariates"], sc["censoring"])
    df = pd.read_csv(io.StringIO(d["csv"]), dtype={schema.group: str})
    return from_frame(df, schema, d["outcome"], source=d.get("source"))


def fit_to_dict(fit: Fit, likelihood: dict | None = None, criteria: dict | None = None,
                extra: dict | None = None) -> dict:
    rep = {
        "format_version": FORMAT_VERSION,
        "model": model_to_dict(fit.model),
        "data": data_to_dict(fit.data),
        "options": fit.options.to_dict(),
        "seed": fit.options.seed,
        "fixed": fit.fixed,
        "omega": fit.omega,
        "sigma": fit.sigma,
        "estimates": fit.estimates(),
        "iterations": fit.iterations,
        "acceptance": fit.acceptance,
        "messages": list(fit.messages),
    }
    if likelihood is not None:
        rep["likelihood"] = likelihood
    if criteria is not None:
        rep["criteria"] = criteria
    if extra:
        rep.update(extra)
    return _plain(rep)


def dumps(rep: dict) -> str:
    return json.dumps(rep, sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_report(path, fit: Fit, **kw) -> dict:
    rep = fit_to_dict(fit, **kw)
    Path(path).write_text(dumps(rep), encoding="utf-8")
    return rep


def fit_from_dict(rep: dict) -> Fit:
    ver = rep.get("format_version")
    if ver != FORMAT_VERSION:
        raise ReportError(f"unsupported report format version {ver!r}")
    model = model_from_dict(rep["model"])
    data = data_from_dict(rep["data"])
    opts = SaemOptions.from_dict(rep["options"])
    nan = lambda v: np.asarray([np.nan if x is None else x for x in np.ravel(v)], dtype=float).reshape(np.shape(v))
    acc = rep.get("acceptance") or [None] * 3
    return Fit(model, data, opts, nan(rep["fixed"]), nan(rep["omega"]), nan(rep["sigma"]),
               acceptance=nan(acc), iterations=int(rep.get("iterations", 0)),
               messages=tuple(rep.get("messages", ())))


def read_report(path) -> tuple[Fit, dict]:
    try:
        rep = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: not a fit report ({exc.msg})") from None
    return fit_from_dict(rep), rep
