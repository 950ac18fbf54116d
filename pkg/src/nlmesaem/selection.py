"""Information criteria and stepwise building of the covariate model and
the variability structure."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .likelihood import LikelihoodEstimate, ll_importance_sampling
from .model import ModelSpec
from .saem import Fit, omega_entries, run_saem


@dataclass(frozen=True)
class CriterionReport:
    name: str
    ll: float
    method: str
    n_random: int
    n_fixed: int
    n_subjects: int
    n_obs: int
    aic: float
    bic: float
    bicc: float

    @property
    def n_params(self) -> int:
        return self.n_random + self.n_fixed

    def to_dict(self) -> dict:
        return {"name": self.name, "ll": self.ll, "method": self.method, "n_params": self.n_params,
                "n_random": self.n_random, "n_fixed": self.n_fixed, "aic": self.aic,
                "bic": self.bic, "bicc": self.bicc}


def parameter_counts(model: ModelSpec) -> tuple[int, int]:
    """(subject-level, observation-level) parameter counts.

    Subject-level: fixed effects (intercepts and covariate effects) of
    parameters with variability, plus covariance entries. Observation-level:
    fixed effects of parameters without variability and residual parameters.
    """
    iiv = model.has_iiv
    p_r = p_f = 0
    for j, _ in model.fixed_layout():
        if iiv[j]:
            p_r += 1
        else:
            p_f += 1
    p_r += len(omega_entries(model))
    if model.outcome == "gaussian":
        p_f += 2 if model.error_model == "combined" else 1
    else:
        p_f += model.nominal_residual_params
    return p_r, p_f


def criteria_from_ll(ll: float, p_r: int, p_f: int, n_subjects: int, n_obs: int) -> dict:
    p = p_r + p_f
    return {"aic": -2 * ll + 2 * p, "bic": -2 * ll + p * np.log(n_subjects),
            "bicc": -2 * ll + p_r * np.log(n_subjects) + p_f * np.log(n_obs)}


def compute_criteria(fit: Fit, ll: LikelihoodEstimate, name: str | None = None) -> CriterionReport:
    p_r, p_f = parameter_counts(fit.model)
    N, n = fit.data.n_subjects, fit.data.n_rows
    c = criteria_from_ll(ll.ll, p_r, p_f, N, n)
    return CriterionReport(name or fit.model.name, float(ll.ll), ll.method, p_r, p_f, N, n,
                           float(c["aic"]), float(c["bic"]), float(c["bicc"]))


def criteria_table(reports) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in reports])


# --------------------------------------------------------------------------
# stepwise selection
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Move:
    kind: str  # "add-cov", "remove-cov", "add-iiv", "remove-iiv"
    param: str
    covariate: str = ""

    @property
    def key(self) -> tuple:
        return (self.param, self.covariate, self.kind)

    def __str__(self) -> str:
        if self.kind.endswith("cov"):
            return f"{self.kind} {self.covariate} on {self.param}"
        return f"{self.kind} {self.param}"


def with_candidates(model: ModelSpec, covariates) -> ModelSpec:
    """Model extended with candidate covariates (no relations added)."""
    extra = [c for c in covariates if c not in model.covariates]
    if not extra:
        return model
    n = model.n_params
    cm = np.vstack([model.covariate_model, np.zeros((len(extra), n), dtype=int)])
    b0 = np.vstack([model.beta0, np.zeros((len(extra), n))])
    return model.with_changes(covariates=model.covariates + tuple(extra), covariate_model=cm, beta0=b0)


def apply_move(model: ModelSpec, move: Move) -> ModelSpec:
    j = model.param_names.index(move.param)
    if move.kind in ("add-cov", "remove-cov"):
        k = model.covariates.index(move.covariate)
        cm = model.covariate_model.copy()
        cm[k, j] = 1 if move.kind == "add-cov" else 0
        b0 = model.beta0.copy()
        b0[k, j] = 0.0
        return model.with_changes(covariate_model=cm, beta0=b0)
    pat = model.omega_pattern.copy()
    om = model.omega_init.copy()
    if move.kind == "add-iiv":
        pat[j, j] = 1
        if not om[j, j] > 0:
            om[j, j] = 1.0
    else:
        pat[j, :] = 0
        pat[:, j] = 0
    return model.with_changes(omega_pattern=pat, omega_init=om)


def candidate_moves(model: ModelSpec, covariates, direction: str = "both", iiv_moves: bool = True) -> list[Move]:
    if direction not in ("forward", "backward", "both"):
        raise ValueError("direction must be forward, backward or both")
    fwd = direction in ("forward", "both")
    bwd = direction in ("backward", "both")
    moves = []
    for j, p in enumerate(model.param_names):
        for c in covariates:
            k = model.covariates.index(c)
            present = bool(model.covariate_model[k, j])
            if present and bwd:
                moves.append(Move("remove-cov", p, c))
            elif not present and fwd:
                moves.append(Move("add-cov", p, c))
        if iiv_moves:
            has = bool(model.omega_pattern[j, j])
            if has and bwd and model.has_iiv.sum() > 1:
                moves.append(Move("remove-iiv", p))
            elif not has and fwd:
                moves.append(Move("add-iiv", p))
    return sorted(moves, key=lambda m: m.key)


@dataclass
class StepwiseResult:
    model: ModelSpec
    fit: Fit
    criterion: float
    log: list[dict] = field(default_factory=list)

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.log, columns=["step", "move", "bicc_before", "bicc_after", "accepted"])


def _score(model: ModelSpec, data, opts, M, ll_seed) -> tuple[Fit, float]:
    fit = run_saem(model, data, opts)
    ll = ll_importance_sampling(fit, M=M, seed=ll_seed)
    return fit, compute_criteria(fit, ll).bicc


def stepwise_select(base_fit: Fit, candidate_covariates, direction: str = "both", M: int = 10000,
                    ll_seed: int | None = None, iiv_moves: bool = True, max_steps: int = 50,
                    threads: int = 1) -> StepwiseResult:
    """Greedy search over single moves scored by BICc.

    Each step refits every candidate model with the base fit's options,
    scores it with an importance-sampling likelihood sharing one seed, and
    accepts the best strictly improving move. Ties are broken by the
    lexicographic order of (parameter, covariate, move kind).
    """
    data, opts = base_fit.data, base_fit.options
    ll_seed = opts.seed if ll_seed is None else ll_seed
    covs = list(candidate_covariates)
    missing = [c for c in covs if c not in data.schema.covariates]
    if missing:
        raise ValueError(f"candidate covariates not in the dataset: {', '.join(missing)}")
    model = with_candidates(base_fit.model, covs)
    # one analysis set for every candidate so criteria stay comparable
    data = data.complete_for(tuple(dict.fromkeys(covs + list(base_fit.model.used_covariates))))
    if model is base_fit.model and data.n_subjects == base_fit.data.n_subjects:
        fit = base_fit
        crit = compute_criteria(fit, ll_importance_sampling(fit, M=M, seed=ll_seed)).bicc
    else:
        fit, crit = _score(model, data, opts, M, ll_seed)
    log: list[dict] = []
    for step in range(1, max_steps + 1):
        moves = candidate_moves(model, covs, direction, iiv_moves)
        if not moves:
            break

        def evaluate(mv):
            try:
                cand = apply_move(model, mv)
                return mv, cand, *_score(cand, data, opts, M, ll_seed)
            except Exception as exc:  # candidate skipped and logged
                warnings.warn(f"candidate {mv} failed: {exc}", RuntimeWarning, stacklevel=2)
                return mv, None, None, np.nan

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(evaluate, moves))
        else:
            results = [evaluate(mv) for mv in moves]
        best = None
        for mv, cand, cfit, score in results:
            log.append({"step": step, "move": str(mv), "bicc_before": crit, "bicc_after": score,
                        "accepted": False})
            if cand is None or not np.isfinite(score):
                continue
            if best is None or score < best[3]:
                best = (mv, cand, cfit, score)
        if best is None or not best[3] < crit:
            break
        for row in log:
            if row["step"] == step and row["move"] == str(best[0]):
                row["accepted"] = True
        model, fit, crit = best[1], best[2], best[3]
    return StepwiseResult(model, fit, crit, log)
