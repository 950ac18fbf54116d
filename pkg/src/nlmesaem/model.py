"""Statistical model definitions: parameter transforms, covariate design,
covariance structure, observation likelihoods and simulation kernels."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .dataset import Dataset

LOG_FLOOR = -745.0
TRANSFORMS = ("identity", "log", "logit")
ERROR_MODELS = ("constant", "proportional", "combined", "exponential")
_TRANSFORM_CODES = {"0": "identity", "1": "log", "3": "logit", "normal": "identity",
                    "lognormal": "log", "none": "identity"}


class ModelError(ValueError):
    pass


class UnsupportedOperation(RuntimeError):
    pass


# --------------------------------------------------------------------------
# transforms and covariate design
# --------------------------------------------------------------------------

def _codes(transforms) -> np.ndarray:
    return np.array([TRANSFORMS.index(t) for t in transforms])


def transform_to_natural(phi, transforms: Sequence[str]) -> np.ndarray:
    """Map parameters from the Gaussian scale (phi) to the model scale (psi)."""
    phi = np.asarray(phi, dtype=float)
    psi = phi.copy()
    codes = _codes(transforms)
    if (codes == 1).any():
        psi[..., codes == 1] = np.exp(phi[..., codes == 1])
    if (codes == 2).any():
        psi[..., codes == 2] = special.expit(phi[..., codes == 2])
    return psi


def transform_to_gaussian(psi, transforms: Sequence[str]) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    phi = psi.copy()
    codes = _codes(transforms)
    if (codes == 1).any():
        phi[..., codes == 1] = np.log(psi[..., codes == 1])
    if (codes == 2).any():
        phi[..., codes == 2] = special.logit(psi[..., codes == 2])
    return phi


def linear_predictor_phi(mu, beta, c_i, design) -> np.ndarray:
    """Population value of phi for one subject: mu + sum over covariates of beta * c.

    ``beta`` and ``design`` are (n_covariates, n_params); only entries where
    ``design`` is 1 contribute.
    """
    mu = np.asarray(mu, dtype=float)
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    design = np.atleast_2d(np.asarray(design))
    c_i = np.atleast_1d(np.asarray(c_i, dtype=float))
    if design.shape != beta.shape or design.shape[1] != len(mu) or design.shape[0] != len(c_i):
        raise ModelError(f"dimension mismatch: mu {mu.shape}, beta {beta.shape}, "
                         f"design {design.shape}, covariates {c_i.shape}")
    return mu + (design * beta * c_i[:, None]).sum(axis=0)


# --------------------------------------------------------------------------
# error models (gaussian outcomes)
# --------------------------------------------------------------------------

def error_model_sd(f_pred, error_kind: str, sigma) -> np.ndarray:
    """Residual standard deviation g for predictions ``f_pred``.

    For the exponential model the returned SD applies to log-transformed
    observations.
    """
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    if np.any(sigma < 0):
        raise ModelError("error model parameters must be non-negative")
    f = np.asarray(f_pred, dtype=float)
    if error_kind in ("constant", "exponential"):
        return np.full_like(f, sigma[0], dtype=float)
    if error_kind == "proportional":
        return sigma[-1] * np.abs(f)
    if error_kind == "combined":
        if len(sigma) < 2:
            raise ModelError("combined error model requires (a, b)")
        return np.sqrt(sigma[0] ** 2 + sigma[1] ** 2 * f ** 2)
    raise ModelError(f"unknown error model {error_kind!r}")


def n_sigma(error_kind: str) -> int:
    return 2 if error_kind == "combined" else 1


# --------------------------------------------------------------------------
# hazard families
# --------------------------------------------------------------------------

HAZARD_FAMILIES = ("exponential", "weibull", "gompertz", "gamma", "loglogistic")


@dataclass(frozen=True)
class HazardFamily:
    """Parametric hazard with scale ``Te`` and shape ``gamma``.

    Parameters may be arrays (broadcast against ``t``).
    """

    family: str
    Te: np.ndarray | float
    gamma: np.ndarray | float = 1.0

    def __post_init__(self):
        if self.family not in HAZARD_FAMILIES:
            raise ModelError(f"unknown hazard family {self.family!r}")

    @property
    def te_prime(self):
        # Gompertz rescaling so that Te is the median when gamma varies
        return self.Te / np.log1p(np.log(2.0) / self.gamma)

    def cumhaz(self, t):
        t = np.asarray(t, dtype=float)
        Te, g = self.Te, self.gamma
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            if self.family == "exponential":
                return t / Te
            if self.family == "weibull":
                return (t / Te) ** g
            if self.family == "gompertz":
                return g * np.expm1(t / self.te_prime)
            if self.family == "gamma":
                return special.gammainc(g, t / Te)
            return np.log1p((t / Te) ** g)

    def hazard(self, t):
        t = np.asarray(t, dtype=float)
        Te, g = self.Te, self.gamma
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            if self.family == "exponential":
                return np.broadcast_to(1.0 / np.asarray(Te, dtype=float), np.broadcast(t, Te).shape).copy()
            if self.family == "weibull":
                return g / Te * (t / Te) ** (g - 1)
            if self.family == "gompertz":
                tp = self.te_prime
                return g / tp * np.exp(t / tp)
            if self.family == "gamma":
                return np.exp((g - 1) * np.log(t) - t / Te - g * np.log(Te) - special.gammaln(g))
            u = (t / Te) ** g
            return g / Te * (t / Te) ** (g - 1) / (1 + u)

    def log_hazard(self, t):
        t = np.asarray(t, dtype=float)
        Te, g = self.Te, self.gamma
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            if self.family == "exponential":
                return -np.log(Te) + np.zeros_like(t)
            if self.family == "weibull":
                return np.log(g) - np.log(Te) + (g - 1) * np.log(t / Te)
            if self.family == "gompertz":
                tp = self.te_prime
                return np.log(g) - np.log(tp) + t / tp
            if self.family == "gamma":
                return (g - 1) * np.log(t) - t / Te - g * np.log(Te) - special.gammaln(g)
            return np.log(g) - np.log(Te) + (g - 1) * np.log(t / Te) - np.log1p((t / Te) ** g)

    def survival(self, t):
        return np.exp(-self.cumhaz(t))

    def inverse_survival(self, p):
        """Time t with S(t) = p; +inf where the survival never drops to p."""
        p = np.asarray(p, dtype=float)
        Te, g = self.Te, self.gamma
        m = -np.log(p)
        with np.errstate(over="ignore", divide="ignore"):
            if self.family == "exponential":
                return Te * m
            if self.family == "weibull":
                return Te * m ** (1.0 / g)
            if self.family == "gompertz":
                return self.te_prime * np.log1p(m / g)
            if self.family == "loglogistic":
                return Te * np.expm1(m) ** (1.0 / g)
        raise UnsupportedOperation("the gamma family has no closed-form inverse survival; "
                                   "use solve_cumhaz() for numeric inversion")

    def solve_cumhaz(self, target, tol: float = 1e-10, max_iter: int = 400):
        """Bisection for H(t) = target. Unreachable targets map to +inf."""
        target = np.asarray(target, dtype=float)
        shape = np.broadcast(target, self.Te, self.gamma).shape
        target = np.broadcast_to(target, shape)
        Te = np.broadcast_to(np.asarray(self.Te, dtype=float), shape)
        fam = replace(self, Te=Te, gamma=np.broadcast_to(np.asarray(self.gamma, dtype=float), shape))
        sup = fam.cumhaz(np.full(shape, np.inf)) if self.family == "gamma" else np.full(shape, np.inf)
        reach = target < sup
        lo = np.zeros(shape)
        hi = np.array(Te, dtype=float)
        for _ in range(200):
            grow = reach & (fam.cumhaz(hi) < target)
            if not grow.any():
                break
            hi = np.where(grow, hi * 2.0, hi)
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            below = fam.cumhaz(mid) < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= tol * np.maximum(1.0, hi)):
                break
        return np.where(reach, 0.5 * (lo + hi), np.inf)


def hazard_eval(family: HazardFamily, t):
    """(h(t), H(t))"""
    return family.hazard(t), family.cumhaz(t)


def inverse_survival(family: HazardFamily, p):
    return family.inverse_survival(p)


# --------------------------------------------------------------------------
# rows passed to likelihood and simulation kernels
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Rows:
    """Predictor rows of one or more stacked copies of a dataset.

    ``x[:, k]`` is the k-th predictor column; ``subject`` maps rows to the
    leading axis of the individual parameter array; ``prev`` is the index of
    the previous row of the same subject (itself for the first row).
    """

    x: np.ndarray
    subject: np.ndarray
    prev: np.ndarray
    first: np.ndarray
    n_subjects: int
    y_max: float = np.nan
    t_max: float = np.inf

    @classmethod
    def from_dataset(cls, ds: Dataset, copies: int = 1) -> "Rows":
        n, m = ds.n_rows, ds.n_subjects
        subj = ds.subject
        first = np.zeros(n, dtype=bool)
        first[ds.offsets[:-1]] = True
        prev = np.arange(n) - 1
        prev[first] = np.flatnonzero(first)
        if copies > 1:
            shift = np.arange(copies)
            subj = (subj[None, :] + m * shift[:, None]).ravel()
            prev = (prev[None, :] + n * shift[:, None]).ravel()
            first = np.tile(first, copies)
        x = np.asarray(ds.x, dtype=float)
        if ds.outcome == "gaussian":
            x = np.column_stack([x, ds.y])
        if copies > 1:
            x = np.tile(x, (copies, 1))
        y_max = float(np.max(ds.y)) if ds.n_rows else np.nan
        t_max = float(np.max(ds.time)) if ds.n_rows else np.inf
        return cls(x, subj, prev, first, m * copies, y_max, t_max)

    def block(self, r0: int, r1: int, s0: int, s1: int) -> "Rows":
        """Rows r0:r1 covering subjects s0:s1, re-indexed from zero."""
        return Rows(self.x[r0:r1], self.subject[r0:r1] - s0, self.prev[r0:r1] - r0,
                    self.first[r0:r1], s1 - s0, self.y_max, self.t_max)


LoglikKernel = Callable[[np.ndarray, Rows], np.ndarray]
SimulationKernel = Callable[[np.ndarray, Rows, np.random.Generator], np.ndarray]
StructuralModel = Callable[[np.ndarray, Rows], np.ndarray]


# --------------------------------------------------------------------------
# model specification
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Full description of a mixed-effects model.

    ``psi0`` is on the natural scale. ``covariate_model`` and ``beta0`` are
    (n_covariates, n_params); ``omega_pattern`` and ``omega_init`` are
    (n_params, n_params). For gaussian outcomes ``structural`` gives the
    predictions, otherwise ``loglik`` gives per-row log-likelihoods.
    """

    name: str
    outcome: str
    param_names: tuple[str, ...]
    psi0: np.ndarray
    transforms: tuple[str, ...]
    omega_pattern: np.ndarray
    covariates: tuple[str, ...] = ()
    covariate_model: np.ndarray | None = None
    beta0: np.ndarray | None = None
    omega_init: np.ndarray | None = None
    error_model: str = "constant"
    sigma0: np.ndarray | None = None
    structural: StructuralModel | None = None
    loglik: LoglikKernel | None = None
    simulate: SimulationKernel | None = None
    predictors: tuple[str, ...] = ()
    description: str = ""
    # residual parameters counted by information criteria for kernel-defined
    # (non-gaussian) models; kept at 1 to match the reference reporting
    nominal_residual_params: int = 1

    def __post_init__(self):
        n = len(self.param_names)
        object.__setattr__(self, "psi0", np.asarray(self.psi0, dtype=float).reshape(n))
        object.__setattr__(self, "param_names", tuple(self.param_names))
        object.__setattr__(self, "transforms", tuple(self.transforms))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        pat = np.asarray(self.omega_pattern, dtype=int).reshape(n, n)
        object.__setattr__(self, "omega_pattern", pat)
        nc = len(self.covariates)
        if self.covariate_model is not None and np.size(self.covariate_model) == 0 and nc:
            object.__setattr__(self, "covariate_model", None)
        if self.beta0 is not None and np.size(self.beta0) == 0 and nc:
            object.__setattr__(self, "beta0", None)
        cm = np.zeros((nc, n), dtype=int) if self.covariate_model is None else \
            np.asarray(self.covariate_model, dtype=int).reshape(nc, n)
        object.__setattr__(self, "covariate_model", cm)
        b0 = np.zeros((nc, n)) if self.beta0 is None else np.asarray(self.beta0, dtype=float).reshape(nc, n)
        object.__setattr__(self, "beta0", b0 * cm)
        om = np.diag(np.where(np.diag(pat) == 1, 1.0, 0.0)) if self.omega_init is None else \
            np.asarray(self.omega_init, dtype=float).reshape(n, n)
        object.__setattr__(self, "omega_init", om)
        if self.sigma0 is None:
            s0 = np.array([1.0, 0.1])[: n_sigma(self.error_model)] if self.error_model == "combined" \
                else np.array([1.0]) if self.error_model != "proportional" else np.array([0.1])
        else:
            s0 = np.atleast_1d(np.asarray(self.sigma0, dtype=float))
        object.__setattr__(self, "sigma0", s0)
        self.validate()

    # -- validation -------------------------------------------------------
    def validate(self) -> None:
        n = self.n_params
        if len(self.transforms) != n:
            raise ModelError("one transform per parameter is required")
        for t in self.transforms:
            if t not in TRANSFORMS:
                raise ModelError(f"unknown transform {t!r}")
        pat = self.omega_pattern
        if not np.array_equal(pat, pat.T):
            raise ModelError("covariance pattern must be symmetric")
        if not np.all(np.isin(pat, (0, 1))):
            raise ModelError("covariance pattern must be binary")
        d = np.diag(pat)
        off = pat - np.diag(d)
        if np.any(off & ~(np.outer(d, d).astype(bool))):
            raise ModelError("a covariance may be estimated only between parameters with variability")
        if d.sum() == 0:
            raise ModelError("at least one parameter must have interindividual variability")
        for j, (t, v) in enumerate(zip(self.transforms, self.psi0)):
            if t == "log" and not v > 0:
                raise ModelError(f"{self.param_names[j]}: log-transformed parameter needs psi0 > 0")
            if t == "logit" and not 0 < v < 1:
                raise ModelError(f"{self.param_names[j]}: logit-transformed parameter needs psi0 in (0, 1)")
        if self.outcome == "gaussian":
            if self.structural is None:
                raise ModelError("gaussian models need a structural function")
            if self.error_model not in ERROR_MODELS:
                raise ModelError(f"unknown error model {self.error_model!r}")
            if len(self.sigma0) != n_sigma(self.error_model) or np.any(self.sigma0 < 0):
                raise ModelError("invalid initial residual error parameters")
        elif self.loglik is None:
            raise ModelError("non-gaussian models need a log-likelihood kernel")

    def check_data(self, ds: Dataset) -> None:
        if ds.outcome != self.outcome and not (self.outcome == "categorical" and ds.outcome == "binary"):
            raise ModelError(f"model outcome {self.outcome!r} does not match data outcome {ds.outcome!r}")
        for c in self.covariates:
            if c not in ds.schema.covariates:
                raise ModelError(f"covariate {c!r} is not in the dataset")
        if self.predictors and len(ds.schema.predictors) < len(self.predictors):
            raise ModelError(f"model {self.name} expects predictors {self.predictors}, "
                             f"data has {ds.schema.predictors}")

    # -- structure --------------------------------------------------------
    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @property
    def has_iiv(self) -> np.ndarray:
        return np.diag(self.omega_pattern) == 1

    @property
    def used_covariates(self) -> tuple[str, ...]:
        return tuple(c for k, c in enumerate(self.covariates) if self.covariate_model[k].any())

    def fixed_layout(self) -> list[tuple[int, int]]:
        """(param index, covariate index or -1) for each fixed effect, in order."""
        out = []
        for j in range(self.n_params):
            out.append((j, -1))
            for k in range(len(self.covariates)):
                if self.covariate_model[k, j]:
                    out.append((j, k))
        return out

    def fixed_names(self) -> list[str]:
        names = []
        for j, k in self.fixed_layout():
            names.append(self.param_names[j] if k < 0 else f"beta_{self.covariates[k]}({self.param_names[j]})")
        return names

    def initial_fixed(self) -> np.ndarray:
        phi0 = transform_to_gaussian(self.psi0, self.transforms)
        return np.array([phi0[j] if k < 0 else self.beta0[k, j] for j, k in self.fixed_layout()])

    def design(self, ds: Dataset) -> np.ndarray:
        """Per-subject design: phi_pop[i] = design[i] @ fixed, shape (N, n_params, n_fixed)."""
        layout = self.fixed_layout()
        D = np.zeros((ds.n_subjects, self.n_params, len(layout)))
        cov = np.column_stack([ds.covariate(c) for c in self.covariates]) if self.covariates \
            else np.zeros((ds.n_subjects, 0))
        for col, (j, k) in enumerate(layout):
            D[:, j, col] = 1.0 if k < 0 else cov[:, k]
        return D

    def with_changes(self, **kw) -> "ModelSpec":
        return replace(self, **kw)

    # -- likelihood -------------------------------------------------------
    def row_loglik(self, psi_rows: np.ndarray, rows: Rows, sigma=None, floor: bool = True) -> np.ndarray:
        """Per-row log-likelihood for individual parameters expanded per row."""
        if self.outcome == "gaussian":
            f = self.structural(psi_rows, rows)
            y = rows.x[:, rows_response_col(rows)]
            sig = self.sigma0 if sigma is None else sigma
            if self.error_model == "exponential":
                with np.errstate(divide="ignore", invalid="ignore"):
                    y, f = np.log(y), np.log(f)
            g = error_model_sd(f, self.error_model, sig)
            with np.errstate(divide="ignore", invalid="ignore"):
                ll = -0.5 * np.log(2 * np.pi) - np.log(g) - 0.5 * ((y - f) / g) ** 2
        else:
            ll = self.loglik(psi_rows, rows)
        ll = np.asarray(ll, dtype=float)
        if not floor:
            return ll
        return np.fmax(ll, LOG_FLOOR)

    def simulate_rows(self, psi_rows: np.ndarray, rows: Rows, rng: np.random.Generator, sigma=None):
        """Simulated responses and (possibly updated) predictor matrix."""
        if self.outcome == "gaussian":
            sig = self.sigma0 if sigma is None else np.asarray(sigma, dtype=float)
            y = gaussian_simulate_factory(self.structural, self.error_model)(psi_rows, rows, rng, sig)
            return y, None
        if self.simulate is None:
            raise UnsupportedOperation(f"model {self.name} has no simulation kernel")
        out = np.asarray(self.simulate(psi_rows, rows, rng), dtype=float)
        if out.ndim == 2:
            resp = 1 if self.outcome == "tte" else 0
            return out[:, resp], out
        return out, None

    def predict(self, psi_rows: np.ndarray, rows: Rows) -> np.ndarray:
        if self.structural is None:
            raise UnsupportedOperation("predictions require a structural model")
        return self.structural(psi_rows, rows)


def simulate_dataset(model: ModelSpec, data: Dataset, phi: np.ndarray, sigma, rng: np.random.Generator,
                     copies: int = 1) -> list[Dataset]:
    """Simulate ``copies`` datasets on the design of ``data``.

    ``phi`` holds individual parameters on the Gaussian scale, shape
    (copies * n_subjects, n_params), copies stacked in order.
    """
    rows = Rows.from_dataset(data, copies)
    psi = transform_to_natural(phi, model.transforms)
    y, x = model.simulate_rows(np.take(psi, rows.subject, axis=0), rows, rng, sigma)
    n = data.n_rows
    out = []
    for c in range(copies):
        xc = None if x is None else x[c * n:(c + 1) * n, : data.x.shape[1]]
        out.append(data.with_response(y[c * n:(c + 1) * n], xc))
    return out


def rows_response_col(rows: Rows) -> int:
    # gaussian rows carry the response as an extra trailing column
    return rows.x.shape[1] - 1


# --------------------------------------------------------------------------
# built-in kernels
# --------------------------------------------------------------------------

def _log_sigmoid(x):
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def binary_logistic_loglik(psi, rows):
    t, y = rows.x[:, 0], rows.x[:, 1]
    return _log_sigmoid((2.0 * y - 1.0) * (psi[:, 0] + psi[:, 1] * t))


def binary_logistic_simulate(psi, rows, rng):
    t = rows.x[:, 0]
    p = special.expit(psi[:, 0] + psi[:, 1] * t)
    return (rng.random(len(t)) < p).astype(float)


def _ordinal_cumprobs(psi, t):
    logit1 = psi[:, 0] + psi[:, 4] * t
    cum = np.cumsum(np.column_stack([logit1, psi[:, 1], psi[:, 2], psi[:, 3]]), axis=1)
    return special.expit(cum)  # P(Y <= k), k = 1..4


def ordinal_po5_loglik(psi, rows):
    t, y = rows.x[:, 0], rows.x[:, 1]
    if np.any(~np.isin(y, (1, 2, 3, 4, 5))):
        raise ModelError("ordinal response must be in {1, ..., 5}")
    cum = _ordinal_cumprobs(psi, t)
    full = np.column_stack([np.zeros(len(t)), cum, np.ones(len(t))])
    k = y.astype(int)
    p = full[np.arange(len(t)), k] - full[np.arange(len(t)), k - 1]
    with np.errstate(divide="ignore"):
        return np.log(p)


def ordinal_po5_simulate(psi, rows, rng):
    cum = _ordinal_cumprobs(psi, rows.x[:, 0])
    u = rng.random(len(cum))
    return 1.0 + (u[:, None] > cum).sum(axis=1)


def _check_counts(y):
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ModelError("count response must be a non-negative integer")


def _poisson_logpmf(n, log_lam):
    return n * log_lam - np.exp(log_lam) - special.gammaln(n + 1)


def poisson_loglik(psi, rows):
    t, y = rows.x[:, 0], rows.x[:, 1]
    _check_counts(y)
    return _poisson_logpmf(y, psi[:, 0] + psi[:, 1] * t)


def zip_loglik(psi, rows):
    t, y = rows.x[:, 0], rows.x[:, 1]
    _check_counts(y)
    log_lam = psi[:, 0] + psi[:, 1] * t
    p0 = psi[:, 2]
    with np.errstate(divide="ignore"):
        pos = np.log1p(-p0) + _poisson_logpmf(y, log_lam)
        zero = np.log(p0 + (1 - p0) * np.exp(-np.exp(log_lam)))
    return np.where(y == 0, zero, pos)


def truncpoisson_loglik(psi, rows):
    t, y = rows.x[:, 0], rows.x[:, 1]
    _check_counts(y)
    if np.any(y < 1):
        raise ModelError("truncated Poisson model is fit on strictly positive counts")
    log_lam = psi[:, 0] + psi[:, 1] * t
    lam = np.exp(log_lam)
    # log(1 - exp(-lam)) computed stably
    return y * log_lam - lam - np.log(-np.expm1(-lam)) - special.gammaln(y + 1)


def _truncate(y, rows):
    if np.isfinite(rows.y_max):
        y = np.where(y > rows.y_max, rows.y_max + 1, y)
    return y


def poisson_simulate(psi, rows, rng):
    lam = np.exp(psi[:, 0] + psi[:, 1] * rows.x[:, 0])
    return _truncate(rng.poisson(lam).astype(float), rows)


def zip_simulate(psi, rows, rng):
    lam = np.exp(psi[:, 0] + psi[:, 1] * rows.x[:, 0])
    zero = rng.random(len(lam)) < psi[:, 2]
    y = rng.poisson(lam).astype(float)
    y[zero] = 0.0
    return _truncate(y, rows)


def truncpoisson_simulate(psi, rows, rng):
    lam = np.exp(psi[:, 0] + psi[:, 1] * rows.x[:, 0])
    # inverse-CDF draw from the zero-truncated Poisson
    u = rng.random(len(lam))
    p0 = np.exp(-lam)
    target = p0 + u * (1 - p0)
    y = np.zeros(len(lam))
    pk = p0.copy()
    cdf = p0.copy()
    k = 0
    active = cdf < target
    while active.any() and k < 100000:
        k += 1
        pk = pk * lam / k
        cdf = cdf + pk
        y[active] = k
        active = active & (cdf < target)
    y = np.maximum(y, 1.0)
    return _truncate(y, rows)


def tte_loglik_factory(family: str) -> LoglikKernel:
    def kernel(psi, rows):
        t, status = rows.x[:, 0], rows.x[:, 1]
        Te = psi[:, 0]
        g = psi[:, 1] if psi.shape[1] > 1 else 1.0
        haz = HazardFamily(family, Te, g)
        H = haz.cumhaz(t)
        anchor = rows.first | (t == 0)
        H = np.where(anchor, 0.0, H)
        dH = H - H[rows.prev]
        event = (status == 1) & ~anchor
        logh = np.where(event, haz.log_hazard(np.where(event, t, 1.0)), 0.0)
        return np.where(anchor, 0.0, -dH + logh)

    kernel.__name__ = f"tte_{family}_loglik"
    return kernel


def tte_simulate_factory(family: str) -> SimulationKernel:
    def kernel(psi, rows, rng):
        t, cens = rows.x[:, 0], rows.x[:, 2]
        n_sub = rows.n_subjects
        # one uniform per subject, broadcast to that subject's rows
        first = np.flatnonzero(rows.first)
        sub_psi = psi[first]
        Te = sub_psi[:, 0]
        g = sub_psi[:, 1] if sub_psi.shape[1] > 1 else np.ones(len(first))
        haz = HazardFamily(family, Te, g)
        v = rng.random(len(first))
        if family == "gamma":
            tsim = haz.solve_cumhaz(-np.log(v))
        else:
            tsim = haz.inverse_survival(v)
        per_sub = np.full(n_sub, np.nan)
        per_sub[rows.subject[first]] = tsim
        tev = per_sub[rows.subject]
        # censored subjects keep their censoring time, others the study horizon
        horizon = np.where(cens == 1, t, rows.t_max)
        last = t > 0
        new_t = np.where(last, np.minimum(tev, horizon), 0.0)
        status = np.where(last & (tev <= horizon), 1.0, 0.0)
        new_cens = np.where(last, 1.0 - status, 0.0)
        return np.column_stack([new_t, status, new_cens, rows.x[:, 3:]])

    kernel.__name__ = f"tte_{family}_simulate"
    return kernel


def linear_structural(psi, rows):
    return psi[:, 0] + psi[:, 1] * rows.x[:, 0]


def one_compartment_structural(psi, rows):
    """Oral one-compartment model; predictors (dose, time), params (ka, V, CL)."""
    dose, t = rows.x[:, 0], rows.x[:, 1]
    ka, V, CL = psi[:, 0], psi[:, 1], psi[:, 2]
    k = CL / V
    return dose * ka / (V * (ka - k)) * (np.exp(-k * t) - np.exp(-ka * t))


def gaussian_simulate_factory(structural: StructuralModel, error_model: str):
    def kernel(psi, rows, rng, sigma):
        f = structural(psi, rows)
        eps = rng.standard_normal(len(f))
        if error_model == "exponential":
            return f * np.exp(sigma[0] * eps)
        return f + error_model_sd(f, error_model, sigma) * eps
    return kernel


# --------------------------------------------------------------------------
# registry
# --------------------------------------------------------------------------

def _tte_builtin(family: str) -> ModelSpec:
    if family == "exponential":
        names, psi0, pat = ("Te",), [300.0], [[1]]
    else:
        names, psi0, pat = ("Te", "gamma"), [300.0, 2.0], [[1, 0], [0, 0]]
    return ModelSpec(f"tte-{family}", "tte", names, psi0, ("log",) * len(names), pat,
                     loglik=tte_loglik_factory(family), simulate=tte_simulate_factory(family),
                     predictors=("time", "status", "cens"),
                     description=f"{family} time-to-event model")


def _builtin_factories() -> dict[str, Callable[[], ModelSpec]]:
    reg = {
        "binary-logistic": lambda: ModelSpec(
            "binary-logistic", "binary", ("theta1", "theta2"), [-0.5, -0.15], ("identity", "identity"),
            [[1, 0], [0, 0]], omega_init=np.diag([0.5, 0.3]), loglik=binary_logistic_loglik,
            simulate=binary_logistic_simulate, predictors=("time", "y"),
            description="logistic model, logit(p) = theta1 + theta2 * t"),
        "ordinal-po5": lambda: ModelSpec(
            "ordinal-po5", "categorical", ("alp1", "alp2", "alp3", "alp4", "beta"),
            [0.0, 0.2, 0.6, 3.0, 0.2], ("identity", "log", "log", "log", "log"),
            np.diag([1, 0, 0, 0, 1]), omega_init=np.diag([100.0, 1, 1, 1, 1]),
            loglik=ordinal_po5_loglik, simulate=ordinal_po5_simulate, predictors=("time", "y"),
            description="proportional odds model for 5 ordered categories"),
        "poisson-lin": lambda: ModelSpec(
            "poisson-lin", "count", ("alpha0", "alpha1"), [1.5, 0.01], ("identity", "identity"),
            [[1, 1], [1, 1]], omega_init=np.diag([0.5, 0.3]), loglik=poisson_loglik,
            simulate=poisson_simulate, predictors=("time", "y"),
            description="Poisson model, log(lambda) = alpha0 + alpha1 * t"),
        "zip-lin": lambda: ModelSpec(
            "zip-lin", "count", ("alpha0", "alpha1", "p0"), [1.5, 0.01, 0.2],
            ("identity", "identity", "logit"), [[1, 1, 0], [1, 1, 0], [0, 0, 0]],
            omega_init=np.diag([0.5, 0.3, 0.0]), loglik=zip_loglik, simulate=zip_simulate,
            predictors=("time", "y"), description="zero-inflated Poisson model"),
        "truncpoisson-lin": lambda: ModelSpec(
            "truncpoisson-lin", "count", ("alpha0", "alpha1"), [1.5, 0.01], ("identity", "identity"),
            [[1, 1], [1, 1]], omega_init=np.diag([0.5, 0.3]), loglik=truncpoisson_loglik,
            simulate=truncpoisson_simulate, predictors=("time", "y"),
            description="zero-truncated Poisson model (positive part of the hurdle model)"),
        "gaussian-linear": lambda: ModelSpec(
            "gaussian-linear", "gaussian", ("intercept", "slope"), [1.0, 1.0], ("identity", "identity"),
            [[1, 0], [0, 1]], structural=linear_structural, predictors=("time",),
            description="linear model y = psi1 + psi2 * t"),
        "gaussian-1cpt": lambda: ModelSpec(
            "gaussian-1cpt", "gaussian", ("ka", "V", "CL"), [1.0, 20.0, 2.0], ("log", "log", "log"),
            np.eye(3, dtype=int), structural=one_compartment_structural, predictors=("dose", "time"),
            error_model="combined", sigma0=[0.5, 0.1],
            description="one-compartment model with first-order absorption"),
    }
    for fam in HAZARD_FAMILIES:
        reg[f"tte-{fam}"] = (lambda f=fam: _tte_builtin(f))
    return reg


BUILTINS = _builtin_factories()


def builtin_model(name: str, **overrides) -> ModelSpec:
    try:
        spec = BUILTINS[name]()
    except KeyError:
        raise ModelError(f"unknown model {name!r}; registered: {', '.join(sorted(BUILTINS))}") from None
    return spec.with_changes(**overrides) if overrides else spec


def builtin_loglik(model_name: str, psi_i, rows: Rows) -> np.ndarray:
    """Per-row log-likelihood of a registered model for one subject's rows."""
    spec = builtin_model(model_name)
    psi = np.broadcast_to(np.atleast_2d(np.asarray(psi_i, dtype=float)), (len(rows.x), spec.n_params))
    return spec.row_loglik(np.ascontiguousarray(psi), rows)


def subject_rows(x, t_max: float = np.inf) -> Rows:
    """Rows for a single subject given its predictor matrix."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = len(x)
    first = np.zeros(n, dtype=bool)
    first[0] = True
    prev = np.maximum(np.arange(n) - 1, 0)
    return Rows(x, np.zeros(n, dtype=int), prev, first, 1, t_max=t_max)


# --------------------------------------------------------------------------
# configuration files
# --------------------------------------------------------------------------

def _vector(text: str, cast=float) -> list:
    return [cast(v) for v in text.replace(",", " ").split()]


def _matrix(text: str) -> np.ndarray:
    rows = [r for r in text.strip().splitlines() if r.strip()]
    return np.array([_vector(r) for r in rows], dtype=float)


@dataclass
class ModelConfig:
    """Parsed model configuration: data schema, model overrides and options."""

    model: str | None = None
    data: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)


def read_config(path: str | Path) -> ModelConfig:
    """Parse an INI-style model file.

    Sections: ``[data]`` (group, predictors, response, covariates, censoring,
    outcome), ``[model]`` (name, psi0, transforms, covariates,
    covariate_model, beta0, omega_pattern, omega_init, error_model, sigma0)
    and ``[options]`` (SAEM settings). Matrices are written one row per line.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    if not cp.read(path):
        raise FileNotFoundError(path)
    return parse_config(cp)


def parse_config_text(text: str) -> ModelConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string(text)
    return parse_config(cp)


def parse_config(cp: configparser.ConfigParser) -> ModelConfig:
    cfg = ModelConfig()
    if cp.has_section("data"):
        d = dict(cp["data"])
        for key in ("predictors", "covariates"):
            if key in d:
                d[key] = d[key].replace(",", " ").split()
        cfg.data = d
    if cp.has_section("model"):
        m = dict(cp["model"])
        cfg.model = m.pop("name", None)
        ov = {}
        if "psi0" in m:
            ov["psi0"] = np.array(_vector(m.pop("psi0")))
        if "transforms" in m:
            ov["transforms"] = tuple(_TRANSFORM_CODES.get(t, t) for t in m.pop("transforms").replace(",", " ").split())
        if "covariates" in m:
            ov["covariates"] = tuple(m.pop("covariates").replace(",", " ").split())
        for key in ("covariate_model", "beta0", "omega_pattern", "omega_init"):
            if key in m:
                ov[key] = _matrix(m.pop(key))
        if "error_model" in m:
            ov["error_model"] = m.pop("error_model").strip()
        if "sigma0" in m:
            ov["sigma0"] = np.array(_vector(m.pop("sigma0")))
        if m:
            raise ModelError(f"unknown model keys: {', '.join(m)}")
        cfg.overrides = ov
    if cp.has_section("options"):
        cfg.options = dict(cp["options"])
    return cfg


def model_from_config(cfg: ModelConfig, name: str | None = None) -> ModelSpec:
    name = name or cfg.model
    if name is None:
        raise ModelError("no model name given")
    ov = dict(cfg.overrides)
    base = builtin_model(name)
    if "covariates" in ov and "covariate_model" in ov:
        ov["covariate_model"] = np.asarray(ov["covariate_model"]).reshape(len(ov["covariates"]), base.n_params)
    if "covariates" in ov and "covariate_model" not in ov:
        ov["covariate_model"] = np.zeros((len(ov["covariates"]), base.n_params), dtype=int)
        ov["beta0"] = None
    return base.with_changes(**ov)
