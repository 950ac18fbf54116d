"""Stochastic approximation EM (SAEM) estimation engine."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import optimize

from .dataset import Dataset
from .model import ModelError, ModelSpec, Rows, error_model_sd, transform_to_natural
from .rng import derive_rng

RW_BOUNDS = (1e-3, 1e3)
PSD_FLOOR = 1e-10


class InitializationError(RuntimeError):
    pass


@dataclass
class SaemOptions:
    """Iteration schedule and sampler settings."""

    k1: int = 300
    k2: int = 100
    n_chains: int = 1
    n_burn: int = 5
    kernel_iters: tuple[int, int, int] = (2, 2, 2)
    tau: float = 0.97
    anneal_iters: int | None = None
    seed: int = 123456
    target_accept: float = 0.4
    rw_init: float = 0.5
    threads: int = 1

    def __post_init__(self):
        self.kernel_iters = tuple(int(v) for v in self.kernel_iters)
        if self.k1 < 0 or self.k2 < 0:
            raise ValueError("k1 and k2 must be non-negative")
        if self.n_chains < 1:
            raise ValueError("n_chains must be at least 1")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if len(self.kernel_iters) != 3 or min(self.kernel_iters) < 0:
            raise ValueError("kernel_iters needs three non-negative counts")

    @property
    def anneal_length(self) -> int:
        return self.k1 // 2 if self.anneal_iters is None else int(self.anneal_iters)

    def step_size(self, k: int) -> float:
        """Stochastic approximation step for iteration k (1-based)."""
        return 1.0 if k <= self.k1 else 1.0 / (k - self.k1 + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_iters"] = list(self.kernel_iters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SaemOptions":
        names = {f.name: f for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in names:
                raise ValueError(f"unknown option {k!r}")
            if k == "kernel_iters" and isinstance(v, str):
                v = [int(x) for x in v.replace(",", " ").split()]
            elif k in ("tau", "target_accept", "rw_init"):
                v = float(v)
            elif k == "anneal_iters":
                v = None if v in (None, "", "none") else int(v)
            elif k != "kernel_iters":
                v = int(v)
            kw[k] = v
        return cls(**kw)


# --------------------------------------------------------------------------
# covariance helpers
# --------------------------------------------------------------------------

def repair_psd(m: np.ndarray, floor: float = PSD_FLOOR) -> tuple[np.ndarray, bool]:
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    if w.min() >= floor:
        return m, False
    w = np.maximum(w, floor)
    return (v * w) @ v.T, True


def _sqrt_and_inverse(om: np.ndarray):
    try:
        c = np.linalg.cholesky(om)
        inv = np.linalg.inv(om)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(0.5 * (om + om.T))
        w = np.maximum(w, PSD_FLOOR)
        c = v * np.sqrt(w)
        inv = (v / w) @ v.T
    return c, inv


# --------------------------------------------------------------------------
# Metropolis-Hastings sampler for individual parameters
# --------------------------------------------------------------------------

class Sampler:
    """MH-within-Gibbs sampler over ``n_copies`` stacked copies of a dataset.

    Each copy has its own random stream, so results do not depend on how
    copies are distributed over worker threads.
    """

    def __init__(self, model: ModelSpec, data: Dataset, n_copies: int, seed: int,
                 purpose: str = "chain", threads: int = 1, rw_init: float = 0.5):
        self.model, self.data = model, data
        self.N, self.L, self.nr = data.n_subjects, n_copies, data.n_rows
        self.rows = Rows.from_dataset(data, n_copies)
        self.iiv = np.flatnonzero(model.has_iiv)
        self.noiiv = np.flatnonzero(~model.has_iiv)
        self.d = len(self.iiv)
        self.design = model.design(data)
        self.rngs = [derive_rng(seed, purpose, c) for c in range(n_copies)]
        self.scale2 = np.full(self.d, rw_init)
        self.scale3 = np.full(self.d, rw_init)
        self.sigma = np.asarray(model.sigma0, dtype=float)
        self.phi = None
        self._pool = None
        if threads > 1 and n_copies > 1:
            self._blocks = [self.rows.block(c * self.nr, (c + 1) * self.nr, c * self.N, (c + 1) * self.N)
                            for c in range(n_copies)]
            self._pool = ThreadPoolExecutor(min(threads, n_copies))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # -- likelihood pieces --------------------------------------------------
    def population(self, fixed) -> np.ndarray:
        return np.einsum("ijk,k->ij", self.design, fixed)

    def _ll_rows(self, psi, rows, floor=True):
        r = self.model.row_loglik(np.take(psi, rows.subject, axis=0), rows, self.sigma, floor=floor)
        return np.bincount(rows.subject, r, minlength=rows.n_subjects)

    def subject_ll(self, phi, floor: bool = True) -> np.ndarray:
        psi = transform_to_natural(phi, self.model.transforms)
        if self._pool is None:
            return self._ll_rows(psi, self.rows, floor)
        N = self.N
        parts = self._pool.map(lambda c: self._ll_rows(psi[c * N:(c + 1) * N], self._blocks[c], floor),
                               range(self.L))
        return np.concatenate(list(parts))

    def prior(self, phi) -> np.ndarray:
        eta = phi[:, self.iiv] - self.phi_pop[:, self.iiv]
        return 0.5 * np.einsum("ij,jk,ik->i", eta, self.omega_inv, eta)

    def set_theta(self, fixed, omega, sigma=None, phi=None):
        self.fixed = np.asarray(fixed, dtype=float)
        if sigma is not None:
            self.sigma = np.asarray(sigma, dtype=float)
        self.phi_pop = np.tile(self.population(self.fixed), (self.L, 1))
        self.omega_iiv = np.asarray(omega)[np.ix_(self.iiv, self.iiv)]
        self.chol, self.omega_inv = _sqrt_and_inverse(self.omega_iiv)
        if phi is not None:
            self.phi = np.array(phi, dtype=float)
        elif self.phi is None:
            self.phi = self.phi_pop.copy()
        self.phi[:, self.noiiv] = self.phi_pop[:, self.noiiv]
        self.ll = self.subject_ll(self.phi)
        self.pr = self.prior(self.phi)

    # -- random numbers -------------------------------------------------------
    def normal(self, k: int) -> np.ndarray:
        return np.concatenate([g.standard_normal((self.N, k)) for g in self.rngs])

    def log_uniform(self) -> np.ndarray:
        return np.log(np.concatenate([g.random(self.N) for g in self.rngs]))

    def _subsets(self) -> np.ndarray:
        d = self.d
        masks = []
        for g in self.rngs:
            size = g.integers(1, d + 1, self.N)
            rank = np.argsort(np.argsort(g.random((self.N, d)), axis=1), axis=1)
            masks.append(rank < size[:, None])
        return np.concatenate(masks)

    # -- kernels --------------------------------------------------------------
    def _try(self, prop, with_prior: bool) -> np.ndarray:
        ll = self.subject_ll(prop)
        if with_prior:
            pr = self.prior(prop)
            logr = ll - self.ll - (pr - self.pr)
        else:
            logr = ll - self.ll
        ok = self.log_uniform() < logr
        self.phi[ok] = prop[ok]
        self.ll[ok] = ll[ok]
        if with_prior:
            self.pr[ok] = pr[ok]
        else:
            self.pr = self.prior(self.phi)
        return ok

    def sweep(self, kernel_iters=(2, 2, 2), adapt: bool = False, target: float = 0.4) -> np.ndarray:
        """One simulation step; returns acceptance rates of the three kernels."""
        rates = np.full(3, np.nan)
        if self.d == 0:
            return rates
        n1, n2, n3 = kernel_iters
        sd = np.sqrt(np.maximum(np.diag(self.omega_iiv), PSD_FLOOR))
        if n1:
            acc = 0.0
            for _ in range(n1):
                prop = self.phi.copy()
                prop[:, self.iiv] = self.phi_pop[:, self.iiv] + self.normal(self.d) @ self.chol.T
                acc += self._try(prop, with_prior=False).mean()
            rates[0] = acc / n1
        if n2:
            acc = np.zeros(self.d)
            for _ in range(n2):
                for jj, j in enumerate(self.iiv):
                    prop = self.phi.copy()
                    prop[:, j] += self.scale2[jj] * sd[jj] * self.normal(1)[:, 0]
                    acc[jj] += self._try(prop, with_prior=True).mean()
            acc /= n2
            rates[1] = acc.mean()
            if adapt:
                self.scale2 = np.clip(self.scale2 * np.where(acc > target, 1.1, 0.9), *RW_BOUNDS)
        if n3:
            acc = 0.0
            for _ in range(n3):
                mask = self._subsets()
                step = self.normal(self.d) * (self.scale3 * sd) * mask
                prop = self.phi.copy()
                prop[:, self.iiv] += step
                acc += self._try(prop, with_prior=True).mean()
            rates[2] = acc / n3
            if adapt:
                self.scale3 = np.clip(self.scale3 * (1.1 if rates[2] > target else 0.9), *RW_BOUNDS)
        return rates


# --------------------------------------------------------------------------
# fitted model
# --------------------------------------------------------------------------

def sigma_names(model: ModelSpec) -> list[str]:
    if model.outcome != "gaussian":
        return []
    return {"constant": ["sigma_a"], "exponential": ["sigma_a"], "proportional": ["sigma_b"],
            "combined": ["sigma_a", "sigma_b"]}[model.error_model]


def omega_entries(model: ModelSpec) -> list[tuple[int, int]]:
    pat = model.omega_pattern
    return [(i, j) for i in range(model.n_params) for j in range(i, model.n_params) if pat[i, j]]


def natural_estimates(model: ModelSpec, fixed, omega, sigma) -> dict[str, float]:
    """Estimates on the reporting scale: transformed intercepts, raw
    coefficients, random-effect SDs and covariances, residual parameters."""
    out = {}
    for name, (j, k), v in zip(model.fixed_names(), model.fixed_layout(), fixed):
        if k < 0:
            v = float(transform_to_natural(np.array([v]), (model.transforms[j],))[0])
        out[name] = float(v)
    for i, j in omega_entries(model):
        if i == j:
            out[f"omega_{model.param_names[i]}"] = float(np.sqrt(max(omega[i, i], 0.0)))
        else:
            out[f"cov_{model.param_names[i]}_{model.param_names[j]}"] = float(omega[i, j])
    for name, v in zip(sigma_names(model), np.atleast_1d(sigma)):
        out[name] = float(v)
    return out


@dataclass(frozen=True, eq=False)
class Fit:
    """Result of an SAEM run.

    ``fixed`` follows ``model.fixed_layout()`` on the Gaussian scale;
    ``omega`` is the full (n_params x n_params) covariance.
    """

    model: ModelSpec
    data: Dataset
    options: SaemOptions
    fixed: np.ndarray
    omega: np.ndarray
    sigma: np.ndarray
    trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    trace_names: tuple[str, ...] = ()
    gammas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    phi_chains: np.ndarray | None = None
    acceptance: np.ndarray = field(default_factory=lambda: np.full(3, np.nan))
    iterations: int = 0
    messages: tuple[str, ...] = ()

    def population_phi(self, data: Dataset | None = None) -> np.ndarray:
        return np.einsum("ijk,k->ij", self.model.design(data or self.data), self.fixed)

    def estimates(self) -> dict[str, float]:
        return natural_estimates(self.model, self.fixed, self.omega, self.sigma)

    @property
    def iiv(self) -> np.ndarray:
        return np.flatnonzero(self.model.has_iiv)

    def with_data(self, data: Dataset) -> "Fit":
        return replace(self, data=data, phi_chains=None)

    def trace_frame(self):
        import pandas as pd

        df = pd.DataFrame(self.trace, columns=list(self.trace_names))
        df.insert(0, "step_size", self.gammas)
        df.insert(0, "iteration", np.arange(len(df)))
        return df


def initial_omega(model: ModelSpec) -> np.ndarray:
    pat = model.omega_pattern
    om = np.where(pat == 1, model.omega_init, 0.0)
    d = np.diag(om).copy()
    d[(np.diag(pat) == 1) & ~(d > 0)] = 1.0
    np.fill_diagonal(om, d)
    om, _ = repair_psd(om)
    return np.where(pat == 1, om, 0.0)


def initial_fit(model: ModelSpec, data: Dataset, opts: SaemOptions | None = None) -> Fit:
    """A Fit holding the starting values (no iterations)."""
    opts = opts or SaemOptions()
    sigma = np.asarray(model.sigma0, dtype=float) if model.outcome == "gaussian" else np.zeros(0)
    return Fit(model, data, opts, model.initial_fixed(), initial_omega(model), sigma)


def fit_from_estimates(model: ModelSpec, data: Dataset, opts: SaemOptions, fixed, omega, sigma) -> Fit:
    return Fit(model, data, opts, np.asarray(fixed, dtype=float), np.asarray(omega, dtype=float),
               np.asarray(sigma, dtype=float))


# --------------------------------------------------------------------------
# engine
# --------------------------------------------------------------------------

def _check_design(model: ModelSpec, D: np.ndarray, cols) -> None:
    if not len(cols):
        return
    X = D[:, :, cols].reshape(-1, len(cols))
    s = np.linalg.svd(X, compute_uv=False)
    if s.min() <= 1e-10 * max(s.max(), 1.0):
        layout = model.fixed_layout()
        covs = sorted({model.covariates[layout[c][1]] for c in cols if layout[c][1] >= 0})
        raise ModelError(f"singular covariate design (collinear or constant covariates: {', '.join(covs)})")


def _fd_hessian(f, b, h, f0, fp, fm):
    p = len(b)
    H = np.diag((fp - 2 * f0 + fm) / h ** 2)
    for i in range(p):
        for j in range(i + 1, p):
            ei = np.zeros(p)
            ei[i] = h[i]
            ej = np.zeros(p)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(b + ei + ej) - f(b + ei) - f(b + ej) + f0) / (h[i] * h[j])
    return H


def _newton_step(f, b, H=None, h_rel=1e-4):
    """One damped Newton ascent step; returns (new point, Hessian used).

    A Hessian from a previous call may be passed to save evaluations.
    """
    p = len(b)
    h = h_rel * np.maximum(1.0, np.abs(b))
    f0 = f(b)
    fp = np.empty(p)
    fm = np.empty(p)
    for i in range(p):
        e = np.zeros(p)
        e[i] = h[i]
        fp[i], fm[i] = f(b + e), f(b - e)
    g = (fp - fm) / (2 * h)
    if H is None:
        H = _fd_hessian(f, b, h, f0, fp, fm)
    ok = np.all(np.isfinite(H))
    if ok:
        try:
            ok = bool(np.all(np.linalg.eigvalsh(H) < 0))
        except np.linalg.LinAlgError:
            ok = False
    if ok:
        step = -np.linalg.solve(H, g)
    else:
        H = None
        step = g / max(np.abs(np.diag(np.nan_to_num(_fd_hessian(f, b, h, f0, fp, fm)))).max(), 1.0)
    for _ in range(30):
        if f(b + step) >= f0:
            return b + step, H
        step = step / 2
        H = None
    return b, None


class SaemEngine:
    def __init__(self, model: ModelSpec, data: Dataset, opts: SaemOptions, start: Fit | None = None):
        model.check_data(data)
        self.model, self.data, self.opts = model, data, opts
        layout = model.fixed_layout()
        iiv = model.has_iiv
        self.fix_iiv = np.array([c for c, (j, _) in enumerate(layout) if iiv[j]], dtype=int)
        self.fix_no = np.array([c for c, (j, _) in enumerate(layout) if not iiv[j]], dtype=int)
        self.iiv = np.flatnonzero(iiv)
        start = start or initial_fit(model, data, opts)
        self.fixed = np.array(start.fixed, dtype=float)
        self.omega = np.array(start.omega, dtype=float)
        self.sigma = np.array(start.sigma, dtype=float)
        self.sampler = Sampler(model, data, opts.n_chains, opts.seed, "chain", opts.threads, opts.rw_init)
        D = self.sampler.design
        _check_design(model, D, self.fix_iiv)
        _check_design(model, D, self.fix_no)
        self.D_iiv = D[:, self.iiv][:, :, self.fix_iiv]
        self.messages: list[str] = []
        self._hess, self._hess_age = None, 0

    def _check_initial(self):
        s = self.sampler
        ll = s._ll_rows(transform_to_natural(s.phi_pop[: s.N], self.model.transforms),
                        Rows.from_dataset(self.data), floor=False)
        bad = ~np.isfinite(ll)
        if bad.mean() > 0.5:
            raise InitializationError(f"non-finite likelihood at the initial parameters for "
                                      f"{bad.sum()} of {len(ll)} subjects; check psi0")

    def _gls(self, s1, omega):
        if not len(self.fix_iiv):
            return np.zeros(0)
        W = _sqrt_and_inverse(omega[np.ix_(self.iiv, self.iiv)])[1]
        Dm = self.D_iiv
        A = np.einsum("iap,ab,ibq->pq", Dm, W, Dm)
        rhs = np.einsum("iap,ab,ib->p", Dm, W, s1[:, self.iiv])
        return np.linalg.solve(A, rhs)

    def _omega_update(self, s1, s2, fixed, N):
        m = np.einsum("ijk,k->ij", self.sampler.design, fixed)
        om = (s2 - s1.T @ m - m.T @ s1 + m.T @ m) / N
        pat = self.model.omega_pattern
        om = np.where(pat == 1, om, 0.0)
        ix = np.ix_(self.iiv, self.iiv)
        block, repaired = repair_psd(om[ix])
        om[ix] = block
        if repaired:
            self.messages.append("covariance update was not positive semi-definite; eigenvalues clipped")
        return np.where(pat == 1, om, 0.0)

    def _residual_stat(self):
        s = self.sampler
        psi = transform_to_natural(s.phi, self.model.transforms)
        rows = s.rows
        f = self.model.structural(psi[rows.subject], rows)
        y = rows.x[:, -1]
        kind = self.model.error_model
        if kind == "exponential":
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.sum((np.log(y) - np.log(f)) ** 2) / s.L, f, y
        if kind == "proportional":
            return np.sum(((y - f) / f) ** 2) / s.L, f, y
        return np.sum((y - f) ** 2) / s.L, f, y

    def _combined_sigma(self, f, y, start):
        L = self.sampler.L

        def nll(logab):
            g = error_model_sd(f, "combined", np.exp(logab))
            return (np.sum(np.log(g)) + 0.5 * np.sum(((y - f) / g) ** 2)) / L

        x0 = np.log(np.maximum(start, 1e-6))
        r = optimize.minimize(nll, x0, method="Nelder-Mead", options={"xatol": 1e-6, "fatol": 1e-8})
        return np.exp(r.x)

    def _noiiv_update(self):
        s = self.sampler
        fixed = self.fixed.copy()
        cols = self.noiiv_cols = s.noiiv
        base_phi = s.phi.copy()

        def f(b):
            fx = fixed.copy()
            fx[self.fix_no] = b
            pop = np.einsum("ijk,k->ij", s.design[:, cols], fx)
            phi = base_phi
            phi[:, cols] = np.tile(pop, (s.L, 1))
            return s.subject_ll(phi).sum() / s.L

        H = self._hess if self._hess_age < 10 else None
        b, self._hess = _newton_step(f, fixed[self.fix_no], H)
        self._hess_age = 0 if H is None else self._hess_age + 1
        return b

    def _theta_vector(self):
        return np.array(list(natural_estimates(self.model, self.fixed, self.omega, self.sigma).values()))

    def run(self) -> Fit:
        opts, s, model = self.opts, self.sampler, self.model
        N, ntot = self.data.n_subjects, self.data.n_rows
        gaussian = model.outcome == "gaussian"
        try:
            s.set_theta(self.fixed, self.omega, self.sigma if gaussian else None)
            self._check_initial()
            for _ in range(opts.n_burn):
                s.sweep(opts.kernel_iters, adapt=True, target=opts.target_accept)
            names = tuple(natural_estimates(model, self.fixed, self.omega, self.sigma))
            K = opts.k1 + opts.k2
            trace = np.empty((K + 1, len(names)))
            trace[0] = self._theta_vector()
            gammas = np.zeros(K + 1)
            acc_sum, acc_n = np.zeros(3), 0
            nps = model.n_params
            s1 = np.zeros((N, nps))
            s2 = np.zeros((nps, nps))
            s3 = 0.0
            for k in range(1, K + 1):
                gamma = opts.step_size(k)
                gammas[k] = gamma
                rates = s.sweep(opts.kernel_iters, adapt=k <= opts.k1, target=opts.target_accept)
                acc_sum += np.nan_to_num(rates)
                acc_n += 1
                phi = s.phi.reshape(s.L, N, nps)
                s1 += gamma * (phi.mean(axis=0) - s1)
                s2 += gamma * (s.phi.T @ s.phi / s.L - s2)
                if gaussian:
                    stat3, f, y = self._residual_stat()
                    s3 += gamma * (stat3 - s3)
                annealing = k <= opts.anneal_length
                # fixed effects of parameters with variability
                new_fixed = self.fixed.copy()
                new_fixed[self.fix_iiv] = self._gls(s1, self.omega)
                omega = self._omega_update(s1, s2, new_fixed, N)
                if annealing:
                    d_old = np.diag(self.omega)
                    d_new = np.maximum(np.diag(omega), opts.tau * d_old)
                    d_new = np.where(np.diag(model.omega_pattern) == 1, d_new, 0.0)
                    omega = omega.copy()
                    np.fill_diagonal(omega, d_new)
                # fixed effects of parameters without variability
                if len(self.fix_no):
                    b_new = self._noiiv_update()
                    b_old = self.fixed[self.fix_no]
                    new_fixed[self.fix_no] = b_old + gamma * (b_new - b_old)
                # residual error
                sigma = self.sigma
                if gaussian:
                    if model.error_model == "combined":
                        sig_new = self._combined_sigma(f, y, self.sigma)
                        sigma = self.sigma + gamma * (sig_new - self.sigma)
                    else:
                        sigma = np.array([np.sqrt(s3 / ntot)])
                    if annealing:
                        sigma = np.sqrt(np.maximum(sigma ** 2, opts.tau * self.sigma ** 2))
                self.fixed, self.omega, self.sigma = new_fixed, omega, sigma
                s.set_theta(self.fixed, self.omega, self.sigma if gaussian else None)
                trace[k] = self._theta_vector()
            acceptance = acc_sum / max(acc_n, 1) if acc_n else np.full(3, np.nan)
            msgs = tuple(dict.fromkeys(self.messages))
            for m in msgs:
                warnings.warn(m, RuntimeWarning, stacklevel=3)
            return Fit(model, self.data, opts, self.fixed.copy(), self.omega.copy(), self.sigma.copy(),
                       trace, names, gammas, s.phi.reshape(s.L, N, nps).copy(), acceptance, K, msgs)
        finally:
            s.close()


def run_saem(model: ModelSpec, data: Dataset, opts: SaemOptions | None = None,
             start: Fit | None = None) -> Fit:
    """Fit ``model`` to ``data`` by SAEM.

    ``start`` optionally supplies initial (fixed, omega, sigma) values that
    override the model's defaults. Subjects missing a covariate the model
    uses are excluded.
    """
    data = data.complete_for(model.used_covariates)
    return SaemEngine(model, data, opts or SaemOptions(), start).run()


def mh_update(sampler: Sampler, kernel_iters=(2, 2, 2)) -> np.ndarray:
    """Advance the sampler by one simulation step at its current parameters."""
    sampler.sweep(kernel_iters)
    return sampler.phi
