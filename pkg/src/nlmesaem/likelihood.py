"""Marginal log-likelihood of a fitted model: importance sampling, adaptive
Gauss-Hermite quadrature and linearisation (gaussian outcomes)."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .conditional import ConditionalEstimates, complete_log_density, estimate_conditional, map_estimates
from .model import UnsupportedOperation, transform_to_natural, Rows, error_model_sd
from .rng import derive_rng
from .saem import Fit, Sampler

SD_FLOOR = 1e-6
MAX_GQ_DIM = 4
IS_BLOCK = 50  # draws per random stream, so results do not depend on chunk size


@dataclass(frozen=True)
class LikelihoodEstimate:
    ll: float
    per_subject: np.ndarray
    method: str
    mc_se: float = float("nan")
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ll": self.ll, "method": self.method, "mc_se": self.mc_se, "settings": dict(self.settings)}


def _evaluator(fit: Fit, copies: int) -> Sampler:
    s = Sampler(fit.model, fit.data, copies, fit.options.seed, "likelihood")
    s.set_theta(fit.fixed, fit.omega, fit.sigma if fit.model.outcome == "gaussian" else None)
    return s


def _log_norm_const(omega_iiv: np.ndarray) -> float:
    d = len(omega_iiv)
    return -0.5 * (d * np.log(2 * np.pi) + np.linalg.slogdet(omega_iiv)[1])


def _conditional_for_likelihood(fit: Fit) -> ConditionalEstimates:
    return estimate_conditional(fit, tol=0.02, max_iter=200, compute_map=False)


def ll_importance_sampling(fit: Fit, M: int = 10000, cond: ConditionalEstimates | None = None,
                           seed: int | None = None, df: float = 5.0, chunk: int | None = None) -> LikelihoodEstimate:
    """Importance sampling with a multivariate t proposal centred on the
    conditional means and scaled by the conditional SDs."""
    cond = cond or _conditional_for_likelihood(fit)
    seed = fit.options.seed if seed is None else seed
    N = fit.data.n_subjects
    chunk = chunk or max(1, min(M, int(2e5 // max(fit.data.n_rows, 1))))
    chunk = IS_BLOCK * int(np.ceil(min(chunk, M) / IS_BLOCK))
    ev = _evaluator(fit, chunk)
    iiv, d = ev.iiv, ev.d
    m = cond.mean[:, iiv]
    sd = cond.sd[:, iiv]
    if np.any(sd < SD_FLOOR):
        warnings.warn("degenerate conditional SD; proposal scale floored at 1e-6", RuntimeWarning, stacklevel=2)
        sd = np.maximum(sd, SD_FLOOR)
    log_const_prior = _log_norm_const(ev.omega_iiv)
    log_const_t = (special.gammaln((df + d) / 2) - special.gammaln(df / 2)
                   - 0.5 * d * np.log(df * np.pi)) - np.log(sd).sum(axis=1)
    logw = np.empty((M, N))
    done = 0
    while done < M:
        k = min(chunk, M - done)
        z, w = [], []
        for blk in range(done // IS_BLOCK, (done + chunk) // IS_BLOCK):
            rng = derive_rng(seed, "importance", blk)
            z.append(rng.standard_normal((IS_BLOCK, N, d)))
            w.append(rng.chisquare(df, (IS_BLOCK, N)) / df)
        z, w = np.concatenate(z), np.concatenate(w)
        u = z / np.sqrt(w)[..., None]
        x = m[None] + sd[None] * u
        phi = np.tile(ev.phi_pop[:N], (chunk, 1))
        phi[:, iiv] = x.reshape(-1, d)
        ll = ev.subject_ll(phi).reshape(chunk, N)
        eta = x - ev.phi_pop[:N, iiv][None]
        lprior = -0.5 * np.einsum("cij,jk,cik->ci", eta, ev.omega_inv, eta) + log_const_prior
        q = (u ** 2).sum(axis=2)
        lq = log_const_t[None] - 0.5 * (df + d) * np.log1p(q / df)
        logw[done:done + k] = (ll + lprior - lq)[:k]
        done += k
    ev.close()
    mx = logw.max(axis=0)
    wn = np.exp(logw - mx)
    mean_w = wn.mean(axis=0)
    per = mx + np.log(mean_w)
    se_i = np.sqrt(wn.var(axis=0, ddof=1) / M) / mean_w if M > 1 else np.zeros(N)
    return LikelihoodEstimate(float(per.sum()), per, "is", float(np.sqrt(np.sum(se_i ** 2))),
                              {"M": int(M), "df": df, "seed": int(seed)})


def _fd_hessian(f, x, h):
    """Per-subject Hessian of f at x (N, d) with per-subject steps h (N, d)."""
    N, d = x.shape
    f0 = f(x)
    H = np.zeros((N, d, d))
    fp = np.zeros((N, d))
    fm = np.zeros((N, d))
    for i in range(d):
        e = np.zeros((N, d))
        e[:, i] = h[:, i]
        fp[:, i], fm[:, i] = f(x + e), f(x - e)
        H[:, i, i] = (fp[:, i] - 2 * f0 + fm[:, i]) / h[:, i] ** 2
    for i, j in itertools.combinations(range(d), 2):
        e = np.zeros((N, d))
        e[:, i], e[:, j] = h[:, i], h[:, j]
        fpp = f(x + e)
        e[:, j] = -h[:, j]
        fpm = f(x + e)
        e[:, i], e[:, j] = -h[:, i], h[:, j]
        fmp = f(x + e)
        e[:, j] = -h[:, j]
        fmm = f(x + e)
        H[:, i, j] = H[:, j, i] = (fpp - fpm - fmp + fmm) / (4 * h[:, i] * h[:, j])
    return H


def ll_gauss_hermite(fit: Fit, nodes: int = 9, cond: ConditionalEstimates | None = None) -> LikelihoodEstimate:
    """Adaptive Gauss-Hermite quadrature.

    Nodes are centred on each subject's conditional mode and scaled by the
    curvature of the log density there, so Gaussian integrands are exact.
    A single node gives the Laplace approximation.
    """
    iiv = np.flatnonzero(fit.model.has_iiv)
    d = len(iiv)
    if d > MAX_GQ_DIM:
        raise UnsupportedOperation(f"quadrature over {d} random effects is not supported "
                                   f"(maximum {MAX_GQ_DIM}); use importance sampling")
    if nodes < 1:
        raise ValueError("nodes must be at least 1")
    N = fit.data.n_subjects
    start = None if cond is None else cond.map
    mode = map_estimates(fit, start=start)
    ev = _evaluator(fit, 1)
    log_const = _log_norm_const(ev.omega_iiv)

    def f_sub(x):
        phi = mode.copy()
        phi[:, iiv] = x
        return complete_log_density(ev, phi) + log_const

    x0 = mode[:, iiv]
    h = np.tile(1e-2 * np.sqrt(np.diag(ev.omega_iiv)), (N, 1))
    H = _fd_hessian(f_sub, x0, h)
    post_sd = 1.0 / np.sqrt(np.maximum(-np.diagonal(H, axis1=1, axis2=2), 1e-12))
    H = _fd_hessian(f_sub, x0, np.maximum(1e-2 * post_sd, 1e-7))
    chol = np.zeros((N, d, d))
    for i in range(N):
        try:
            chol[i] = np.linalg.cholesky(np.linalg.inv(-H[i]))
        except np.linalg.LinAlgError:
            fallback = cond.sd[i, iiv] if cond is not None else np.sqrt(np.diag(ev.omega_iiv))
            chol[i] = np.diag(np.maximum(fallback, SD_FLOOR))
    z1, w1 = np.polynomial.hermite.hermgauss(nodes)
    grid = np.array(list(itertools.product(range(nodes), repeat=d)))
    Z = z1[grid]  # (K, d)
    logW = np.log(w1[grid]).sum(axis=1) + (Z ** 2).sum(axis=1)
    vals = np.empty((len(Z), N))
    for k, z in enumerate(Z):
        vals[k] = f_sub(x0 + np.sqrt(2.0) * np.einsum("nij,j->ni", chol, z))
    ev.close()
    logdet = np.log(np.abs(np.diagonal(chol, axis1=1, axis2=2))).sum(axis=1)
    per = 0.5 * d * np.log(2.0) + logdet + special.logsumexp(vals + logW[:, None], axis=0)
    return LikelihoodEstimate(float(per.sum()), per, "gq", settings={"nodes": int(nodes)})


def _linearisation(fit: Fit, phi_hat: np.ndarray, fixed=None, h_rel: float = 1e-6):
    """Per-row prediction at phi_hat and its Jacobian with respect to the
    random effects; log scale for the exponential error model."""
    model, ds = fit.model, fit.data
    rows = Rows.from_dataset(ds)
    iiv = np.flatnonzero(model.has_iiv)
    expo = model.error_model == "exponential"

    def pred(phi):
        psi = transform_to_natural(phi, model.transforms)
        f = model.structural(np.take(psi, rows.subject, axis=0), rows)
        return np.log(f) if expo else f

    f0 = pred(phi_hat)
    J = np.zeros((ds.n_rows, len(iiv)))
    for jj, j in enumerate(iiv):
        h = h_rel * np.maximum(1.0, np.abs(phi_hat[:, j]))
        pp, pm = phi_hat.copy(), phi_hat.copy()
        pp[:, j] += h
        pm[:, j] -= h
        J[:, jj] = (pred(pp) - pred(pm)) / (2 * h[rows.subject])
    return f0, J, pred


def _residual_var(model, f, sigma):
    if model.error_model == "exponential":
        return np.full_like(f, sigma[0] ** 2)
    return error_model_sd(f, model.error_model, sigma) ** 2


def ll_linearized(fit: Fit, cond: ConditionalEstimates | None = None) -> LikelihoodEstimate:
    """Gaussian log-likelihood of the model linearised around the
    individual estimates (first-order conditional approximation)."""
    model, ds = fit.model, fit.data
    if model.outcome != "gaussian":
        raise UnsupportedOperation("linearised likelihood is only available for gaussian outcomes")
    phi_pop = fit.population_phi()
    start = cond.map if cond is not None else None
    phi_hat = map_estimates(fit, start=start)
    iiv = np.flatnonzero(model.has_iiv)
    f0, J, _ = _linearisation(fit, phi_hat)
    y = ds.y if model.error_model != "exponential" else np.log(ds.y)
    eta = (phi_hat - phi_pop)[:, iiv]
    om = fit.omega[np.ix_(iiv, iiv)]
    per = np.empty(ds.n_subjects)
    for i in range(ds.n_subjects):
        sl = ds.rows_of(i)
        Ji = J[sl]
        mean = f0[sl] - Ji @ eta[i]
        V = Ji @ om @ Ji.T + np.diag(_residual_var(model, f0[sl], fit.sigma))
        r = y[sl] - mean
        c = linalg.cho_factor(V, lower=True)
        per[i] = -0.5 * (len(r) * np.log(2 * np.pi) + 2 * np.log(np.diag(c[0])).sum()
                         + r @ linalg.cho_solve(c, r))
    return LikelihoodEstimate(float(per.sum()), per, "lin")
