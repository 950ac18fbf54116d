"""Conditional distributions of individual parameters at fixed population
estimates: means, SDs, MAP estimates and shrinkage."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .model import transform_to_natural
from .saem import Fit, Sampler


@dataclass(frozen=True, eq=False)
class ConditionalEstimates:
    """Per-subject summaries on the Gaussian (phi) scale.

    ``samples`` has shape (n_subjects, n_samples, n_params) and holds the
    thinned MCMC draws kept for bootstrap reuse.
    """

    param_names: tuple[str, ...]
    transforms: tuple[str, ...]
    phi_pop: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    map: np.ndarray
    samples: np.ndarray
    shrinkage: np.ndarray
    converged: bool
    n_sweeps: int

    @property
    def psi_mean(self) -> np.ndarray:
        return transform_to_natural(self.mean, self.transforms)

    @property
    def psi_map(self) -> np.ndarray:
        return transform_to_natural(self.map, self.transforms)

    @property
    def eta_mean(self) -> np.ndarray:
        return self.mean - self.phi_pop

    def to_frame(self, ids) -> pd.DataFrame:
        n, p = self.mean.shape
        return pd.DataFrame({
            "id": np.repeat(np.asarray(ids), p),
            "parameter": np.tile(self.param_names, n),
            "mean": self.mean.ravel(),
            "sd": self.sd.ravel(),
            "map": self.map.ravel(),
            "map_natural": self.psi_map.ravel(),
            "shrinkage": np.tile(self.shrinkage, n),
        })


def complete_log_density(sampler: Sampler, phi: np.ndarray) -> np.ndarray:
    """log p(y_i | phi_i) + log p(phi_i | theta) up to the Gaussian constant."""
    return sampler.subject_ll(phi) - sampler.prior(phi)


def map_estimates(fit: Fit, start: np.ndarray | None = None, scale: np.ndarray | None = None,
                  step_tol: float = 1e-8, max_rounds: int = 2000) -> np.ndarray:
    """Mode of each subject's conditional density by coordinate pattern search."""
    s = Sampler(fit.model, fit.data, 1, fit.options.seed, "map")
    s.set_theta(fit.fixed, fit.omega, fit.sigma if fit.model.outcome == "gaussian" else None)
    phi = s.phi_pop.copy() if start is None else np.array(start, dtype=float)
    phi[:, s.noiiv] = s.phi_pop[:, s.noiiv]
    iiv = s.iiv
    if scale is None:
        scale = np.sqrt(np.diag(s.omega_iiv))[None, :] * np.ones((s.N, 1))
    step = np.maximum(np.asarray(scale, dtype=float)[:, : len(iiv)] * 0.5, 1e-6)
    cur = complete_log_density(s, phi)
    for _ in range(max_rounds):
        active = step.max(axis=1) >= step_tol
        if not active.any():
            break
        improved = np.zeros(s.N, dtype=bool)
        for jj, j in enumerate(iiv):
            for sign in (1.0, -1.0):
                prop = phi.copy()
                prop[:, j] += sign * step[:, jj] * active
                val = complete_log_density(s, prop)
                better = active & (val > cur)
                phi[better] = prop[better]
                cur[better] = val[better]
                improved |= better
        step[~improved] *= 0.5
    s.close()
    return phi


def estimate_conditional(fit: Fit, tol: float = 0.005, max_iter: int = 1000, batch: int = 50,
                         n_chains: int | None = None, thin: int = 5, max_samples: int = 500,
                         seed: int | None = None, threads: int = 1, compute_map: bool = True,
                         min_batches: int = 2) -> ConditionalEstimates:
    """Run the SAEM kernels at the fitted parameters until the running
    conditional means and SDs stabilise.

    Convergence is checked after every batch of ``batch`` sweeps: each
    subject's change in mean and SD must be below ``tol`` relative to
    max(|mean|, SD) and SD respectively.
    """
    model, data = fit.model, fit.data
    L = n_chains or max(fit.options.n_chains, 1)
    seed = fit.options.seed if seed is None else seed
    s = Sampler(model, data, L, seed, "conditional", threads)
    init = None
    if fit.phi_chains is not None and fit.phi_chains.shape[:2] == (L, data.n_subjects):
        init = fit.phi_chains.reshape(L * data.n_subjects, -1)
    s.set_theta(fit.fixed, fit.omega, fit.sigma if model.outcome == "gaussian" else None, phi=init)
    # step sizes tuned briefly before sampling
    for _ in range(batch):
        s.sweep(fit.options.kernel_iters, adapt=True, target=fit.options.target_accept)
    N, p = data.n_subjects, model.n_params
    per_chain_cap = int(np.ceil(max_samples / L))
    kept: list[np.ndarray] = []
    tot1 = np.zeros((L, N, p))
    tot2 = np.zeros((L, N, p))
    n = 0
    prev_mean = prev_sd = None
    converged = False
    mean = sd = np.zeros((N, p))
    for b in range(max_iter):
        for _ in range(batch):
            s.sweep(fit.options.kernel_iters)
            cur = s.phi.reshape(L, N, p)
            tot1 += cur
            tot2 += cur ** 2
            n += 1
            if n % thin == 0 and len(kept) < per_chain_cap:
                kept.append(cur.copy())
        mean = tot1.sum(axis=0) / (n * L)
        sd = np.sqrt(np.maximum(tot2.sum(axis=0) / (n * L) - mean ** 2, 0.0))
        if prev_mean is not None and b + 1 >= min_batches:
            ref = np.maximum(np.abs(mean), np.maximum(sd, 1e-12))
            dm = np.abs(mean - prev_mean) / ref
            ds = np.abs(sd - prev_sd) / np.maximum(prev_sd, 1e-12)
            ds[:, s.noiiv] = 0.0
            if dm.max() < tol and ds.max() < tol:
                converged = True
                break
        prev_mean, prev_sd = mean, sd
    s.close()
    if not converged:
        warnings.warn("conditional distribution estimates did not reach the requested tolerance",
                      RuntimeWarning, stacklevel=2)
    sd[:, s.noiiv] = 0.0
    samples = np.stack(kept, axis=2) if kept else mean[None, :, None, :]
    # (L, N, S, p) -> (N, L * S, p), cap at max_samples
    samples = np.moveaxis(samples, 0, 1).reshape(N, -1, p)[:, :max_samples]
    phi_pop = fit.population_phi()
    if compute_map:
        phi_map = map_estimates(fit, start=mean, scale=np.maximum(sd[:, s.iiv], 1e-4))
    else:
        phi_map = mean.copy()
    shrink = np.full(p, np.nan)
    eta = mean - phi_pop
    for j in s.iiv:
        if N > 1 and fit.omega[j, j] > 0:
            shrink[j] = 1.0 - np.var(eta[:, j], ddof=1) / fit.omega[j, j]
    return ConditionalEstimates(model.param_names, model.transforms, phi_pop, mean, sd, phi_map,
                                samples, shrink, converged, n)
