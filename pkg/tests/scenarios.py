"""Shared synthetic inputs for the unit, property and acceptance tests."""

from __future__ import annotations

import functools

import numpy as np

from mqarch.model import ModelSpec2D, zhawkes_model
from mqarch.moments import estimate_suite
from mqarch.simulate import simulate_mqarch


@functools.lru_cache(maxsize=None)
def base_panel_2d(n_bins: int = 200_000, seed: int = 1):
    """Two correlated QGARCH assets; supplies realistic return-side moment tables."""
    q = 5
    m = zhawkes_model(
        np.array([[0.3, 0.1], [0.1, 0.3]]), 0.5, np.array([[0.1, 0.05], [0.05, 0.1]]), 0.4, [1.0, 1.0], q
    )
    sp = simulate_mqarch(m, n_bins, seed)
    sp.returns[1] = 0.6 * sp.returns[0] + 0.8 * sp.returns[1]
    return sp.to_binned(1000)


@functools.lru_cache(maxsize=None)
def base_suite(q: int, n_assets: int = 2):
    panel = base_panel_2d()
    if n_assets == 1:
        panel = panel.select_assets([0])
    return estimate_suite(panel, q)


def random_model(rng, q: int, n_assets: int = 2, cross_cov: bool = True, leverage: bool = False) -> ModelSpec2D:
    """Random kernels with K_x = 0, scaled to spectral radius at most 0.8."""
    n = n_assets
    phi = rng.uniform(0.0, 0.05, (n, n, q))
    rho = np.max(np.abs(np.linalg.eigvals(phi.sum(axis=2))))
    if rho > 0.8:
        phi *= 0.8 / rho
    k = rng.uniform(-0.1, 0.2, (n, n, q))
    px = rng.normal(0.0, 0.02, (n, q)) if (cross_cov and n == 2) else np.zeros((n, q))
    lev = rng.normal(0.0, 0.05, (n, n, q)) if leverage else None
    return ModelSpec2D(phi=phi, k=k, phi_cross=px, leverage=lev, sigma_inf_sq=np.ones(n))


def max_kernel_error(est: ModelSpec2D, truth: ModelSpec2D, cross_cov: bool = True) -> float:
    n = truth.n_assets
    err = np.abs(est.phi - truth.phi).max()
    err = max(err, max(np.abs(est.offdiag_K(a, b) - truth.offdiag_K(a, b)).max() for a in range(n) for b in range(n)))
    if cross_cov:
        err = max(err, np.abs(est.phi_cross - truth.phi_cross).max())
    return float(err)


def l1_rel_error(est, truth, scale=None) -> float:
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    denom = np.abs(truth).sum() if scale is None else float(scale)
    return float(np.abs(est - truth).sum() / denom)
