"""One-factor MQARCH: market exposure, factor and residual calibration, aggregation.

Each stock return is split as r_i = beta_i f0 + e_i.  The factor follows its
own one-asset model; every residual is calibrated as the second asset of a
two-asset system (factor first) in which the factor row is frozen at the
one-asset fit, so the factor never depends on residuals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateFactor, LengthMismatch
from .model import ModelSpec2D, kernel_l1_norm, spectral_radius
from .moments import estimate_suite
from .panel import BinnedPanel, SimulatedPanel
from .preprocess import mirror_augment
from .simulate import simulate_mqarch
from .yulewalker import calibrate, solve_joint, solve_leverage

log = logging.getLogger(__name__)

__all__ = [
    "FactorDecomposition",
    "FactorCalibration",
    "CrossSectionSummary",
    "estimate_beta",
    "decompose",
    "squared_return_panel",
    "calibrate_factor_model",
    "cross_section_aggregate",
    "endogeneity",
    "simulate_factor_universe",
]

FACTOR, RESIDUAL = 0, 1
PROFILE_KEYS = ("phi_self", "phi_factor", "k_self", "k_factor", "L_self", "L_factor")


def _profiles(spec: ModelSpec2D) -> dict:
    """Kernels acting on the residual: own (self) and from the factor."""
    r, f = RESIDUAL, FACTOR
    return {
        "phi_self": spec.phi[r, r],
        "phi_factor": spec.phi[r, f],
        "k_self": spec.k[r, r],
        "k_factor": spec.k[r, f],
        "L_self": spec.leverage[r, r],
        "L_factor": spec.leverage[r, f],
    }


@dataclass
class FactorDecomposition:
    beta: np.ndarray
    factor_returns: np.ndarray
    residuals: np.ndarray


def estimate_beta(stock, factor) -> float:
    """Regression coefficient cov(r, f0) / var(f0) of stock on factor returns."""
    r = np.asarray(stock, dtype=float).ravel()
    f = np.asarray(factor, dtype=float).ravel()
    if r.size != f.size:
        raise LengthMismatch("stock and factor series lengths differ")
    fc = f - f.mean()
    var = float(fc @ fc)
    if not var > 0:
        raise DegenerateFactor("factor returns have zero variance")
    return float((r - r.mean()) @ fc / var)


def decompose(stocks: BinnedPanel, factor: BinnedPanel) -> FactorDecomposition:
    """Betas and residual returns e_i = r_i - beta_i f0, bin by bin."""
    if factor.n_assets != 1:
        raise LengthMismatch("factor panel must hold one asset")
    if stocks.returns.shape[1:] != factor.returns.shape[1:]:
        raise LengthMismatch("stock and factor panels cover different bins")
    f = factor.returns[0]
    beta = np.array([estimate_beta(stocks.returns[a], f) for a in range(stocks.n_assets)])
    resid = stocks.returns - beta[:, None, None] * f[None]
    return FactorDecomposition(beta=beta, factor_returns=f, residuals=resid)


def squared_return_panel(returns: np.ndarray, like: BinnedPanel) -> BinnedPanel:
    """Panel whose volatility proxy is |r|, so that sigma^2 = r^2."""
    r = np.asarray(returns, dtype=float)
    if r.ndim == 2:
        r = r[None]
    return BinnedPanel(returns=r, vol=np.abs(r), stage=like.stage, days=like.days, meta=dict(like.meta))


@dataclass
class FactorCalibration:
    factor: ModelSpec2D
    stocks: list
    decomposition: FactorDecomposition
    tickers: list = field(default_factory=list)


def _fit_pair(pair: BinnedPanel, factor_spec: ModelSpec2D, q: int, mirror: bool, winsorize, ridge, q_lev):
    quad_panel = mirror_augment(pair) if mirror else pair
    suite = estimate_suite(quad_panel, q, winsorize=winsorize)
    prior = ModelSpec2D.zeros(2, q, suite.mean_sigma2)
    prior.phi[FACTOR, FACTOR] = factor_spec.phi[0, 0]
    prior.k[FACTOR, FACTOR] = factor_spec.k[0, 0]
    prior.leverage[FACTOR, FACTOR] = factor_spec.leverage[0, 0]
    if factor_spec.K_upper is not None:
        prior.K_upper = np.zeros((2, 2, q, q))
        prior.K_upper[FACTOR, FACTOR] = factor_spec.K_upper[0, 0]
    model = solve_joint(
        suite,
        q=q,
        ridge=ridge,
        cross_cov=False,
        targets=[RESIDUAL],
        prior=prior,
        unknowns=["phi_self", "K_self", "phi_other", "K_other"],
    )
    lev_suite = estimate_suite(pair, q, winsorize=winsorize) if mirror else suite
    model = solve_leverage(lev_suite, model, q=q_lev, targets=[RESIDUAL])
    model.sigma_inf_sq[FACTOR] = factor_spec.sigma_inf_sq[0]
    return model


def calibrate_factor_model(
    stocks: BinnedPanel,
    factor: BinnedPanel,
    q: int,
    mirror: bool = True,
    winsorize: Optional[float] = None,
    ridge: float = 0.0,
    q_lev: Optional[int] = None,
    use_panel_vol: bool = False,
) -> FactorCalibration:
    """Calibrate the factor's one-asset model and each residual's two-asset model.

    Volatility proxies are squared returns (f0^2 and e_i^2) unless
    ``use_panel_vol``, in which case the factor panel's volatility and the
    stock panel's volatility are used.  Residual systems solve for the
    residual's own and factor-driven phi, K and leverage only.  The factor
    row of every stock model is the one-asset fit itself.
    """
    if stocks.n_assets < 1:
        raise LengthMismatch("no stocks to calibrate")
    dec = decompose(stocks, factor)
    f_panel = factor if use_panel_vol else squared_return_panel(dec.factor_returns, factor)
    f_quad = mirror_augment(f_panel) if mirror else f_panel
    f_suite = estimate_suite(f_quad, q, winsorize=winsorize)
    f_lev = estimate_suite(f_panel, q, winsorize=winsorize) if mirror else None
    f_spec = calibrate(f_suite, leverage_suite=f_lev if mirror else f_suite, q=q, steps=(1, 4), ridge=ridge)
    specs = []
    for a in range(stocks.n_assets):
        if use_panel_vol:
            res_vol = stocks.vol[a : a + 1]
        else:
            res_vol = np.abs(dec.residuals[a : a + 1])
        pair = BinnedPanel(
            returns=np.concatenate([f_panel.returns, dec.residuals[a : a + 1]]),
            vol=np.concatenate([f_panel.vol, res_vol]),
            stage=stocks.stage,
            days=stocks.days,
            meta=dict(stocks.meta),
        )
        model = _fit_pair(pair, f_spec, q, mirror, winsorize, ridge, q_lev)
        model.meta["beta"] = float(dec.beta[a])
        if stocks.assets is not None:
            model.meta["ticker"] = stocks.assets[a]
        specs.append(model)
        log.info("stock %d: beta %.4f, ||phi_self|| %.4f", a, dec.beta[a], model.phi[RESIDUAL, RESIDUAL].sum())
    tickers = list(stocks.assets) if stocks.assets is not None else [f"stock{a}" for a in range(stocks.n_assets)]
    return FactorCalibration(factor=f_spec, stocks=specs, decomposition=dec, tickers=tickers)


def endogeneity(spec: ModelSpec2D) -> dict:
    """Spectral radius of the factor-residual norm matrix and the max-of-norms rule.

    With the factor unaffected by the residual the norm matrix is triangular,
    so both equal the larger of the factor's and the residual's self norms.
    """
    norms = spec.norms()
    return {
        "spectral_radius": spectral_radius(norms),
        "max_rule": float(max(norms[FACTOR, FACTOR], norms[RESIDUAL, RESIDUAL])),
    }


@dataclass
class CrossSectionSummary:
    mean: dict
    std: dict
    norms: list
    tickers: list

    def norm_rows(self) -> list:
        return [dict(ticker=t, **row) for t, row in zip(self.tickers, self.norms)]


def cross_section_aggregate(specs: Sequence[ModelSpec2D], tickers: Optional[Sequence[str]] = None) -> CrossSectionSummary:
    """Pointwise mean and standard deviation across stocks of the residual kernels."""
    specs = list(specs)
    if not specs:
        raise LengthMismatch("need at least one spec")
    if tickers is None:
        tickers = [s.meta.get("ticker", f"stock{a}") for a, s in enumerate(specs)]
    profiles = [_profiles(s) for s in specs]
    mean = {k: np.mean([p[k] for p in profiles], axis=0) for k in PROFILE_KEYS}
    std = {k: np.std([p[k] for p in profiles], axis=0) for k in PROFILE_KEYS}
    rows = []
    for s, p in zip(specs, profiles):
        row = {
            "beta": float(s.meta.get("beta", np.nan)),
            "phi_self": kernel_l1_norm(p["phi_self"]),
            "phi_factor": kernel_l1_norm(p["phi_factor"]),
            "k2_self": kernel_l1_norm(p["k_self"] ** 2),
            "k2_factor": kernel_l1_norm(p["k_factor"] ** 2),
            "L_self": kernel_l1_norm(p["L_self"]),
            "L_factor": kernel_l1_norm(p["L_factor"]),
            "phi_factor_self": kernel_l1_norm(s.phi[FACTOR, FACTOR]),
        }
        row.update({f"endogeneity_{k}": v for k, v in endogeneity(s).items()})
        rows.append(row)
    return CrossSectionSummary(mean=mean, std=std, norms=rows, tickers=list(tickers))


def simulate_factor_universe(
    residual_models: Sequence[ModelSpec2D],
    betas,
    n_bins: int,
    seed: int,
    bins_per_day: Optional[int] = None,
) -> tuple[BinnedPanel, BinnedPanel, list]:
    """Synthetic stocks r_i = beta_i f0 + e_i from two-asset models (factor first).

    Every model must share the same factor row and have no dependence of the
    factor on the residual; the factor path is then identical across stocks
    because its noise stream is shared.  Returns (stocks, factor, paths)
    where paths holds each simulated two-asset panel.
    """
    betas = np.asarray(betas, dtype=float)
    if len(residual_models) != betas.size:
        raise LengthMismatch("one beta per residual model")
    paths = []
    for a, m in enumerate(residual_models):
        if m.n_assets != 2:
            raise LengthMismatch("residual models must have two assets")
        if np.any(m.phi[FACTOR, RESIDUAL]) or np.any(m.k[FACTOR, RESIDUAL]) or np.any(m.leverage[FACTOR, RESIDUAL]):
            raise ValueError("the factor must not depend on the residual")
        paths.append(simulate_mqarch(m, n_bins, seed=[seed * 1000 + 0, seed * 1000 + 1 + a]))
    f = paths[0].returns[FACTOR]
    for p in paths[1:]:
        if not np.array_equal(p.returns[FACTOR], f):
            raise ValueError("factor rows differ between residual models")
    bpd = n_bins if bins_per_day is None else int(bins_per_day)
    stock_r = np.stack([betas[a] * f + p.returns[RESIDUAL] for a, p in enumerate(paths)])
    stock_s2 = np.stack([p.sigma2[RESIDUAL] for p in paths])
    stocks = SimulatedPanel(stock_r, stock_s2).to_binned(bpd)
    factor = SimulatedPanel(f[None], paths[0].sigma2[FACTOR][None]).to_binned(bpd)
    return stocks, factor, paths
