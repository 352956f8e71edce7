"""From OHLC bars to normalized, martingalised and mirrored return/volatility panels."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InsufficientHistory, InvalidBar, LengthMismatch, SingularCorrelation, ZeroDenominator
from .panel import BinnedPanel

log = logging.getLogger(__name__)

__all__ = [
    "OhlcPanel",
    "ohlc_to_returns_vol",
    "normalize_trailing",
    "normalize_intraday",
    "martingalise",
    "lag1_coefficients",
    "mirror_augment",
]

NU_LIMIT = 1.0 - 1e-6


@dataclass
class OhlcPanel:
    """Bar prices indexed (asset, day, bin-of-day)."""

    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    days: Optional[list] = None
    bin_times: Optional[list] = None
    assets: Optional[list] = None

    def __post_init__(self) -> None:
        arrs = []
        for name in ("open", "high", "low", "close"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.ndim == 2:
                a = a[None]
            arrs.append(a)
            setattr(self, name, a)
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 3:
            raise LengthMismatch("open, high, low and close must share shape (asset, day, bin)")


def ohlc_to_returns_vol(panel: OhlcPanel) -> BinnedPanel:
    """Log return log(c/o) and the range-based volatility per bar.

    vol = (h - l) / (3 o) + 2 |c - o| / (3 o)
    """
    o, h, lo, c = panel.open, panel.high, panel.low, panel.close
    if np.any(o <= 0) or np.any(h <= 0) or np.any(lo <= 0) or np.any(c <= 0):
        raise InvalidBar("prices must be positive")
    eps = 1e-12 * np.maximum(np.abs(o), 1.0)
    bad = (lo > np.minimum(o, c) + eps) | (h < np.maximum(o, c) - eps)
    if np.any(bad):
        raise InvalidBar(f"{int(bad.sum())} bars violate low <= open, close <= high")
    r = np.log(c / o)
    vol = (h - lo) / (3.0 * o) + 2.0 * np.abs(c - o) / (3.0 * o)
    return BinnedPanel(returns=r, vol=vol, stage="raw", days=panel.days, assets=panel.assets)


def _drop_bins(panel: BinnedPanel, keep: np.ndarray, r, v, what: str) -> BinnedPanel:
    if not np.all(keep):
        dropped = np.flatnonzero(~keep).tolist()
        log.warning("%s: dropping bins-of-day %s with zero denominator", what, dropped)
    if not np.any(keep):
        raise ZeroDenominator(f"{what}: every bin-of-day has a zero denominator")
    meta = dict(panel.meta)
    if not np.all(keep):
        meta.setdefault("dropped_bins", []).extend(np.flatnonzero(~keep).tolist())
    return r[:, :, keep], v[:, :, keep], meta


def normalize_trailing(panel: BinnedPanel, window_days: int = 100) -> BinnedPanel:
    """Divide each bin by its trailing same-bin-of-day root mean square.

    Returns use the trailing mean of r^2, volatility that of sigma^2.  The
    mean runs over days d - window_days .. d inclusive, so a constant series
    maps to exactly 1.  The first ``window_days`` days are dropped.
    """
    if window_days < 1:
        raise ValueError("window_days must be >= 1")
    if panel.n_days < window_days + 1:
        raise InsufficientHistory(f"need {window_days + 1} days, have {panel.n_days}")
    w = window_days + 1

    def trailing_mean(x):
        cs = np.cumsum(x * x, axis=1)
        out = cs[:, window_days:].copy()
        out[:, 1:] -= cs[:, :-w]
        return out / w

    r_den = trailing_mean(panel.returns)
    v_den = trailing_mean(panel.vol)
    keep = np.all(r_den > 0, axis=(0, 1)) & np.all(v_den > 0, axis=(0, 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = panel.returns[:, window_days:] / np.sqrt(r_den)
        v = panel.vol[:, window_days:] / np.sqrt(v_den)
    r, v, meta = _drop_bins(panel, keep, r, v, "normalize_trailing")
    days = None if panel.days is None else list(panel.days[window_days:])
    return panel.replace(returns=r, vol=v, stage="normalized", days=days, meta=meta)


def normalize_intraday(panel: BinnedPanel) -> BinnedPanel:
    """Remove the average intraday profile of sigma^2 from sigma and r."""
    if panel.n_days < 2:
        raise InsufficientHistory("need at least 2 days")
    profile = np.mean(panel.vol * panel.vol, axis=1, keepdims=True)
    keep = np.all(profile[:, 0] > 0, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = 1.0 / np.sqrt(profile)
        r = panel.returns * scale
        v = panel.vol * scale
    r, v, meta = _drop_bins(panel, keep, r, v, "normalize_intraday")
    return panel.replace(returns=r, vol=v, stage="normalized", meta=meta)


def lag1_coefficients(returns: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Equal-time and lag-1 covariances of standardized returns within days.

    ``returns`` has shape (asset, day, bin) and must already be centered and
    scaled to unit variance.  Returns (Sigma0, Gamma1, M) where
    Gamma1[a, b] = cov(r_a(t), r_b(t-1)) and M = Gamma1 Sigma0^-1 is the
    regression of r(t) on r(t-1).
    """
    n = returns.shape[0]
    flat = returns.reshape(n, -1)
    sigma0 = flat @ flat.T / flat.shape[1]
    cur = returns[:, :, 1:].reshape(n, -1)
    prev = returns[:, :, :-1].reshape(n, -1)
    gamma1 = cur @ prev.T / cur.shape[1]
    if n == 2:
        nu = sigma0[0, 1] / np.sqrt(sigma0[0, 0] * sigma0[1, 1])
        if abs(nu) >= NU_LIMIT:
            raise SingularCorrelation(f"equal-time correlation {nu:.8f} is too close to +-1")
    m = np.linalg.solve(sigma0.T, gamma1.T).T
    return sigma0, gamma1, m


def martingalise(panel: BinnedPanel) -> BinnedPanel:
    """Remove the lag-1 linearly predictable part of returns within each day.

    Returns are centered and scaled to unit variance, then
    r(t) <- r(t) - Gamma1 Sigma0^-1 r(t-1) for every bin but the first of
    each day, and finally rescaled to unit standard deviation.  Volatility
    is left unchanged.
    """
    if panel.bins_per_day < 2:
        raise InsufficientHistory("need at least 2 bins per day")
    r = panel.returns
    mean = r.mean(axis=(1, 2), keepdims=True)
    std = r.std(axis=(1, 2), keepdims=True)
    if np.any(std == 0):
        raise ZeroDenominator("a return series is constant")
    z = (r - mean) / std
    _, _, m = lag1_coefficients(z)
    out = z.copy()
    out[:, :, 1:] -= np.einsum("ab,bdt->adt", m, z[:, :, :-1])
    out /= out.std(axis=(1, 2), keepdims=True)
    meta = dict(panel.meta)
    meta["lag1_regression"] = m.tolist()
    return panel.replace(returns=out, stage="martingalised", meta=meta)


def mirror_augment(panel: BinnedPanel) -> BinnedPanel:
    """Append a copy of every day with returns sign-flipped and the same volatility."""
    days = None
    if panel.days is not None:
        days = list(panel.days) + [f"{d}~mirror" for d in panel.days]
    meta = dict(panel.meta)
    meta["mirror_days"] = panel.n_days
    return panel.replace(
        returns=np.concatenate([panel.returns, -panel.returns], axis=1),
        vol=np.concatenate([panel.vol, panel.vol], axis=1),
        stage="mirrored",
        days=days,
        meta=meta,
    )
