"""Covariance structures between volatility and lagged returns.

Notation for one or two assets, all moments taken within days over the
common reference window of each day (bins whose full lag range stays inside
the day):

    Gamma[a, b]            = E[r_a r_b]
    S[ab|cd](u)            = E[(r_a r_b(s) - Gamma[a, b]) r_c(s-u) r_d(s-u)]
    P[ab|cd](u, v)         = E[r_a r_b(s) r_c(s-u) r_d(s-v)]
    Q[ab|c](u)             = E[r_a r_b(s) r_c(s-u)]
    Dsig[j|cd](u, v)       = E[(sigma_j^2(s) - m_j) r_c(s-u) r_d(s-v)]
    Vsig[j|c](u)           = E[(sigma_j^2(s) - m_j) r_c(s-u)]

with m_j the window mean of sigma_j^2.  The named structures are views:

    C[j][l](tau)       = Dsig[j|ll](tau, tau)
    D[j][l](t1, t2)    = Dsig[j|ll](t1, t2)
    Dx[j](t1, t2)      = Dsig[j|j jb](t1, t2)       (jb the other asset)
    V[j][l](tau)       = Vsig[j|l](tau)
    Cr[i][l](tau)      = S[ii|ll](tau)
    Vr[i][l](tau)      = Q[ii|l](tau)
    Dp[(ab)][c][d]     = P[ab|cd]

Two-lag tables live on the grid -q..q in both axes (index offset q).  The
default causal estimate fills only lags >= 0.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import least_squares

from .errors import FitDiverged, InsufficientBins, LengthMismatch, NonSymmetric
from .panel import BinnedPanel

log = logging.getLogger(__name__)

__all__ = [
    "CovarianceSuite",
    "SmoothFamily",
    "SmoothFit",
    "estimate_suite",
    "estimate_two_point",
    "estimate_three_point",
    "winsorize_panel",
    "fit_smooth",
    "rank_one_approx",
    "smooth_suite",
]

CHUNK_ROWS = 200_000


def _pairs(n: int):
    return [(a, b) for a in range(n) for b in range(a, n)]


@dataclass
class CovarianceSuite:
    q: int
    n_assets: int
    causal: bool
    gamma: np.ndarray
    mean_sigma2: np.ndarray
    n_rows: int
    S: dict
    P: dict
    Q: dict
    Dsig: dict
    Vsig: dict
    meta: dict = field(default_factory=dict)

    # raw accessors with index canonicalization

    def S_(self, a, b, c, d) -> np.ndarray:
        """S[ab|cd] on lags 0..q."""
        a, b = sorted((a, b))
        c, d = sorted((c, d))
        return self.S[(a, b, c, d)]

    def P_(self, a, b, c, d) -> np.ndarray:
        """P[ab|cd] on the centered grid (2q+1, 2q+1)."""
        a, b = sorted((a, b))
        if (a, b, c, d) in self.P:
            return self.P[(a, b, c, d)]
        return self.P[(a, b, d, c)].T

    def Q_(self, a, b, c) -> np.ndarray:
        a, b = sorted((a, b))
        return self.Q[(a, b, c)]

    def Dsig_(self, j, c, d) -> np.ndarray:
        if (j, c, d) in self.Dsig:
            return self.Dsig[(j, c, d)]
        return self.Dsig[(j, d, c)].T

    def Vsig_(self, j, c) -> np.ndarray:
        return self.Vsig[(j, c)]

    # named structures

    def C(self, j: int, l: int) -> np.ndarray:
        q = self.q
        return np.diagonal(self.Dsig_(j, l, l))[q:].copy()

    def D(self, j: int, l: int) -> np.ndarray:
        q = self.q
        return self.Dsig_(j, l, l)[q:, q:].copy()

    def Dx(self, j: int) -> np.ndarray:
        q = self.q
        return self.Dsig_(j, j, 1 - j)[q:, q:].copy()

    def V(self, j: int, l: int) -> np.ndarray:
        return self.Vsig_(j, l).copy()

    def Cr(self, i: int, l: int) -> np.ndarray:
        return self.S_(i, i, l, l).copy()

    def Vr(self, i: int, l: int) -> np.ndarray:
        return self.Q_(i, i, l).copy()

    def Dp(self, a, b, c, d) -> np.ndarray:
        return self.P_(a, b, c, d).copy()

    def copy(self) -> "CovarianceSuite":
        cp = lambda dct: {k: v.copy() for k, v in dct.items()}
        return CovarianceSuite(
            q=self.q,
            n_assets=self.n_assets,
            causal=self.causal,
            gamma=self.gamma.copy(),
            mean_sigma2=self.mean_sigma2.copy(),
            n_rows=self.n_rows,
            S=cp(self.S),
            P=cp(self.P),
            Q=cp(self.Q),
            Dsig=cp(self.Dsig),
            Vsig=cp(self.Vsig),
            meta=dict(self.meta),
        )

    def rows(self):
        """Flat (structure, i, j, tau1, tau2, value) records, assets one-based."""
        q = self.q
        tag = lambda *idx: "".join(str(x + 1) for x in idx)
        out = []
        for a in range(self.n_assets):
            for b in range(self.n_assets):
                out.append(("gamma", tag(a), tag(b), "", "", self.gamma[a, b]))
            out.append(("mean_sigma2", tag(a), "", "", "", self.mean_sigma2[a]))
        for (a, b, c, d), arr in sorted(self.S.items()):
            out.extend(("S", tag(a, b), tag(c, d), u, "", arr[u]) for u in range(q + 1))
        for (a, b, c), arr in sorted(self.Q.items()):
            out.extend(("Q", tag(a, b), tag(c), u, "", arr[u]) for u in range(q + 1))
        for (j, c), arr in sorted(self.Vsig.items()):
            out.extend(("Vsig", tag(j), tag(c), u, "", arr[u]) for u in range(q + 1))
        lo = 0 if self.causal else -q
        for name, dct, key in (("P", self.P, lambda k: (tag(k[0], k[1]), tag(k[2], k[3]))),
                               ("Dsig", self.Dsig, lambda k: (tag(k[0]), tag(k[1], k[2])))):
            for k, arr in sorted(dct.items()):
                i, j = key(k)
                for u in range(lo, q + 1):
                    for v in range(lo, q + 1):
                        out.append((name, i, j, u, v, arr[u + q, v + q]))
        return out


def winsorize_panel(panel: BinnedPanel, quantile: float) -> BinnedPanel:
    """Clip returns and volatility per asset at the two-sided ``quantile``.

    A mirrored panel is clipped on its original half and re-mirrored so the
    sign symmetry is kept exactly.
    """
    if not 0 < quantile < 0.5:
        raise ValueError("quantile must be in (0, 0.5)")
    half = panel.meta.get("mirror_days")
    nd = half if half is not None else panel.n_days
    r = panel.returns[:, :nd].copy()
    v = panel.vol[:, :nd].copy()
    for a in range(panel.n_assets):
        lo, hi = np.quantile(r[a], [quantile, 1 - quantile])
        r[a] = np.clip(r[a], lo, hi)
        lo, hi = np.quantile(v[a], [quantile, 1 - quantile])
        v[a] = np.clip(v[a], lo, hi)
    if half is not None:
        r = np.concatenate([r, -r], axis=1)
        v = np.concatenate([v, v], axis=1)
    meta = dict(panel.meta)
    meta["winsorize"] = quantile
    log.info("winsorizing returns and volatility at quantile %g", quantile)
    return panel.replace(returns=r, vol=v, meta=meta)


def _segments(panel: BinnedPanel):
    half = panel.meta.get("mirror_days")
    if panel.stage == "mirrored" and half is not None and 2 * half == panel.n_days:
        return [(0, half), (half, 2 * half)]
    return [(0, panel.n_days)]


def _lag_window(x: np.ndarray, lags: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lagged design and aligned current values for a block of days.

    ``x`` has shape (days, bins).  Returns (R, cur) with R[row, k] = x(s - lags[k])
    and cur[row] = x(s) for every reference time s of every day.
    """
    lo, hi = int(lags.min()), int(lags.max())
    win = sliding_window_view(x, hi - lo + 1, axis=1)
    R = win[:, :, hi - lags].reshape(-1, lags.size)
    cur = x[:, hi : x.shape[1] + lo].reshape(-1)
    return R, cur


def _accumulate(panel, q, lags, want_three, chunk_rows, segs):
    n = panel.n_assets
    B = panel.bins_per_day
    lo, hi = int(lags.min()), int(lags.max())
    per_day = B - (hi - lo)
    if per_day < 1:
        raise InsufficientBins(f"{B} bins per day leaves no reference window for lag range [{lo}, {hi}]")
    days_per_chunk = max(1, chunk_rows // per_day)
    r = panel.returns
    s2 = panel.vol * panel.vol
    pairs = _pairs(n)

    # first pass: window means
    tot_y = {ab: 0.0 for ab in pairs}
    tot_s = np.zeros(n)
    rows = 0
    for d0, d1 in segs:
        seg_y = {ab: 0.0 for ab in pairs}
        seg_s = np.zeros(n)
        for c0 in range(d0, d1, days_per_chunk):
            c1 = min(c0 + days_per_chunk, d1)
            cur_r = r[:, c0:c1, hi : B + lo]
            for a, b in pairs:
                seg_y[(a, b)] += float(np.sum(cur_r[a] * cur_r[b]))
            seg_s += s2[:, c0:c1, hi : B + lo].sum(axis=(1, 2))
            rows += (c1 - c0) * per_day
        for ab in pairs:
            tot_y[ab] += seg_y[ab]
        tot_s += seg_s
    gamma = np.zeros((n, n))
    for (a, b), v in tot_y.items():
        gamma[a, b] = gamma[b, a] = v / rows
    msig = tot_s / rows

    L = lags.size
    cd_pairs = pairs
    acc = {
        "S": {(a, b, c, d): np.zeros(L) for (a, b) in pairs for (c, d) in cd_pairs},
        "RR": {(c, d): np.zeros(L) for (c, d) in cd_pairs},
        "Q": {(a, b, c): np.zeros(L) for (a, b) in pairs for c in range(n)},
        "V": {(j, c): np.zeros(L) for j in range(n) for c in range(n)},
        "P": {(a, b, c, d): np.zeros((L, L)) for (a, b) in pairs for (c, d) in cd_pairs} if want_three else {},
        "D": {(j, c, d): np.zeros((L, L)) for j in range(n) for (c, d) in cd_pairs} if want_three else {},
        "Cd": {(j, c, d): np.zeros(L) for j in range(n) for (c, d) in cd_pairs},
    }
    for d0, d1 in segs:
        seg = {k: {kk: np.zeros_like(vv) for kk, vv in dct.items()} for k, dct in acc.items()}
        for c0 in range(d0, d1, days_per_chunk):
            c1 = min(c0 + days_per_chunk, d1)
            R = []
            cur = []
            for a in range(n):
                Ra, ca = _lag_window(r[a, c0:c1], lags)
                R.append(Ra)
                cur.append(ca)
            sig = [_lag_window(s2[j, c0:c1], lags)[1] - msig[j] for j in range(n)]
            prods = {(c, d): R[c] * R[d] for (c, d) in cd_pairs}
            for (c, d), pr in prods.items():
                seg["RR"][(c, d)] += pr.sum(axis=0)
            for a, b in pairs:
                y = cur[a] * cur[b]
                for (c, d), pr in prods.items():
                    seg["S"][(a, b, c, d)] += y @ pr
                for c in range(n):
                    seg["Q"][(a, b, c)] += y @ R[c]
                if want_three:
                    for c, d in cd_pairs:
                        seg["P"][(a, b, c, d)] += (R[c] * y[:, None]).T @ R[d]
            for j in range(n):
                for c in range(n):
                    seg["V"][(j, c)] += sig[j] @ R[c]
                if not want_three:
                    for c, d in cd_pairs:
                        seg["Cd"][(j, c, d)] += sig[j] @ prods[(c, d)]
                if want_three:
                    for c, d in cd_pairs:
                        seg["D"][(j, c, d)] += (R[c] * sig[j][:, None]).T @ R[d]
        for k, dct in seg.items():
            for kk, vv in dct.items():
                acc[k][kk] += vv
    return acc, gamma, msig, rows


def _embed(arr: np.ndarray, lags: np.ndarray, q: int) -> np.ndarray:
    """Place values indexed by ``lags`` on the centered grid -q..q."""
    idx = lags + q
    if arr.ndim == 1:
        out = np.zeros(2 * q + 1)
        out[idx] = arr
        return out
    out = np.zeros((2 * q + 1, 2 * q + 1))
    out[np.ix_(idx, idx)] = arr
    return out


def estimate_suite(
    panel: BinnedPanel,
    q: int,
    causal: bool = True,
    winsorize: Optional[float] = None,
    three_point: bool = True,
    chunk_rows: int = CHUNK_ROWS,
) -> CovarianceSuite:
    """Estimate every covariance structure up to lag ``q``.

    Moments are averaged within days over each day's reference window, then
    across days.  On a mirrored panel the two halves are summed separately
    with identical chunking, so odd moments cancel exactly and even moments
    reproduce the un-mirrored estimate.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    if panel.n_assets not in (1, 2):
        raise LengthMismatch("covariance suites cover one or two assets; select a pair first")
    if q >= panel.bins_per_day:
        raise InsufficientBins(f"q={q} must be below bins per day {panel.bins_per_day}")
    if winsorize:
        panel = winsorize_panel(panel, winsorize)
    lags = np.arange(0 if causal else -(q - 1), q + 1)
    segs = _segments(panel)
    acc, gamma, msig, rows = _accumulate(panel, q, lags, three_point, chunk_rows, segs)
    pos = lags >= 0
    n = panel.n_assets

    S = {}
    for (a, b, c, d), v in acc["S"].items():
        S[(a, b, c, d)] = ((v - gamma[a, b] * acc["RR"][(c, d)]) / rows)[pos]
    Q = {k: (v / rows)[pos] for k, v in acc["Q"].items()}
    Vsig = {k: (v / rows)[pos] for k, v in acc["V"].items()}
    P = {k: _embed(v / rows, lags, q) for k, v in acc["P"].items()}
    if three_point:
        Dsig = {k: _embed(v / rows, lags, q) for k, v in acc["D"].items()}
    else:
        # equal-lag entries only
        Dsig = {k: _embed(np.diag(v / rows), lags, q) for k, v in acc["Cd"].items()}
    # equal-asset lag pairs are symmetric by definition; remove rounding asymmetry
    for dct in (P, Dsig):
        for k, v in dct.items():
            if k[-1] == k[-2]:
                dct[k] = 0.5 * (v + v.T)
    meta = {"segments": segs, "stage": panel.stage}
    if winsorize:
        meta["winsorize"] = winsorize
    return CovarianceSuite(
        q=q,
        n_assets=n,
        causal=causal,
        gamma=gamma,
        mean_sigma2=msig,
        n_rows=rows,
        S=S,
        P=P,
        Q=Q,
        Dsig=Dsig,
        Vsig=Vsig,
        meta=meta,
    )


def estimate_two_point(panel: BinnedPanel, kind: str, i: int, j: int, max_lag: int) -> np.ndarray:
    """Two-point structure on lags 0..max_lag.

    kind C:  E[(sigma_i^2 - m_i) r_j^2(t - tau)]
    kind Cr: E[(r_i^2 - E r_i^2) r_j^2(t - tau)]
    kind V:  E[(sigma_i^2 - m_i) r_j(t - tau)]
    kind Vr: E[r_i^2 r_j(t - tau)]
    """
    getters = {"C": "C", "CR": "Cr", "V": "V", "VR": "Vr"}
    name = getters.get(kind.upper())
    if name is None:
        raise ValueError(f"unknown two-point kind {kind!r}")
    suite = estimate_suite(panel, max_lag, three_point=False)
    return getattr(suite, name)(i, j)


def estimate_three_point(panel: BinnedPanel, kind: str, indices, max_lag: int) -> np.ndarray:
    """Three-point table on lags 0..max_lag (Dp on the centered grid).

    kind D:  indices (j, l), returns D[j][l]
    kind Dx: indices (j,), returns Dx[j]
    kind Dp: indices (a, b, c, d), returns P[ab|cd] on -q..q
    """
    suite = estimate_suite(panel, max_lag)
    if kind == "D":
        return suite.D(*indices)
    if kind == "Dx":
        if panel.n_assets != 2:
            raise LengthMismatch("Dx needs two assets")
        return suite.Dx(*indices)
    if kind == "Dp":
        return suite.Dp(*indices)
    raise ValueError(f"unknown three-point kind {kind!r}")


class SmoothFamily(str, Enum):
    POWER_LAW_EXP = "power_law_exp"
    EXP = "exp"


@dataclass
class SmoothFit:
    family: SmoothFamily
    params: dict
    sse: float
    success: bool = True

    def __call__(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)
        p = self.params
        if self.family is SmoothFamily.EXP:
            return p["a"] * np.exp(-p["b"] * tau)
        return p["n"] * np.exp(-p["beta"] * tau) * (1.0 + p["gamma"] * tau) ** (-p["alpha"])


_PLE_NAMES = ("n", "alpha", "beta", "gamma")
_EXP_NAMES = ("a", "b")


def fit_smooth(curve, family="power_law_exp", lags=None) -> SmoothFit:
    """Least-squares fit of a smooth family to a curve sampled on ``lags``.

    Power law with exponential cut-off: n exp(-beta tau) (1 + gamma tau)^-alpha
    with alpha in [0, 5] and beta, gamma in [1e-8, 100]; exponential:
    a exp(-b tau) with b in [1e-8, 100].  Eight deterministic starts, the best
    sum of squared errors wins.
    """
    family = SmoothFamily(family)
    y = np.asarray(curve, dtype=float)
    tau = np.arange(1, y.size + 1, dtype=float) if lags is None else np.asarray(lags, dtype=float)
    if tau.shape != y.shape:
        raise LengthMismatch("curve and lags differ in length")
    n_par = 4 if family is SmoothFamily.POWER_LAW_EXP else 2
    if y.size < n_par + 2:
        raise LengthMismatch(f"need at least {n_par + 2} points to fit {family.value}")
    if not np.all(np.isfinite(y)):
        raise ValueError("curve has non-finite entries")
    scale = float(np.max(np.abs(y)))
    if scale == 0.0:
        names = _PLE_NAMES if family is SmoothFamily.POWER_LAW_EXP else _EXP_NAMES
        params = dict(zip(names, [0.0, 0.0, 1e-8, 1e-8] if n_par == 4 else [0.0, 1e-8]))
        return SmoothFit(family, params, 0.0)
    yn = y / scale
    a0 = yn[0]

    if family is SmoothFamily.EXP:
        def model(p):
            return p[0] * np.exp(-p[1] * tau)
        lb, ub = [-np.inf, 1e-8], [np.inf, 100.0]
        starts = [[a0 * np.exp(b * tau[0]), b] for b in (1e-3, 3e-3, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0)]
    else:
        def model(p):
            return p[0] * np.exp(-p[2] * tau) * (1.0 + p[3] * tau) ** (-p[1])
        lb, ub = [-np.inf, 0.0, 1e-8, 1e-8], [np.inf, 5.0, 100.0, 100.0]
        starts = [
            [a0, al, be, ga]
            for al, be, ga in itertools.islice(
                itertools.product((0.5, 1.5), (1e-3, 0.05), (0.1, 3.0)), 8
            )
        ]

    best = None
    for p0 in starts:
        p0 = np.clip(np.asarray(p0, dtype=float), np.asarray(lb) + 1e-12, np.asarray(ub) - 1e-12)
        try:
            res = least_squares(
                lambda p: model(p) - yn,
                p0,
                bounds=(lb, ub),
                method="trf",
                x_scale="jac",
                xtol=1e-15,
                ftol=1e-15,
                gtol=1e-15,
                max_nfev=5000,
            )
        except (ValueError, FloatingPointError):
            continue
        if not np.all(np.isfinite(res.x)) or not np.isfinite(res.cost):
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise FitDiverged(f"all starts failed for {family.value}")
    p = best.x.copy()
    p[0] *= scale
    names = _PLE_NAMES if family is SmoothFamily.POWER_LAW_EXP else _EXP_NAMES
    fit = SmoothFit(family, dict(zip(names, (float(x) for x in p))), 0.0, bool(best.success))
    fit.sse = float(np.sum((fit(tau) - y) ** 2))
    return fit


def rank_one_approx(offdiag, smooth: bool = False, symmetry_tol: float = 1e-10):
    """Leading-eigenpair reduction of a symmetric matrix with zero diagonal.

    Returns (k, ratio) with k = sqrt(max(lam1, 0)) v1 signed so sum(k) >= 0
    and ratio = lam1 / |lam2| (inf when lam2 = 0).  Ties between leading
    eigenvectors go to the lexicographically larger one.  With ``smooth`` the
    vector is replaced by its exponential fit.
    """
    m = np.array(offdiag, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NonSymmetric("matrix must be square")
    scale = max(float(np.max(np.abs(m))), 1e-300)
    if np.max(np.abs(m - m.T)) > symmetry_tol * scale:
        raise NonSymmetric("matrix is not symmetric")
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 0.0)
    q = m.shape[0]
    if q == 1 or not np.any(m):
        return np.zeros(q), float("inf")
    w, vecs = np.linalg.eigh(m)
    lam1 = w[-1]
    tied = np.flatnonzero(np.abs(w - lam1) <= 1e-12 * max(abs(lam1), 1e-300))
    cands = []
    for idx in tied:
        v = vecs[:, idx].copy()
        if v.sum() < 0 or (v.sum() == 0 and v[np.flatnonzero(v)[0]] < 0):
            v = -v
        cands.append(v)
    v = max(cands, key=lambda x: tuple(np.round(x, 12)))
    k = np.sqrt(max(lam1, 0.0)) * v
    lam2 = w[-2] if len(tied) == 1 else lam1
    ratio = float("inf") if lam2 == 0 else float(lam1 / abs(lam2))
    if smooth and np.any(k):
        k = fit_smooth(k, SmoothFamily.EXP)(np.arange(1, q + 1))
    return k, ratio


def smooth_suite(suite: CovarianceSuite, structures=("C", "Dx", "D", "V")) -> tuple[CovarianceSuite, dict]:
    """Replace right-hand-side structures by smooth fits.

    C and the diagonal of Dx take the power-law-exponential family on lags
    1..q, the off-diagonal of D its exponential-smoothed rank-one reduction,
    and V the exponential family.  Lag-0 anchors and the Dp/Cr/Vr tables are
    kept raw.  Returns the smoothed copy and the fits.
    """
    out = suite.copy()
    q = suite.q
    tau = np.arange(1, q + 1)
    fits = {}
    n = suite.n_assets
    iu = np.triu_indices(q, 1)
    for j in range(n):
        for l in range(n):
            key = (j, l, l)
            tab = out.Dsig_(*key)
            if "C" in structures:
                f = fit_smooth(np.diagonal(tab)[q + 1 :], SmoothFamily.POWER_LAW_EXP)
                fits[("C", j, l)] = f
                tab[q + tau, q + tau] = f(tau)
            if "D" in structures and q > 1:
                sub = tab[q + 1 :, q + 1 :]
                off = np.triu(sub, 1) + np.triu(sub, 1).T
                k, _ = rank_one_approx(off, smooth=True)
                fits[("D", j, l)] = k
                outer = np.outer(k, k)
                sub[iu] = outer[iu]
                sub[iu[1], iu[0]] = outer[iu]
                tab[q + 1 :, q + 1 :] = sub
            if "V" in structures:
                f = fit_smooth(out.Vsig[(j, l)][1:], SmoothFamily.EXP)
                fits[("V", j, l)] = f
                out.Vsig[(j, l)][1:] = f(tau)
        if n == 2 and "Dx" in structures:
            tab = out.Dsig_(j, j, 1 - j)
            f = fit_smooth(np.diagonal(tab)[q + 1 :], SmoothFamily.POWER_LAW_EXP)
            fits[("Dx", j)] = f
            tab[q + tau, q + tau] = f(tau)
    out.meta["smoothed"] = list(structures)
    return out, fits
