"""Yule-Walker calibration: design-matrix builders, block systems and solves.

For target asset j (jb the other asset) the unknowns are grouped in blocks

    phi_self   phi^j_j(k), k = 1..q
    K_self     K^j_j(k1, k2), k1 < k2 <= q
    phi_other  phi^j_jb(k)
    K_other    K^j_jb(k1, k2)
    phix       phi^j_x(k), k = 1..qx
    kx+        coefficient of r_j(t-a) r_jb(t-b), a < b <= qx
    kx-        coefficient of r_j(t-b) r_jb(t-a), a < b <= qx

and the equations in blocks

    C_self, C_other    C[j][l](tau), tau = 1..q          (l = j, jb)
    D_self, D_other    D[j][l](t1, t2), t1 < t2 <= q
    X0                 Dx[j](tau, tau), tau = 1..qx
    X+                 Dx[j](t1, t2), t1 < t2 <= qx
    X-                 Dx[j](t2, t1), t1 < t2 <= qx

Every equation is a covariance between centered sigma_j^2 and a product of
lagged returns, so the baseline drops out.  Pairs are always enumerated in
row-major upper-triangular order.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    LengthMismatch,
    NonStationaryWarning,
    SingularCorrelation,
    SingularSystem,
    StepOrderError,
)
from .model import ModelSpec2D, spectral_radius
from .moments import CovarianceSuite, rank_one_approx

log = logging.getLogger(__name__)

__all__ = [
    "Step",
    "YWBlockSystem",
    "pair_lags",
    "build_A1",
    "build_A2",
    "build_A3",
    "build_A4",
    "build_A5",
    "SystemBlocks",
    "assemble",
    "solve_system",
    "assemble_and_solve",
    "solve_leverage",
    "calibrate",
]

COND_LIMIT = 1e12


class Step(str, Enum):
    SELF_1D = "self1d"
    CROSS_LIN_QUAD = "cross_linquad"
    CROSS_COVARIANCE = "cross_covariance"
    LEVERAGE = "leverage"


STEP_UNKNOWNS = {
    Step.SELF_1D: ("phi_self", "K_self"),
    Step.CROSS_LIN_QUAD: ("phi_other", "K_other"),
    Step.CROSS_COVARIANCE: ("phix", "kx+", "kx-"),
}
STEP_EQUATIONS = {
    Step.SELF_1D: ("C_self", "D_self"),
    Step.CROSS_LIN_QUAD: ("C_other", "D_other"),
    Step.CROSS_COVARIANCE: ("X0", "X+", "X-"),
}
STEP_NUMBER = {Step.SELF_1D: 1, Step.CROSS_LIN_QUAD: 2, Step.CROSS_COVARIANCE: 3, Step.LEVERAGE: 4}


def pair_lags(q: int) -> tuple[np.ndarray, np.ndarray]:
    """One-based lag pairs (k1, k2) with k1 < k2 <= q in upper-triangular order."""
    iu = np.triu_indices(q, 1)
    return iu[0] + 1, iu[1] + 1


# builders


def _vector(values, q: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.size < q - 1:
        raise LengthMismatch(f"{name} needs at least {q - 1} entries, got {arr.size}")
    return arr


def _table(Dp, q: int, offset: Optional[int], lo: int, hi: int) -> tuple[np.ndarray, int]:
    arr = np.asarray(Dp, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise LengthMismatch("Dp must be a square two-lag table")
    off = (arr.shape[0] - 1) // 2 if offset is None else int(offset)
    if off + lo < 0 or off + hi >= arr.shape[0]:
        raise LengthMismatch(f"Dp table of size {arr.shape[0]} (offset {off}) does not cover lags [{lo}, {hi}]")
    return arr, off


def build_A1(D_up, D_down, Sigma, q: int) -> np.ndarray:
    """q x q matrix with Sigma on the diagonal, D_up[m-n-1] above and D_down[n-m-1] below.

    Both vectors are indexed by lag distance starting at 1.
    """
    up = _vector(D_up, q, "D_up")
    down = _vector(D_down, q, "D_down")
    idx = np.arange(q)
    diff = idx[None, :] - idx[:, None]
    out = np.full((q, q), float(Sigma))
    above = diff > 0
    below = diff < 0
    out[above] = up[diff[above] - 1]
    out[below] = down[-diff[below] - 1]
    return out


def build_A2(Dp, q: int, offset: Optional[int] = None) -> np.ndarray:
    """q x q(q-1)/2 matrix, row tau and column (k1, k2) hold 2 Dp(k1 - tau, k2 - tau).

    ``Dp`` is a two-lag table on a centered grid; ``offset`` is the array
    index of lag 0 (default: the middle).
    """
    arr, off = _table(Dp, q, offset, -(q - 1), q - 1)
    k1, k2 = pair_lags(q)
    tau = np.arange(1, q + 1)[:, None]
    return 2.0 * arr[off + k1[None, :] - tau, off + k2[None, :] - tau]


def build_A3(Dp, q: int, offset: Optional[int] = None) -> np.ndarray:
    """Transpose of build_A2 halved: row (t1, t2), column k holds Dp(t1 - k, t2 - k)."""
    return build_A2(Dp, q, offset).T / 2.0


def build_A4(Dp, q: int, offset: Optional[int] = None) -> np.ndarray:
    """Square pair-by-pair matrix: entry [(t1, t2), (k1, k2)] = 2 [k1 == t1] Dp(k2 - t1, t2 - t1)."""
    arr, off = _table(Dp, q, offset, 0, q - 1)
    k1, k2 = pair_lags(q)
    npair = k1.size
    out = np.zeros((npair, npair))
    rows, cols = np.nonzero(k1[None, :] == k1[:, None])
    t1 = k1[rows]
    t2 = k2[rows]
    out[rows, cols] = 2.0 * arr[off + k2[cols] - t1, off + t2 - t1]
    return out


def build_A5(D, q: int) -> np.ndarray:
    """q x q(q-1)/2 matrix, row tau and column (tau, k) hold D(k - tau), D indexed from lag 1."""
    vec = _vector(D, q, "D")
    k1, k2 = pair_lags(q)
    out = np.zeros((q, k1.size))
    cols = np.arange(k1.size)
    out[k1 - 1, cols] = vec[k2 - k1 - 1]
    return out


# block systems


@dataclass
class YWBlockSystem:
    design: np.ndarray
    rhs: np.ndarray
    unknown_layout: list
    step: str
    target: int
    unknown_blocks: list = field(default_factory=list)
    equation_blocks: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.design.shape[0] != self.rhs.shape[0]:
            raise LengthMismatch("design rows and rhs length differ")
        if self.design.shape[1] != len(self.unknown_layout):
            raise LengthMismatch("unknown layout does not cover every column")


class SystemBlocks:
    """Lazily built equation x unknown blocks for one target asset."""

    def __init__(self, suite: CovarianceSuite, target: int, q: Optional[int] = None, q_cross: Optional[int] = None):
        self.suite = suite
        self.j = int(target)
        self.n = suite.n_assets
        self.q = suite.q if q is None else int(q)
        if self.q > suite.q:
            raise LengthMismatch(f"q={self.q} exceeds the suite lag range {suite.q}")
        self.qx = min(self.q, 30) if q_cross is None else int(q_cross)
        if self.qx > self.q:
            raise LengthMismatch("q_cross must not exceed q")
        k1, k2 = pair_lags(self.q)
        self.k1, self.k2 = k1, k2
        self.mx = k2 <= self.qx
        self._cache = {}

    # sizes

    def n_cols(self, unk: str) -> int:
        npair = self.k1.size
        return {
            "phi_self": self.q,
            "K_self": npair,
            "phi_other": self.q,
            "K_other": npair,
            "phix": self.qx,
            "kx+": int(self.mx.sum()),
            "kx-": int(self.mx.sum()),
        }[unk]

    def layout(self, unk: str) -> list:
        j = self.j
        jb = 1 - j
        lags = list(range(1, self.q + 1))
        pairs = list(zip(self.k1.tolist(), self.k2.tolist()))
        xpairs = [p for p, m in zip(pairs, self.mx) if m]
        return {
            "phi_self": [("phi", j, j, k) for k in lags],
            "K_self": [("K", j, j, p) for p in pairs],
            "phi_other": [("phi", j, jb, k) for k in lags],
            "K_other": [("K", j, jb, p) for p in pairs],
            "phix": [("phi_cross", j, jb, k) for k in range(1, self.qx + 1)],
            "kx+": [("k_cross", j, jb, p) for p in xpairs],
            "kx-": [("k_cross", j, jb, (b, a)) for a, b in xpairs],
        }[unk]

    def rhs(self, eq: str) -> np.ndarray:
        s, j, q, qx = self.suite, self.j, self.q, self.qx
        k1, k2, mx = self.k1, self.k2, self.mx
        if eq in ("C_self", "C_other"):
            l = j if eq == "C_self" else 1 - j
            return s.C(j, l)[1 : q + 1]
        if eq in ("D_self", "D_other"):
            l = j if eq == "D_self" else 1 - j
            return s.D(j, l)[k1, k2]
        dx = s.Dx(j)
        if eq == "X0":
            t = np.arange(1, qx + 1)
            return dx[t, t]
        if eq == "X+":
            return dx[k1[mx], k2[mx]]
        if eq == "X-":
            return dx[k2[mx], k1[mx]]
        raise KeyError(eq)

    def block(self, eq: str, unk: str) -> np.ndarray:
        key = (eq, unk)
        if key not in self._cache:
            self._cache[key] = self._build(eq, unk)
        return self._cache[key]

    def _build(self, eq: str, unk: str) -> np.ndarray:
        s, j, q, qx, mx = self.suite, self.j, self.q, self.qx, self.mx
        jb = 1 - j
        S, P = s.S_, s.P_
        kind_u = unk.split("_")[0] if unk.startswith(("phi_", "K_")) else unk
        i = j if unk.endswith("_self") else jb

        if eq in ("C_self", "C_other"):
            l = j if eq == "C_self" else jb
            if kind_u == "phi":
                return build_A1(S(l, l, i, i)[1:], S(i, i, l, l)[1:], S(i, i, l, l)[0], q)
            if kind_u == "K":
                return build_A2(P(l, l, i, i), q)
            if kind_u == "phix":
                return build_A1(S(l, l, j, jb)[1:], S(j, jb, l, l)[1:], S(j, jb, l, l)[0], q)[:, :qx]
            if kind_u == "kx+":
                return build_A2(P(l, l, j, jb), q)[:, mx] / 2.0
            if kind_u == "kx-":
                return build_A2(P(l, l, jb, j), q)[:, mx] / 2.0
        if eq in ("D_self", "D_other"):
            l = j if eq == "D_self" else jb
            if kind_u == "phi":
                return build_A3(P(i, i, l, l), q)
            if kind_u == "K":
                return build_A4(P(i, l, i, l), q)
            if kind_u == "phix":
                return build_A3(P(j, jb, l, l), q)[:, :qx]
            if kind_u == "kx+":
                return build_A4(P(j, l, jb, l), q)[:, mx] / 2.0
            if kind_u == "kx-":
                return build_A4(P(jb, l, j, l), q)[:, mx] / 2.0
        if eq == "X0":
            if kind_u == "phi":
                return build_A1(S(j, jb, i, i)[1:], S(i, i, j, jb)[1:], S(i, i, j, jb)[0], q)[:qx]
            if kind_u == "K":
                return build_A2(P(j, jb, i, i), q)[:qx]
            if kind_u == "phix":
                sx = S(j, jb, j, jb)
                return build_A1(sx[1:], sx[1:], sx[0], q)[:qx, :qx]
            if kind_u == "kx+":
                return build_A2(P(j, jb, j, jb), q)[:qx][:, mx] / 2.0
            if kind_u == "kx-":
                return build_A2(P(j, jb, jb, j), q)[:qx][:, mx] / 2.0
        if eq == "X+":
            if kind_u == "phi":
                return build_A3(P(i, i, j, jb), q)[mx]
            if kind_u == "K":
                return build_A4(P(i, j, i, jb), q)[mx]
            if kind_u == "phix":
                return build_A3(P(j, jb, j, jb), q)[mx][:, :qx]
            if kind_u == "kx+":
                return build_A4(P(j, j, jb, jb), q)[mx][:, mx] / 2.0
            if kind_u == "kx-":
                return build_A4(P(j, jb, j, jb), q)[mx][:, mx] / 2.0
        if eq == "X-":
            if kind_u == "phi":
                return build_A3(P(i, i, jb, j), q)[mx]
            if kind_u == "K":
                return build_A4(P(i, jb, i, j), q)[mx]
            if kind_u == "phix":
                return build_A3(P(j, jb, jb, j), q)[mx][:, :qx]
            if kind_u == "kx+":
                return build_A4(P(j, jb, jb, j), q)[mx][:, mx] / 2.0
            if kind_u == "kx-":
                return build_A4(P(jb, jb, j, j), q)[mx][:, mx] / 2.0
        raise KeyError((eq, unk))


def _unknown_values(model: ModelSpec2D, blocks: SystemBlocks, unk: str) -> np.ndarray:
    """Current values of an unknown block taken from a model."""
    j = blocks.j
    jb = 1 - j
    q, qx = blocks.q, blocks.qx
    k1, k2, mx = blocks.k1, blocks.k2, blocks.mx
    if unk in ("phi_self", "phi_other"):
        i = j if unk == "phi_self" else jb
        return model.phi[j, i, :q].copy()
    if unk in ("K_self", "K_other"):
        i = j if unk == "K_self" else jb
        return model.offdiag_K(j, i)[k1 - 1, k2 - 1]
    if unk == "phix":
        return model.phi_cross[j, :qx].copy()
    if model.k_cross is None:
        return np.zeros(int(mx.sum()))
    tab = model.k_cross[j]
    if unk == "kx+":
        return tab[k1[mx] - 1, k2[mx] - 1]
    return tab[k2[mx] - 1, k1[mx] - 1]


def _available_unknowns(n_assets: int, full_cross: bool, cross_cov: bool) -> list:
    if n_assets == 1:
        return ["phi_self", "K_self"]
    out = ["phi_self", "K_self", "phi_other", "K_other"]
    if cross_cov:
        out.append("phix")
        if full_cross:
            out += ["kx+", "kx-"]
    return out


def assemble(
    blocks: SystemBlocks,
    equations: Sequence[str],
    unknowns: Sequence[str],
    prior: Optional[ModelSpec2D] = None,
    fixed: Sequence[str] = (),
    step: str = "joint",
) -> YWBlockSystem:
    """Stack the chosen blocks; contributions of ``fixed`` blocks move to the rhs."""
    design = np.vstack([np.hstack([blocks.block(e, u) for u in unknowns]) for e in equations])
    rhs = np.concatenate([blocks.rhs(e) for e in equations])
    if prior is not None:
        for u in fixed:
            x = _unknown_values(prior, blocks, u)
            if np.any(x):
                rhs = rhs - np.concatenate([blocks.block(e, u) @ x for e in equations])
    layout = [entry for u in unknowns for entry in blocks.layout(u)]
    return YWBlockSystem(
        design=design,
        rhs=rhs,
        unknown_layout=layout,
        step=step,
        target=blocks.j,
        unknown_blocks=list(unknowns),
        equation_blocks=list(equations),
    )


def solve_system(system: YWBlockSystem, ridge: float = 0.0) -> tuple[np.ndarray, dict]:
    """Least squares by orthogonal factorization with optional Tikhonov ridge."""
    A, b = system.design, system.rhs
    if A.shape[1] == 0:
        return np.zeros(0), {"cond": 1.0, "residual_norm": float(np.linalg.norm(b)), "rank": 0}
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    if ridge > 0:
        A_aug = np.vstack([A, np.sqrt(ridge) * np.eye(A.shape[1])])
        b_aug = np.concatenate([b, np.zeros(A.shape[1])])
    else:
        A_aug, b_aug = A, b
    if not np.any(A):
        if ridge == 0 and np.any(b):
            raise SingularSystem("design matrix is zero")
        return np.zeros(A.shape[1]), {"cond": float("inf"), "residual_norm": float(np.linalg.norm(b)), "rank": 0}
    x, _, rank, sv = scipy.linalg.lstsq(A_aug, b_aug, lapack_driver="gelsd", cond=None)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    if ridge == 0 and cond > COND_LIMIT:
        raise SingularSystem(f"condition number {cond:.3g} exceeds {COND_LIMIT:.0e}")
    resid = float(np.linalg.norm(A @ x - b))
    return x, {"cond": cond, "residual_norm": resid, "rank": int(rank)}


def _write_back(model: ModelSpec2D, blocks: SystemBlocks, unknowns: Sequence[str], x: np.ndarray) -> None:
    j = blocks.j
    jb = 1 - j
    q, qx = blocks.q, blocks.qx
    k1, k2, mx = blocks.k1, blocks.k2, blocks.mx
    pos = 0
    for u in unknowns:
        size = blocks.n_cols(u)
        val = x[pos : pos + size]
        pos += size
        if u in ("phi_self", "phi_other"):
            i = j if u == "phi_self" else jb
            model.phi[j, i, :] = 0.0
            model.phi[j, i, :q] = val
        elif u in ("K_self", "K_other"):
            i = j if u == "K_self" else jb
            if model.K_upper is None:
                model.K_upper = np.zeros((model.n_assets, model.n_assets, model.q, model.q))
                for a in range(model.n_assets):
                    for b in range(model.n_assets):
                        model.K_upper[a, b] = np.triu(model.offdiag_K(a, b), 1)
            tab = np.zeros((model.q, model.q))
            tab[k1 - 1, k2 - 1] = val
            model.K_upper[j, i] = tab
            k_vec, ratio = rank_one_approx(tab + tab.T)
            model.k[j, i] = k_vec
            model.meta.setdefault("eigen_ratio", {})[f"{j + 1}{i + 1}"] = ratio
        elif u == "phix":
            model.phi_cross[j, :] = 0.0
            model.phi_cross[j, :qx] = val
        else:
            if model.k_cross is None:
                model.k_cross = np.zeros((model.n_assets, model.q, model.q))
            if u == "kx+":
                model.k_cross[j, k1[mx] - 1, k2[mx] - 1] = val
            else:
                model.k_cross[j, k2[mx] - 1, k1[mx] - 1] = val


def _steps_done(model: Optional[ModelSpec2D]) -> set:
    if model is None:
        return set()
    return set(model.meta.get("steps_done", []))


def _require(prior: Optional[ModelSpec2D], step: Step, needed: Sequence[Step]) -> None:
    done = _steps_done(prior)
    missing = [s for s in needed if s.value not in done]
    if missing:
        names = ", ".join(str(STEP_NUMBER[s]) for s in missing)
        raise StepOrderError(f"step {STEP_NUMBER[step]} needs completed step(s) {names}")


def _baselines(model: ModelSpec2D, suite: CovarianceSuite) -> None:
    norms = model.norms()
    rho = spectral_radius(norms)
    if rho >= 1.0:
        warnings.warn(f"calibrated feedback has spectral radius {rho:.4g} >= 1", NonStationaryWarning, stacklevel=3)
    base = (np.eye(model.n_assets) - norms) @ suite.mean_sigma2
    model.sigma_inf_sq = np.maximum(base, 0.0)
    model.meta["sigma_inf_sq_raw"] = base.tolist()
    model.meta["spectral_radius"] = rho
    if model.n_assets == 2:
        model.equal_time_cov = float(suite.gamma[0, 1])


def assemble_and_solve(
    suite: CovarianceSuite,
    step,
    prior: Optional[ModelSpec2D] = None,
    q: Optional[int] = None,
    ridge: float = 0.0,
    q_cross: Optional[int] = None,
    full_cross: bool = False,
    cross_cov: bool = True,
    targets: Optional[Sequence[int]] = None,
) -> ModelSpec2D:
    """Run one calibration step and return the updated model.

    Self1D solves the own-asset phi and K of every target; CrossLinQuad the
    cross-asset phi and K; CrossCovariance the covariance feedback phi_x (and
    the off-diagonal cross table with ``full_cross``).  Kernels known from
    ``prior`` are moved to the right-hand side.  Baselines are refreshed
    from the mean relation after each step.
    """
    step = Step(step)
    if step is Step.LEVERAGE:
        raise ValueError("use solve_leverage for the leverage step")
    n = suite.n_assets
    q = suite.q if q is None else int(q)
    if prior is None:
        _require(None, step, [Step.SELF_1D] if step is not Step.SELF_1D else [])
        model = ModelSpec2D.zeros(n, q, suite.mean_sigma2)
    else:
        if prior.n_assets != n or prior.q != q:
            raise LengthMismatch("prior does not match the suite assets or q")
        if step is Step.CROSS_LIN_QUAD:
            _require(prior, step, [Step.SELF_1D])
        elif step is Step.CROSS_COVARIANCE:
            _require(prior, step, [Step.SELF_1D, Step.CROSS_LIN_QUAD])
        model = prior.copy()
    if n == 1 and step is not Step.SELF_1D:
        raise ValueError(f"step {step.value} needs two assets")
    if step is Step.CROSS_COVARIANCE and not cross_cov:
        raise ValueError("cross-covariance step disabled")
    available = _available_unknowns(n, full_cross, cross_cov)
    unknowns = [u for u in STEP_UNKNOWNS[step] if u in available]
    equations = list(STEP_EQUATIONS[step])
    if step is Step.CROSS_COVARIANCE and not full_cross:
        equations = ["X0"]
    fixed = [u for u in available if u not in unknowns]
    diag = model.meta.setdefault("diagnostics", [])
    for j in range(n) if targets is None else targets:
        t0 = time.perf_counter()
        blocks = SystemBlocks(suite, j, q, q_cross)
        system = assemble(blocks, equations, unknowns, model, fixed, step.value)
        x, info = solve_system(system, ridge)
        _write_back(model, blocks, unknowns, x)
        info.update(step=step.value, target=j, seconds=time.perf_counter() - t0, size=list(system.design.shape))
        diag.append(info)
        log.info("step %s target %d: cond %.3g residual %.3g", step.value, j + 1, info["cond"], info["residual_norm"])
    done = _steps_done(model) | {step.value}
    model.meta["steps_done"] = sorted(done)
    _baselines(model, suite)
    return model


def solve_joint(
    suite: CovarianceSuite,
    q: Optional[int] = None,
    ridge: float = 0.0,
    q_cross: Optional[int] = None,
    full_cross: bool = False,
    cross_cov: bool = True,
    targets: Optional[Sequence[int]] = None,
    prior: Optional[ModelSpec2D] = None,
    unknowns: Optional[Sequence[str]] = None,
) -> ModelSpec2D:
    """Solve steps 1-3 as one least-squares system per target.

    ``unknowns`` restricts the solved blocks; the others are held at their
    ``prior`` values.  Used with the factor model to freeze one direction.
    """
    n = suite.n_assets
    q = suite.q if q is None else int(q)
    model = ModelSpec2D.zeros(n, q, suite.mean_sigma2) if prior is None else prior.copy()
    available = _available_unknowns(n, full_cross, cross_cov)
    solve_for = available if unknowns is None else [u for u in available if u in unknowns]
    fixed = [u for u in available if u not in solve_for]
    eq_for = {
        "phi_self": ["C_self"],
        "K_self": ["D_self"],
        "phi_other": ["C_other"],
        "K_other": ["D_other"],
        "phix": ["X0"],
        "kx+": ["X+"],
        "kx-": ["X-"],
    }
    equations = [e for u in solve_for for e in eq_for[u]]
    diag = model.meta.setdefault("diagnostics", [])
    for j in range(n) if targets is None else targets:
        t0 = time.perf_counter()
        blocks = SystemBlocks(suite, j, q, q_cross)
        system = assemble(blocks, equations, solve_for, model, fixed, "joint")
        x, info = solve_system(system, ridge)
        _write_back(model, blocks, solve_for, x)
        info.update(step="joint", target=j, seconds=time.perf_counter() - t0, size=list(system.design.shape))
        diag.append(info)
    steps = {Step.SELF_1D.value}
    if n == 2 and "phi_other" in solve_for + fixed:
        steps.add(Step.CROSS_LIN_QUAD.value)
    if n == 2 and cross_cov:
        steps.add(Step.CROSS_COVARIANCE.value)
    model.meta["steps_done"] = sorted(_steps_done(model) | steps)
    _baselines(model, suite)
    return model


def leverage_corrections(
    suite: CovarianceSuite,
    model: ModelSpec2D,
    target: int,
    q_lev: int,
    quadratic: bool = False,
) -> np.ndarray:
    """Contributions of the non-leverage kernels to V[target][l](tau), shape (n, q_lev)."""
    n = suite.n_assets
    q = model.q
    j = target
    Q = suite.Q_
    out = np.zeros((n, q_lev))
    k1, k2 = pair_lags(q)
    for l in range(n):
        for i in range(n):
            qv = Q(i, i, l)
            out[l] += (build_A1(np.zeros(q), qv[1:], qv[0], q) @ model.phi[j, i])[:q_lev]
            if quadratic:
                kv = model.offdiag_K(j, i)[k1 - 1, k2 - 1]
                out[l] += (2.0 * build_A5(Q(i, l, i)[1:], q) @ kv)[:q_lev]
        if n == 2:
            jb = 1 - j
            qv = Q(j, jb, l)
            out[l] += (build_A1(np.zeros(q), qv[1:], qv[0], q) @ model.phi_cross[j])[:q_lev]
            if quadratic and model.k_cross is not None:
                tab = model.k_cross[j]
                plus = tab[k1 - 1, k2 - 1]
                minus = tab[k2 - 1, k1 - 1]
                out[l] += (build_A5(Q(j, l, jb)[1:], q) @ plus)[:q_lev]
                out[l] += (build_A5(Q(jb, l, j)[1:], q) @ minus)[:q_lev]
    return out


def solve_leverage(
    suite: CovarianceSuite,
    calibrated: ModelSpec2D,
    q: Optional[int] = None,
    quadratic: bool = False,
    targets: Optional[Sequence[int]] = None,
    require_steps: bool = True,
) -> ModelSpec2D:
    """Leverage kernels from V once the quadratic feedback is known.

    V[j][l](tau) minus the phi and phi_x contributions (and the K terms with
    ``quadratic``) equals sum_i L^j_i(tau) Gamma[i, l], solved lag by lag.
    ``suite`` must come from the un-mirrored panel.
    """
    n = suite.n_assets
    if require_steps:
        needed = [Step.SELF_1D] if n == 1 else [Step.SELF_1D, Step.CROSS_LIN_QUAD]
        _require(calibrated, Step.LEVERAGE, needed)
    q_lev = min(calibrated.q, 30) if q is None else int(q)
    if q_lev > min(suite.q, calibrated.q):
        raise LengthMismatch("leverage lag range exceeds the suite or model q")
    gamma = suite.gamma
    if n == 1:
        if gamma[0, 0] <= 0:
            raise SingularCorrelation("zero return variance")
    else:
        det = np.linalg.det(gamma)
        if not det > 1e-12 * max(gamma[0, 0] * gamma[1, 1], 1e-300):
            raise SingularCorrelation("equal-time return covariance is singular")
    model = calibrated.copy()
    for j in range(n) if targets is None else targets:
        corr = leverage_corrections(suite, calibrated, j, q_lev, quadratic)
        v = np.stack([suite.V(j, l)[1 : q_lev + 1] for l in range(n)])
        vt = v - corr
        lev = np.linalg.solve(gamma, vt)
        model.leverage[j, :, :] = 0.0
        model.leverage[j, :, :q_lev] = lev
    model.meta["steps_done"] = sorted(_steps_done(model) | {Step.LEVERAGE.value})
    model.meta["leverage_quadratic"] = bool(quadratic)
    return model


def _kernel_vector(model: ModelSpec2D) -> np.ndarray:
    parts = [model.phi.ravel(), model.phi_cross.ravel()]
    parts += [model.offdiag_K(a, b).ravel() for a in range(model.n_assets) for b in range(model.n_assets)]
    if model.k_cross is not None:
        parts.append(model.k_cross.ravel())
    return np.concatenate(parts)


def calibrate(
    suite: CovarianceSuite,
    leverage_suite: Optional[CovarianceSuite] = None,
    q: Optional[int] = None,
    q_cross: Optional[int] = None,
    steps: Sequence[int] = (1, 2, 3, 4),
    ridge: float = 0.0,
    sweeps: int = 1,
    method: str = "sequential",
    full_cross: bool = False,
    leverage_quadratic: bool = False,
    tol: Optional[float] = None,
) -> ModelSpec2D:
    """Run the four calibration steps.

    ``method="sequential"`` runs steps 1-3 in order, ``sweeps`` times, each
    pass using the previous estimates of the other blocks, stopping early once
    no kernel value moves by more than ``tol``; ``"joint"`` solves steps 1-3
    together, which is the fixed point of the sweeps.  Step 4 needs ``leverage_suite`` estimated on the
    un-mirrored panel.
    """
    steps = sorted(set(int(s) for s in steps))
    n = suite.n_assets
    if n == 1:
        steps = [s for s in steps if s in (1, 4)]
    if any(s not in (1, 2, 3, 4) for s in steps):
        raise ValueError("steps must be among 1, 2, 3, 4")
    for s in steps:
        needed = [x for x in (1, 2, 3) if x < s and (n == 2 or x == 1)]
        if s == 4 and n == 2:
            needed = [1, 2]
        missing = [x for x in needed if x not in steps]
        if missing:
            raise StepOrderError(f"step {s} requested without step(s) {missing}")
    cross_cov = 3 in steps
    model = None
    if method == "joint":
        if steps and steps != [4]:
            model = solve_joint(suite, q, ridge, q_cross, full_cross, cross_cov=cross_cov)
    elif method == "sequential":
        if sweeps < 1:
            raise ValueError("sweeps must be >= 1")
        done_sweeps = 0
        for _ in range(sweeps):
            before = None if model is None else _kernel_vector(model)
            for s, st in ((1, Step.SELF_1D), (2, Step.CROSS_LIN_QUAD), (3, Step.CROSS_COVARIANCE)):
                if s in steps:
                    model = assemble_and_solve(
                        suite, st, model, q, ridge, q_cross, full_cross, cross_cov=cross_cov
                    )
            done_sweeps += 1
            if tol is not None and before is not None:
                change = float(np.max(np.abs(_kernel_vector(model) - before)))
                if change < tol:
                    break
        if model is not None:
            model.meta["sweeps_run"] = done_sweeps
    else:
        raise ValueError(f"unknown method {method!r}")
    if 4 in steps:
        if leverage_suite is None:
            raise ValueError("step 4 needs a suite from the un-mirrored panel")
        model = solve_leverage(leverage_suite, model, q_cross, quadratic=leverage_quadratic)
    model.meta["method"] = method
    model.meta["sweeps"] = sweeps
    model.meta["smoothed"] = suite.meta.get("smoothed", [])
    return model
