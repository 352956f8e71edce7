"""Kernel and model types for the bivariate quadratic ARCH / Hawkes family.

All lag grids are indexed by lag tau = 1..q and stored as numpy arrays whose
position ``tau - 1`` holds the value at lag ``tau``.  Asset indices are
zero-based in code and one-based in CSV files.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import InsufficientHistory, LengthMismatch, NonStationary

__all__ = [
    "KernelKind",
    "ExponentialKernelParams",
    "QuadraticKernelGrid",
    "ModelSpec2D",
    "PointProcessSpec",
    "kernel_grid",
    "kernel_l1_norm",
    "norm_matrix",
    "spectral_radius",
    "mean_squared_vol",
    "evaluate_sigma2",
    "zhawkes_model",
]


class KernelKind(str, Enum):
    LINEAR = "linear"
    ZUMBACH = "zumbach"
    LEVERAGE = "leverage"


@dataclass(frozen=True)
class ExponentialKernelParams:
    """Closed-form exponential kernel.

    ``norm`` is n_H for a linear kernel, n_Z for a Zumbach kernel and the
    (signed) amplitude for a leverage kernel; ``rate`` is the decay in bin^-1.
    """

    norm: float
    rate: float
    kind: KernelKind = KernelKind.LINEAR

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if not np.isfinite(self.rate) or self.rate <= 0:
            raise ValueError(f"rate must be > 0, got {self.rate}")
        if not np.isfinite(self.norm):
            raise ValueError("norm must be finite")
        if self.kind is not KernelKind.LEVERAGE and self.norm < 0:
            raise ValueError(f"{self.kind.value} norm must be >= 0, got {self.norm}")

    def tabulate(self, q: int) -> np.ndarray:
        """Kernel values on lags 1..q."""
        tau = np.arange(1, q + 1, dtype=float)
        decay = np.exp(-self.rate * tau)
        if self.kind is KernelKind.LINEAR:
            return self.norm * self.rate * decay
        if self.kind is KernelKind.ZUMBACH:
            return np.sqrt(2.0 * self.norm * self.rate) * decay
        return self.norm * decay

    def intensity_weight(self) -> float:
        """Prefactor of exp(-rate * t) in the continuous-time kernel."""
        if self.kind is KernelKind.LINEAR:
            return self.norm * self.rate
        if self.kind is KernelKind.ZUMBACH:
            return 2.0 * self.norm * self.rate
        return self.norm


def kernel_grid(values, q: Optional[int] = None) -> np.ndarray:
    """Validate a lag grid and return it as a float array."""
    arr = np.array(values, dtype=float, copy=True)
    if arr.ndim != 1:
        raise LengthMismatch("kernel grid must be one-dimensional")
    if q is not None and arr.shape[0] != q:
        raise LengthMismatch(f"kernel grid has length {arr.shape[0]}, expected {q}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("kernel grid has non-finite entries")
    return arr


def kernel_l1_norm(values, absolute: bool = False) -> float:
    """Sum of a kernel grid over lags 1..q.

    The signed sum is the feedback norm; ``absolute=True`` gives the sum of
    absolute values.  Square the entries first for the ||k^2|| convention.
    """
    arr = kernel_grid(values)
    if absolute:
        return float(np.abs(arr).sum())
    return float(arr.sum())


def spectral_radius(norms) -> float:
    """Largest absolute eigenvalue of a square norm matrix."""
    mat = np.atleast_2d(np.asarray(norms, dtype=float))
    if not np.all(np.isfinite(mat)):
        raise ValueError("norm matrix has non-finite entries")
    return float(np.max(np.abs(np.linalg.eigvals(mat))))


def mean_squared_vol(phi_norms, sigma_inf_sq) -> np.ndarray:
    """Stationary mean of sigma^2: (I - N)^-1 sigma_inf^2."""
    mat = np.atleast_2d(np.asarray(phi_norms, dtype=float))
    base = np.atleast_1d(np.asarray(sigma_inf_sq, dtype=float))
    if mat.shape != (base.size, base.size):
        raise LengthMismatch("norm matrix and baseline sizes differ")
    rho = spectral_radius(mat)
    if rho >= 1.0 - 1e-10:
        raise NonStationary(f"spectral radius {rho:.6g} >= 1")
    eye = np.eye(base.size)
    try:
        inv = np.linalg.inv(eye - mat)
    except np.linalg.LinAlgError as exc:
        raise NonStationary("I - N is singular") from exc
    if np.all(mat >= 0) and np.any(inv < 0):
        raise NonStationary("(I - N)^-1 has negative entries")
    return inv @ base


@dataclass(frozen=True)
class QuadraticKernelGrid:
    """Time-diagonal plus off-diagonal description of a quadratic kernel K.

    When ``full_upper`` is given it is the raw off-diagonal table and takes
    precedence over ``rank_one`` in :meth:`matrix`.
    """

    diag: np.ndarray
    rank_one: Optional[np.ndarray] = None
    full_upper: Optional[np.ndarray] = None

    @property
    def q(self) -> int:
        return int(self.diag.shape[0])

    def offdiag(self) -> np.ndarray:
        q = self.q
        if self.full_upper is not None:
            upper = np.triu(np.asarray(self.full_upper, dtype=float), 1)
            return upper + upper.T
        if self.rank_one is None:
            return np.zeros((q, q))
        out = np.outer(self.rank_one, self.rank_one)
        np.fill_diagonal(out, 0.0)
        return out

    def matrix(self) -> np.ndarray:
        out = self.offdiag()
        out[np.diag_indices(self.q)] = self.diag
        return out

    @classmethod
    def from_matrix(cls, mat, rank_one=None) -> "QuadraticKernelGrid":
        mat = np.asarray(mat, dtype=float)
        return cls(diag=np.diag(mat).copy(), rank_one=rank_one, full_upper=np.triu(mat, 1))


def _as_stack(values, shape, name) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    if arr.shape != shape:
        raise LengthMismatch(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


@dataclass
class ModelSpec2D:
    """Complete kernel set of a one- or two-asset MQARCH model.

    Array layouts (``n`` assets, ``q`` lags; index order is target, source):

    phi : (n, n, q)
        Time-diagonal of K, the coefficient of r^2.
    k : (n, n, q)
        Rank-one vectors; off-diagonal K(t1, t2) = k(t1) k(t2).
    leverage : (n, n, q)
    phi_cross : (n, q)
        Coefficient of r_i r_j - C for the equal-time covariance feedback.
    sigma_inf_sq : (n,)
    K_upper : (n, n, q, q), optional
        Raw off-diagonal table; only entries t1 < t2 are read.
    k_cross : (n, q, q), optional
        Off-diagonal cross kernel, entry (t1, t2) multiplies r_i(t-t1) r_j(t-t2).
    """

    phi: np.ndarray
    sigma_inf_sq: np.ndarray
    k: Optional[np.ndarray] = None
    leverage: Optional[np.ndarray] = None
    phi_cross: Optional[np.ndarray] = None
    equal_time_cov: float = 0.0
    K_upper: Optional[np.ndarray] = None
    k_cross: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        phi = np.array(self.phi, dtype=float, copy=True)
        if phi.ndim != 3 or phi.shape[0] != phi.shape[1] or phi.shape[0] not in (1, 2):
            raise LengthMismatch(f"phi must have shape (n, n, q) with n in (1, 2), got {phi.shape}")
        n, _, q = phi.shape
        if q < 1:
            raise LengthMismatch("q must be >= 1")
        self.phi = _as_stack(phi, (n, n, q), "phi")
        self.sigma_inf_sq = _as_stack(np.atleast_1d(self.sigma_inf_sq), (n,), "sigma_inf_sq")
        if np.any(self.sigma_inf_sq < 0):
            raise ValueError("sigma_inf_sq must be >= 0")
        self.k = np.zeros((n, n, q)) if self.k is None else _as_stack(self.k, (n, n, q), "k")
        self.leverage = (
            np.zeros((n, n, q)) if self.leverage is None else _as_stack(self.leverage, (n, n, q), "leverage")
        )
        self.phi_cross = (
            np.zeros((n, q)) if self.phi_cross is None else _as_stack(self.phi_cross, (n, q), "phi_cross")
        )
        if self.K_upper is not None:
            self.K_upper = np.triu(_as_stack(self.K_upper, (n, n, q, q), "K_upper"), 1)
        if self.k_cross is not None:
            kx = _as_stack(self.k_cross, (n, q, q), "k_cross")
            for i in range(n):
                np.fill_diagonal(kx[i], 0.0)
            self.k_cross = kx
        self.equal_time_cov = float(self.equal_time_cov)

    @classmethod
    def zeros(cls, n_assets: int, q: int, sigma_inf_sq=None) -> "ModelSpec2D":
        base = np.ones(n_assets) if sigma_inf_sq is None else sigma_inf_sq
        return cls(phi=np.zeros((n_assets, n_assets, q)), sigma_inf_sq=base)

    @property
    def n_assets(self) -> int:
        return int(self.phi.shape[0])

    @property
    def q(self) -> int:
        return int(self.phi.shape[2])

    def copy(self, **changes) -> "ModelSpec2D":
        base = {
            "phi": self.phi.copy(),
            "sigma_inf_sq": self.sigma_inf_sq.copy(),
            "k": self.k.copy(),
            "leverage": self.leverage.copy(),
            "phi_cross": self.phi_cross.copy(),
            "K_upper": None if self.K_upper is None else self.K_upper.copy(),
            "k_cross": None if self.k_cross is None else self.k_cross.copy(),
            "meta": dict(self.meta),
        }
        return replace(self, **{**base, **changes})

    def quad(self, i: int, j: int) -> QuadraticKernelGrid:
        upper = None if self.K_upper is None else self.K_upper[i, j]
        return QuadraticKernelGrid(diag=self.phi[i, j].copy(), rank_one=self.k[i, j].copy(), full_upper=upper)

    def offdiag_K(self, i: int, j: int) -> np.ndarray:
        """Symmetric off-diagonal part of K^i_j with a zero diagonal."""
        return self.quad(i, j).offdiag()

    def uses_table(self) -> bool:
        return self.K_upper is not None

    def norms(self) -> np.ndarray:
        """Matrix of signed phi sums, N[i, j] = sum_tau phi^i_j(tau)."""
        return self.phi.sum(axis=2)

    def spectral_radius(self) -> float:
        return spectral_radius(self.norms())

    def mean_sigma2(self) -> np.ndarray:
        return mean_squared_vol(self.norms(), self.sigma_inf_sq)


def norm_matrix(model: ModelSpec2D) -> np.ndarray:
    return model.norms()


def evaluate_sigma2(model: ModelSpec2D, history, target: int) -> float:
    """sigma^2 of ``target`` given past returns.

    ``history`` has one row per asset; the last column is the most recent
    return (lag 1).  Sums are truncated at ``model.q``.
    """
    hist = np.atleast_2d(np.asarray(history, dtype=float))
    n, q = model.n_assets, model.q
    if hist.shape[0] != n:
        raise LengthMismatch(f"history has {hist.shape[0]} rows for {n} assets")
    if hist.shape[1] < q:
        raise InsufficientHistory(f"need {q} past returns, got {hist.shape[1]}")
    lagged = hist[:, ::-1][:, :q]
    i = target
    value = model.sigma_inf_sq[i]
    for j in range(n):
        h = lagged[j]
        value += model.leverage[i, j] @ h
        value += model.phi[i, j] @ (h * h)
        value += h @ model.offdiag_K(i, j) @ h
    if n == 2:
        ib = 1 - i
        prod = lagged[i] * lagged[ib]
        value += model.phi_cross[i] @ (prod - model.equal_time_cov)
        if model.k_cross is not None:
            value += lagged[i] @ model.k_cross[i] @ lagged[ib]
    return float(value)


def _param_grid(values, n: int, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(values, dtype=float), (n, n)) if np.ndim(values) < 2 else np.asarray(values, dtype=float)
    if arr.shape != (n, n):
        raise LengthMismatch(f"{name} must be ({n}, {n})")
    return np.array(arr, dtype=float)


def zhawkes_model(
    n_H,
    beta,
    n_Z,
    omega,
    sigma_inf_sq,
    q: int,
    leverage: Optional[Sequence] = None,
    diag_includes_k2: bool = True,
) -> ModelSpec2D:
    """Tabulate exponential Hawkes and Zumbach kernels into a model.

    Parameters are (n, n) arrays indexed (target, source) or scalars for one
    asset.  With ``diag_includes_k2`` the time-diagonal is phi + k^2, the
    diagonal of K(t1, t2) = phi(t1) delta + k(t1) k(t2).  ``leverage`` is an
    optional (n, n) nested sequence of (amplitude, rate) pairs or None.
    """
    base = np.atleast_1d(np.asarray(sigma_inf_sq, dtype=float))
    n = base.size
    nh, bt = _param_grid(n_H, n, "n_H"), _param_grid(beta, n, "beta")
    nz, om = _param_grid(n_Z, n, "n_Z"), _param_grid(omega, n, "omega")
    phi = np.zeros((n, n, q))
    k = np.zeros((n, n, q))
    lev = np.zeros((n, n, q))
    for i in range(n):
        for j in range(n):
            if nh[i, j] > 0:
                phi[i, j] = ExponentialKernelParams(nh[i, j], bt[i, j], KernelKind.LINEAR).tabulate(q)
            if nz[i, j] > 0:
                k[i, j] = ExponentialKernelParams(nz[i, j], om[i, j], KernelKind.ZUMBACH).tabulate(q)
                if diag_includes_k2:
                    phi[i, j] += k[i, j] ** 2
            if leverage is not None and leverage[i][j] is not None:
                amp, rate = leverage[i][j]
                lev[i, j] = ExponentialKernelParams(amp, rate, KernelKind.LEVERAGE).tabulate(q)
    return ModelSpec2D(phi=phi, k=k, leverage=lev, sigma_inf_sq=base)


@dataclass(frozen=True)
class PointProcessSpec:
    """Exponential-kernel quadratic Hawkes specification.

    ``phi``, ``k`` and ``leverage`` are n x n nested tuples (target, source)
    of :class:`ExponentialKernelParams` or None.
    """

    lambda_inf: tuple
    phi: tuple
    k: tuple
    leverage: tuple

    def __post_init__(self) -> None:
        lam = tuple(float(x) for x in np.atleast_1d(self.lambda_inf))
        n = len(lam)
        if n not in (1, 2):
            raise LengthMismatch("one or two assets supported")
        if any(x <= 0 for x in lam):
            raise ValueError("lambda_inf must be > 0")
        object.__setattr__(self, "lambda_inf", lam)
        for name in ("phi", "k", "leverage"):
            grid = getattr(self, name)
            if grid is None:
                grid = ((None,) * n,) * n
            grid = tuple(tuple(row) for row in grid)
            if len(grid) != n or any(len(row) != n for row in grid):
                raise LengthMismatch(f"{name} must be {n} x {n}")
            object.__setattr__(self, name, grid)

    @property
    def n_assets(self) -> int:
        return len(self.lambda_inf)

    @classmethod
    def one_dim(cls, lambda_inf, n_H=0.0, beta=1.0, n_Z=0.0, omega=1.0, leverage=None) -> "PointProcessSpec":
        phi = ExponentialKernelParams(n_H, beta, KernelKind.LINEAR) if n_H > 0 else None
        k = ExponentialKernelParams(n_Z, omega, KernelKind.ZUMBACH) if n_Z > 0 else None
        lev = None
        if leverage is not None:
            lev = ExponentialKernelParams(leverage[0], leverage[1], KernelKind.LEVERAGE)
        return cls(lambda_inf=(lambda_inf,), phi=((phi,),), k=((k,),), leverage=((lev,),))

    def _arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        n = self.n_assets
        weight = np.zeros((n, n))
        rate = np.ones((n, n))
        for i in range(n):
            for j in range(n):
                p = getattr(self, name)[i][j]
                if p is not None:
                    weight[i, j] = p.intensity_weight()
                    rate[i, j] = p.rate
        return weight, rate

    def kernel_arrays(self) -> dict:
        """Intensity prefactors and decay rates as (n, n) arrays."""
        out = {}
        for name in ("phi", "k", "leverage"):
            out[name + "_weight"], out[name + "_rate"] = self._arrays(name)
        return out

    def norms(self) -> np.ndarray:
        """Continuous norms n_H + n_Z per (target, source)."""
        n = self.n_assets
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                for p in (self.phi[i][j], self.k[i][j]):
                    if p is not None:
                        out[i, j] += p.norm
        return out

    def mean_rate(self) -> np.ndarray:
        return mean_squared_vol(self.norms(), self.lambda_inf)
