"""Parametric maximum likelihood for exponential (Z)Hawkes kernels.

Two likelihoods are provided: the exact one on event times, and a binned
proxy that treats each bin's count as Poisson with an intensity driven by the
observed squared volatility and returns of earlier bins of the same day.

Kernels follow the tabulation conventions of :mod:`mqarch.model`:
h(t) = n_H beta exp(-beta t) and k(t) = sqrt(2 n_Z omega) exp(-omega t), so
the intensity of asset j is

    lambda_j = lambda_inf_j + sum_i n_H[j,i] beta[j,i] H_ji + sum_i 2 n_Z[j,i] omega[j,i] Z_ji^2

with H_ji, Z_ji exponentially weighted counts and mark sums of asset i.
All positive parameters are optimized in log coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
import scipy.optimize
from scipy.signal import lfilter

from ._backend import kernels
from .errors import LengthMismatch, NonPositiveIntensity
from .model import ExponentialKernelParams, KernelKind, ModelSpec2D, PointProcessSpec
from .panel import BinnedPanel, EventStream, SimulatedPanel

log = logging.getLogger(__name__)

__all__ = [
    "MLEMode",
    "ExpParams",
    "MLEProblem",
    "MLEResult",
    "loglik_exact",
    "grad_exact",
    "loglik_binned_proxy",
    "grad_binned_proxy",
    "maximize",
    "fisher_stderr",
    "warm_start_from_model",
]

GTOL = 1e-6
MAX_ITER = 500
KERNEL_FIELDS = ("n_H", "beta", "n_Z", "omega")


class MLEMode(str, Enum):
    EXACT_LINEAR = "exact_linear"
    EXACT_ZHAWKES = "exact_zhawkes"
    EXACT_2D = "exact_2d"
    BINNED_PROXY_2D = "binned_proxy_2d"


@dataclass
class ExpParams:
    """Exponential kernel parameters, arrays indexed (target, source)."""

    lambda_inf: np.ndarray
    n_H: np.ndarray
    beta: np.ndarray
    n_Z: np.ndarray
    omega: np.ndarray

    def __post_init__(self) -> None:
        self.lambda_inf = np.atleast_1d(np.asarray(self.lambda_inf, dtype=float)).copy()
        n = self.lambda_inf.size
        for name in KERNEL_FIELDS:
            arr = np.asarray(getattr(self, name), dtype=float)
            arr = np.broadcast_to(arr, (n, n)).copy() if arr.ndim < 2 else arr.copy()
            if arr.shape != (n, n):
                raise LengthMismatch(f"{name} must be ({n}, {n})")
            setattr(self, name, arr)
        if np.any(self.beta <= 0) or np.any(self.omega <= 0):
            raise ValueError("decay rates must be > 0")
        if np.any(self.n_H < 0) or np.any(self.n_Z < 0) or np.any(self.lambda_inf <= 0):
            raise ValueError("baselines must be > 0 and norms >= 0")

    @property
    def n_assets(self) -> int:
        return self.lambda_inf.size

    def names(self) -> list:
        n = self.n_assets
        out = [f"lambda_inf[{j}]" for j in range(n)]
        for j in range(n):
            for i in range(n):
                out += [f"{f}[{j},{i}]" for f in KERNEL_FIELDS]
        return out

    def to_vector(self) -> np.ndarray:
        n = self.n_assets
        parts = [self.lambda_inf]
        for j in range(n):
            for i in range(n):
                parts.append([getattr(self, f)[j, i] for f in KERNEL_FIELDS])
        return np.concatenate([np.ravel(p) for p in parts])

    @classmethod
    def from_vector(cls, vec, n_assets: int) -> "ExpParams":
        vec = np.asarray(vec, dtype=float)
        n = n_assets
        if vec.size != n + 4 * n * n:
            raise LengthMismatch("parameter vector has the wrong length")
        grids = vec[n:].reshape(n, n, 4)
        return cls(vec[:n], *(grids[:, :, k] for k in range(4)))

    def as_dict(self) -> dict:
        return dict(zip(self.names(), self.to_vector().tolist()))

    def to_spec(self) -> PointProcessSpec:
        n = self.n_assets

        def grid(norm, rate, kind):
            return tuple(
                tuple(
                    ExponentialKernelParams(norm[j, i], rate[j, i], kind) if norm[j, i] > 0 else None
                    for i in range(n)
                )
                for j in range(n)
            )

        return PointProcessSpec(
            lambda_inf=tuple(self.lambda_inf),
            phi=grid(self.n_H, self.beta, KernelKind.LINEAR),
            k=grid(self.n_Z, self.omega, KernelKind.ZUMBACH),
            leverage=None,
        )

    @classmethod
    def from_spec(cls, spec: PointProcessSpec) -> "ExpParams":
        n = spec.n_assets
        arr = {f: np.zeros((n, n)) for f in KERNEL_FIELDS}
        arr["beta"][:] = 1.0
        arr["omega"][:] = 1.0
        for j in range(n):
            for i in range(n):
                if spec.phi[j][i] is not None:
                    arr["n_H"][j, i], arr["beta"][j, i] = spec.phi[j][i].norm, spec.phi[j][i].rate
                if spec.k[j][i] is not None:
                    arr["n_Z"][j, i], arr["omega"][j, i] = spec.k[j][i].norm, spec.k[j][i].rate
                if spec.leverage[j][i] is not None:
                    log.warning("leverage kernel (%d, %d) ignored by the likelihood", j, i)
        return cls(np.array(spec.lambda_inf), **arr)


@dataclass
class MLEProblem:
    """Data, starting parameters and mode of one likelihood fit.

    ``data`` is an EventStream (or a list of them) for the exact modes and a
    SimulatedPanel or BinnedPanel for the proxy mode.  Parameters that are
    zero in ``params`` (norms and the rates attached to them) stay fixed, as
    does every name listed in ``fixed``.  In proxy mode ``dt`` is the bin
    length and ``bins_per_day`` splits a SimulatedPanel into days (default:
    one day).
    """

    data: object
    params: ExpParams
    mode: MLEMode
    fixed: Sequence[str] = ()
    dt: float = 1.0
    bins_per_day: Optional[int] = None
    _free: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.mode = MLEMode(self.mode)
        if isinstance(self.params, PointProcessSpec):
            self.params = ExpParams.from_spec(self.params)
        n = self.params.n_assets
        if self.mode is MLEMode.BINNED_PROXY_2D:
            lam_hat, ret = _proxy_arrays(self.data, self.dt, self.bins_per_day)
            if lam_hat.shape[0] != n:
                raise LengthMismatch("panel and parameters disagree on the number of assets")
            self._lam_hat, self._ret = lam_hat, ret
        else:
            streams = [self.data] if isinstance(self.data, EventStream) else list(self.data)
            if len(streams) != n:
                raise LengthMismatch("need one event stream per asset")
            want = 1 if self.mode in (MLEMode.EXACT_LINEAR, MLEMode.EXACT_ZHAWKES) else 2
            if n != want:
                raise LengthMismatch(f"mode {self.mode.value} needs {want} asset(s)")
            self._streams = streams
        names = self.params.names()
        unknown = set(self.fixed) - set(names)
        if unknown:
            raise ValueError(f"unknown parameter names {sorted(unknown)}")
        vec = self.params.to_vector()
        free = np.array([v > 0 and nm not in self.fixed for nm, v in zip(names, vec)])
        grids = free[n:].reshape(n, n, 4)
        # a rate is only identifiable when its norm is free or nonzero
        grids[:, :, 1] &= vec[n:].reshape(n, n, 4)[:, :, 0] > 0
        grids[:, :, 3] &= vec[n:].reshape(n, n, 4)[:, :, 2] > 0
        if self.mode is MLEMode.EXACT_LINEAR:
            grids[:, :, 2:] = False
        free[n:] = grids.ravel()
        self._free = free

    @property
    def free_names(self) -> list:
        return [nm for nm, f in zip(self.params.names(), self._free) if f]

    def n_obs(self) -> int:
        if self.mode is MLEMode.BINNED_PROXY_2D:
            return int(self._lam_hat.size)
        return max(1, sum(len(s) for s in self._streams))

    def to_log(self, params: ExpParams) -> np.ndarray:
        return np.log(params.to_vector()[self._free])

    def from_log(self, u) -> ExpParams:
        vec = self.params.to_vector()
        vec[self._free] = np.exp(u)
        return ExpParams.from_vector(vec, self.params.n_assets)


def _proxy_arrays(data, dt: float, bins_per_day: Optional[int]):
    """(asset, day, bin) arrays of the intensity proxy sigma^2/dt and returns."""
    if isinstance(data, BinnedPanel):
        return data.sigma2 / dt, data.returns
    if isinstance(data, SimulatedPanel):
        n, T = data.returns.shape
        bpd = T if bins_per_day is None else int(bins_per_day)
        days = T // bpd
        if days < 1:
            raise LengthMismatch("fewer bins than one day")
        used = days * bpd
        return (
            data.sigma2[:, :used].reshape(n, days, bpd) / dt,
            data.returns[:, :used].reshape(n, days, bpd),
        )
    raise TypeError("proxy mode needs a SimulatedPanel or BinnedPanel")


# exact event-time likelihood


def _states_at(src_times, post, dpost, rate, query):
    """Left limits at ``query`` of a post-event exponential state and its rate derivative."""
    idx = np.searchsorted(src_times, query, side="left") - 1
    ok = idx >= 0
    out = np.zeros(query.size)
    dout = np.zeros(query.size)
    if np.any(ok):
        k = idx[ok]
        gap = query[ok] - src_times[k]
        e = np.exp(-rate * gap)
        out[ok] = post[k] * e
        dout[ok] = (dpost[k] - gap * post[k]) * e
    return out, dout


def _exact(problem: MLEProblem, params: ExpParams, want_grad: bool):
    n = params.n_assets
    streams = problem._streams
    T = max(s.horizon for s in streams)
    vec_grad = np.zeros(params.to_vector().size)
    gview = vec_grad[n:].reshape(n, n, 4)
    total = 0.0
    for j in range(n):
        tq = streams[j].times
        lam = np.full(tq.size, params.lambda_inf[j])
        dlam = {}
        comp = params.lambda_inf[j] * T
        vec_grad[j] -= T
        dlam_base = np.ones(tq.size)
        for i in range(n):
            src = streams[i]
            nh, b = params.n_H[j, i], params.beta[j, i]
            nz, w = params.n_Z[j, i], params.omega[j, i]
            if nh > 0 and src.times.size:
                post, dpost = kernels.exp_states(src.times, np.ones(src.times.size), b)
                H, dH = _states_at(src.times, post, dpost, b, tq)
                lam += nh * b * H
                dlam[(i, 0)] = b * H
                dlam[(i, 1)] = nh * (H + b * dH)
                tail = T - src.times
                et = np.exp(-b * tail)
                comp += nh * np.sum(1.0 - et)
                gview[j, i, 0] -= np.sum(1.0 - et)
                gview[j, i, 1] -= nh * np.sum(tail * et)
            if nz > 0 and src.times.size:
                post, dpost = kernels.exp_states(src.times, src.marks, w)
                Z, dZ = _states_at(src.times, post, dpost, w, tq)
                lam += 2.0 * nz * w * Z * Z
                dlam[(i, 2)] = 2.0 * w * Z * Z
                dlam[(i, 3)] = 2.0 * nz * (Z * Z + 2.0 * w * Z * dZ)
                # between source events Z decays from its post-event value
                gap = np.diff(np.append(src.times, T))
                e2 = np.exp(-2.0 * w * gap)
                g = (1.0 - e2) / (2.0 * w)
                dg = gap * e2 / w - (1.0 - e2) / (2.0 * w * w)
                comp += 2.0 * nz * w * np.sum(post * post * g)
                gview[j, i, 2] -= 2.0 * w * np.sum(post * post * g)
                gview[j, i, 3] -= 2.0 * nz * np.sum(post * post * g + w * (2.0 * post * dpost * g + post * post * dg))
        if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
            raise NonPositiveIntensity(f"intensity of asset {j} is not positive at an event")
        total += float(np.sum(np.log(lam))) - comp
        if want_grad:
            inv = 1.0 / lam
            vec_grad[j] += np.sum(dlam_base * inv)
            for (i, p), d in dlam.items():
                gview[j, i, p] += np.sum(d * inv)
    return total, vec_grad


def loglik_exact(problem: MLEProblem, params: Optional[ExpParams] = None) -> float:
    """Exact log-likelihood of the event times: sum log lambda(t_k) - integral of lambda.

    The compensator is evaluated in closed form from the exponential states,
    including the squared Zumbach term between consecutive source events.
    """
    if problem.mode is MLEMode.BINNED_PROXY_2D:
        raise ValueError("use loglik_binned_proxy for proxy problems")
    return _exact(problem, problem.params if params is None else params, False)[0]


def grad_exact(problem: MLEProblem, params: Optional[ExpParams] = None) -> np.ndarray:
    """Gradient of :func:`loglik_exact` in log coordinates of the free parameters."""
    params = problem.params if params is None else params
    g = _exact(problem, params, True)[1]
    return (g * params.to_vector())[problem._free]


# binned proxy likelihood


def _causal_exp(x, rate):
    """y[t] = sum_{s < t} exp(-rate (t - s)) x[s] along the last axis, and dy/drate."""
    a = np.exp(-rate)
    y = lfilter([0.0, a], [1.0, -a], x, axis=-1)
    dy = -lfilter([0.0, a], [1.0, -2.0 * a, a * a], x, axis=-1)
    return y, dy


def _proxy(problem: MLEProblem, params: ExpParams, want_grad: bool):
    n = params.n_assets
    lam_hat, ret, dt = problem._lam_hat, problem._ret, problem.dt
    vec_grad = np.zeros(params.to_vector().size)
    gview = vec_grad[n:].reshape(n, n, 4)
    total = 0.0
    pos = lam_hat > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        xlogx = np.where(pos, lam_hat * np.log(np.where(pos, lam_hat, 1.0)), 0.0)
    for j in range(n):
        lam = np.full(lam_hat.shape[1:], params.lambda_inf[j])
        dlam = {}
        for i in range(n):
            nh, b = params.n_H[j, i], params.beta[j, i]
            nz, w = params.n_Z[j, i], params.omega[j, i]
            if nh > 0:
                H, dH = _causal_exp(lam_hat[i], b)
                lam = lam + nh * b * dt * H
                dlam[(i, 0)] = b * dt * H
                dlam[(i, 1)] = nh * dt * (H + b * dH)
            if nz > 0:
                Z, dZ = _causal_exp(ret[i], w)
                lam = lam + 2.0 * nz * w * Z * Z
                dlam[(i, 2)] = 2.0 * w * Z * Z
                dlam[(i, 3)] = 2.0 * nz * (Z * Z + 2.0 * w * Z * dZ)
        if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
            raise NonPositiveIntensity(f"model intensity of asset {j} is not positive on some bin")
        lh = lam_hat[j]
        total += float(np.sum(lh * np.log(lam) - xlogx[j] + lh - lam))
        if want_grad:
            resid = lh / lam - 1.0
            vec_grad[j] = np.sum(resid)
            for (i, p), d in dlam.items():
                gview[j, i, p] = np.sum(d * resid)
    return total, vec_grad


def loglik_binned_proxy(problem: MLEProblem, params: Optional[ExpParams] = None) -> float:
    """Poisson proxy log-likelihood with Stirling normalization.

    Each bin contributes lh (log lam - log lh) + lh - lam, where lh is the
    observed proxy and lam the model intensity built from earlier bins of the
    same day.  Bins with lh = 0 contribute -lam.
    """
    if problem.mode is not MLEMode.BINNED_PROXY_2D:
        raise ValueError("use loglik_exact for event-time problems")
    return _proxy(problem, problem.params if params is None else params, False)[0]


def grad_binned_proxy(problem: MLEProblem, params: Optional[ExpParams] = None) -> np.ndarray:
    """Gradient of :func:`loglik_binned_proxy` in log coordinates of the free parameters."""
    if problem.mode is not MLEMode.BINNED_PROXY_2D:
        raise ValueError("use grad_exact for event-time problems")
    params = problem.params if params is None else params
    g = _proxy(problem, params, True)[1]
    return (g * params.to_vector())[problem._free]


# optimization


@dataclass
class MLEResult:
    params: ExpParams
    loglik: float
    init_loglik: float
    n_iter: int
    converged: bool
    message: str
    stderr: Optional[dict] = None

    def as_dict(self) -> dict:
        out = {"loglik": self.loglik, "init_loglik": self.init_loglik, "n_iter": self.n_iter,
               "converged": self.converged, "message": self.message}
        out.update(self.params.as_dict())
        if self.stderr:
            out.update({f"se_{k}": v for k, v in self.stderr.items()})
        return out


def _value_and_grad(problem: MLEProblem, params: ExpParams):
    fn = _proxy if problem.mode is MLEMode.BINNED_PROXY_2D else _exact
    val, g = fn(problem, params, True)
    return val, (g * params.to_vector())[problem._free]


def fisher_stderr(problem: MLEProblem, params: ExpParams, step: float = 1e-5) -> dict:
    """Standard errors from the observed information (finite-differenced analytic gradient).

    The Hessian is taken in log coordinates and mapped back by the delta
    method; non-positive-definite information yields NaN entries.
    """
    u0 = problem.to_log(params)
    m = u0.size
    hess = np.zeros((m, m))
    for a in range(m):
        up, dn = u0.copy(), u0.copy()
        up[a] += step
        dn[a] -= step
        hess[:, a] = (_value_and_grad(problem, problem.from_log(up))[1] - _value_and_grad(problem, problem.from_log(dn))[1]) / (2 * step)
    hess = 0.5 * (hess + hess.T)
    theta = np.exp(u0)
    try:
        cov_u = np.linalg.inv(-hess)
        var = np.diag(cov_u) * theta * theta
    except np.linalg.LinAlgError:
        var = np.full(m, np.nan)
    se = np.where(var > 0, np.sqrt(np.abs(var)), np.nan)
    return dict(zip(problem.free_names, se.tolist()))


def maximize(
    problem: MLEProblem,
    init: Union[None, ExpParams, PointProcessSpec] = None,
    max_iter: int = MAX_ITER,
    gtol: float = GTOL,
    stderr: bool = True,
) -> MLEResult:
    """Quasi-Newton ascent of the log-likelihood in log coordinates.

    The objective is the mean log-likelihood per observation (event or bin),
    and convergence means its gradient has infinity norm below ``gtol``.
    The returned parameters are never less likely than ``init``.
    """
    if init is None:
        init = problem.params
    elif isinstance(init, PointProcessSpec):
        init = ExpParams.from_spec(init)
    scale = 1.0 / problem.n_obs()
    u0 = problem.to_log(init)
    f0, g0 = _value_and_grad(problem, init)
    if u0.size == 0:
        return MLEResult(init, f0, f0, 0, True, "no free parameters")

    def objective(u):
        try:
            val, g = _value_and_grad(problem, problem.from_log(u))
        except NonPositiveIntensity:
            return np.inf, np.zeros_like(u)
        if not np.isfinite(val):
            return np.inf, np.zeros_like(u)
        return -val * scale, -g * scale

    if np.max(np.abs(g0 * scale)) < gtol:
        res_params, f, nit, conv, msg = init, f0, 0, True, "initial point is stationary"
    else:
        res = scipy.optimize.minimize(
            objective, u0, jac=True, method="BFGS", options={"gtol": gtol, "maxiter": max_iter}
        )
        cand = problem.from_log(res.x)
        f = _value_and_grad(problem, cand)[0]
        g = objective(res.x)[1]
        conv = bool(np.max(np.abs(g)) < gtol)
        nit, msg = int(res.nit), str(res.message)
        if f < f0:
            res_params, f, conv, msg = init, f0, False, "optimizer did not improve on init; " + msg
        else:
            res_params = cand
    if not conv:
        log.warning("maximum likelihood did not converge: %s", msg)
    se = fisher_stderr(problem, res_params) if stderr else None
    return MLEResult(res_params, f, f0, nit, conv, msg, se)


# warm start


def _fit_exp_pair(diag, offdiag, rng_starts):
    """Least-squares fit of phi(t) delta + k(t1) k(t2) to a kernel grid."""
    q = diag.size
    tau = np.arange(1, q + 1, dtype=float)
    iu = np.triu_indices(q, 1)

    def resid(p):
        nh, b, nz, w = np.exp(p)
        phi = nh * b * np.exp(-b * tau)
        k = np.sqrt(2 * nz * w) * np.exp(-w * tau)
        return np.concatenate([diag - phi - k * k, np.sqrt(2.0) * (offdiag - np.outer(k, k))[iu]])

    best = None
    for start in rng_starts:
        try:
            sol = scipy.optimize.least_squares(resid, np.log(start), method="lm", xtol=1e-12, ftol=1e-12)
        except ValueError:
            continue
        if best is None or sol.cost < best.cost:
            best = sol
    return np.exp(best.x)


def warm_start_from_model(model: ModelSpec2D, bin_length: float = 1.0) -> ExpParams:
    """Exponential parameters fitted to the kernel grids of a moment calibration.

    The time-diagonal grid is matched to phi + k^2 and the off-diagonal to
    k(t1) k(t2).  For grids on bins of length ``bin_length`` (in the time
    unit of the likelihood) rates and baselines are divided by it.
    """
    n, q = model.n_assets, model.q
    out = {f: np.zeros((n, n)) for f in KERNEL_FIELDS}
    starts = [(0.5, r, 0.1, w) for r in (0.02, 0.1, 0.5) for w in (0.02, 0.1, 0.5)]
    for j in range(n):
        for i in range(n):
            diag = model.phi[j, i]
            off = model.offdiag_K(j, i)
            if not np.any(diag) and not np.any(off):
                out["beta"][j, i] = out["omega"][j, i] = 1.0 / bin_length
                continue
            nh, b, nz, w = _fit_exp_pair(diag, off, starts)
            out["n_H"][j, i], out["beta"][j, i] = nh, b / bin_length
            out["n_Z"][j, i], out["omega"][j, i] = nz, w / bin_length
    lam = np.maximum(model.sigma_inf_sq, 1e-12) / bin_length
    return ExpParams(lam, **out)
