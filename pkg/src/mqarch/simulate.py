"""Synthetic data: exact-event quadratic Hawkes paths and discrete MQARCH paths."""

from __future__ import annotations

import logging
import math
import warnings
from typing import Optional, Sequence, Union

import numpy as np

from ._backend import kernels
from .errors import NegativeIntensityAbort, NegativeIntensityClamped, NonStationary, NonStationaryWarning
from .model import ModelSpec2D, PointProcessSpec, spectral_radius
from .panel import EventStream, SimulatedPanel

log = logging.getLogger(__name__)

__all__ = [
    "EventStream",
    "SimulatedPanel",
    "simulate_qhawkes_thinning",
    "bin_events",
    "simulate_mqarch",
    "burn_in_length",
    "asset_noise",
]

SIGMA2_FLOOR = 1e-12
MAX_CLAMP_FRACTION = 0.01
# spectral radius above 1 by more than this is refused, closer is warned about
_RHO_TOL = 1e-9


def _check_stationary(rho: float) -> None:
    if rho > 1.0 + _RHO_TOL:
        raise NonStationary(f"spectral radius {rho:.6g} > 1")
    if rho >= 1.0 - 1e-10:
        warnings.warn(f"spectral radius {rho:.6g} is not below 1", NonStationaryWarning, stacklevel=3)


def simulate_qhawkes_thinning(
    spec: PointProcessSpec,
    horizon: float,
    seed: int,
    return_diagnostics: bool = False,
):
    """Exact event times of a quadratic Hawkes process by Ogata thinning.

    Returns one :class:`EventStream` per asset; with ``return_diagnostics``
    also a dict with candidate and clamp counts.
    """
    if not horizon > 0:
        raise ValueError("horizon must be > 0")
    rho = spectral_radius(spec.norms())
    if rho >= 1.0:
        raise NonStationary(f"spectral radius {rho:.6g} >= 1")
    arr = spec.kernel_arrays()
    rng = np.random.default_rng(seed)
    times, assets, marks, n_cand, n_clamp = kernels.thinning(
        np.asarray(spec.lambda_inf, dtype=float),
        arr["phi_weight"],
        arr["phi_rate"],
        arr["k_weight"],
        arr["k_rate"],
        arr["leverage_weight"],
        arr["leverage_rate"],
        float(horizon),
        rng.standard_exponential,
        rng.random,
    )
    if n_clamp:
        warnings.warn(
            f"intensity clamped at 0 for {n_clamp} of {n_cand} candidates",
            NegativeIntensityClamped,
            stacklevel=2,
        )
        if n_clamp > MAX_CLAMP_FRACTION * n_cand:
            raise NegativeIntensityAbort(f"{n_clamp} clamps out of {n_cand} candidates exceeds 1%")
    streams = [
        EventStream(times=times[assets == i], marks=marks[assets == i], horizon=horizon)
        for i in range(spec.n_assets)
    ]
    if return_diagnostics:
        return streams, {"n_candidates": n_cand, "n_clamped": n_clamp, "n_events": int(times.size)}
    return streams


def bin_events(stream: Union[EventStream, Sequence[EventStream]], bin_size: float = 1.0) -> SimulatedPanel:
    """Aggregate events into bins: return = sum of marks, sigma2 = event count."""
    if not bin_size > 0:
        raise ValueError("bin_size must be > 0")
    streams = [stream] if isinstance(stream, EventStream) else list(stream)
    horizon = max(s.horizon for s in streams)
    n_bins = int(math.ceil(horizon / bin_size))
    returns = np.zeros((len(streams), n_bins))
    counts = np.zeros((len(streams), n_bins))
    for a, s in enumerate(streams):
        if len(s) == 0:
            continue
        idx = np.minimum((s.times / bin_size).astype(np.int64), n_bins - 1)
        returns[a] = np.bincount(idx, weights=s.marks, minlength=n_bins)
        counts[a] = np.bincount(idx, minlength=n_bins)
    return SimulatedPanel(returns=returns, sigma2=counts, meta={"bin_size": bin_size})


def burn_in_length(q: int) -> int:
    return max(10 * q, 1000)


def asset_noise(seed, n_assets: int, n_total: int) -> np.ndarray:
    """Standard normal innovations with one independent stream per asset.

    ``seed`` is an int (asset i uses the stream (seed, i)) or a sequence with
    one seed per asset, which lets several simulations share an asset path.
    """
    if np.ndim(seed) == 0:
        seeds = [[int(seed), i] for i in range(n_assets)]
    else:
        if len(seed) != n_assets:
            raise ValueError("need one seed per asset")
        seeds = [int(s) for s in seed]
    return np.stack([np.random.default_rng(s).standard_normal(n_total) for s in seeds])


def simulate_mqarch(
    model: ModelSpec2D,
    n_bins: int,
    seed,
    noise: str = "gaussian",
    burn_in: Optional[int] = None,
) -> SimulatedPanel:
    """Iterate the MQARCH recursion with Gaussian innovations.

    sigma^2 is floored at 1e-12 when feedback drives it negative; the count is
    reported in ``meta["n_floored"]``.
    """
    if noise.lower() != "gaussian":
        raise ValueError(f"unsupported noise {noise!r}")
    q = model.q
    if n_bins <= q:
        raise ValueError("n_bins must exceed q")
    _check_stationary(model.spectral_radius())
    burn = burn_in_length(q) if burn_in is None else int(burn_in)
    xi = asset_noise(seed, model.n_assets, n_bins + burn)
    ktab = None
    if model.uses_table():
        ktab = np.stack(
            [np.stack([model.offdiag_K(i, j) for j in range(model.n_assets)]) for i in range(model.n_assets)]
        )
    r, s2, n_floor = kernels.mqarch_path(
        model.phi,
        model.leverage,
        model.k,
        ktab,
        model.phi_cross,
        model.k_cross,
        model.sigma_inf_sq,
        model.equal_time_cov,
        xi,
        SIGMA2_FLOOR,
    )
    if n_floor:
        log.warning("sigma^2 floored at %g on %d bins", SIGMA2_FLOOR, n_floor)
    return SimulatedPanel(
        returns=r[:, burn:],
        sigma2=s2[:, burn:],
        meta={"seed": seed, "burn_in": burn, "n_floored": int(n_floor)},
    )
