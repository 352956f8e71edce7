"""Data carriers shared by the simulation, preprocessing and moment modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InsufficientBins, LengthMismatch

STAGES = ("raw", "normalized", "martingalised", "mirrored")


@dataclass
class EventStream:
    """Event times and +-1 marks of one asset on [0, horizon]."""

    times: np.ndarray
    marks: np.ndarray
    horizon: float

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.marks = np.asarray(self.marks, dtype=float)
        self.horizon = float(self.horizon)
        if self.times.shape != self.marks.shape or self.times.ndim != 1:
            raise LengthMismatch("times and marks must be vectors of equal length")
        if self.horizon <= 0:
            raise ValueError("horizon must be > 0")
        if self.times.size:
            if np.any(np.diff(self.times) <= 0):
                raise ValueError("event times must be strictly increasing")
            if self.times[0] < 0 or self.times[-1] > self.horizon:
                raise ValueError("event times must lie in [0, horizon]")
        if not np.all(np.abs(self.marks) == 1):
            raise ValueError("marks must be +1 or -1")

    def __len__(self) -> int:
        return int(self.times.size)


@dataclass
class SimulatedPanel:
    """Per-bin returns and squared volatility, shape (n_assets, n_bins)."""

    returns: np.ndarray
    sigma2: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.returns = np.atleast_2d(np.asarray(self.returns, dtype=float))
        self.sigma2 = np.atleast_2d(np.asarray(self.sigma2, dtype=float))
        if self.returns.shape != self.sigma2.shape:
            raise LengthMismatch("returns and sigma2 shapes differ")
        if np.any(self.sigma2 < 0):
            raise ValueError("sigma2 must be >= 0")

    @property
    def n_assets(self) -> int:
        return int(self.returns.shape[0])

    @property
    def n_bins(self) -> int:
        return int(self.returns.shape[1])

    def to_binned(self, bins_per_day: int) -> "BinnedPanel":
        """Cut the series into consecutive pseudo-days, dropping the remainder."""
        n_days = self.n_bins // bins_per_day
        if n_days < 1:
            raise InsufficientBins(f"{self.n_bins} bins is less than one day of {bins_per_day}")
        cut = n_days * bins_per_day
        shape = (self.n_assets, n_days, bins_per_day)
        return BinnedPanel(
            returns=self.returns[:, :cut].reshape(shape),
            vol=np.sqrt(self.sigma2[:, :cut]).reshape(shape),
            stage="raw",
        )


@dataclass
class BinnedPanel:
    """Returns and volatility indexed (asset, day, bin-of-day)."""

    returns: np.ndarray
    vol: np.ndarray
    stage: str = "raw"
    days: Optional[list] = None
    assets: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        r = np.asarray(self.returns, dtype=float)
        v = np.asarray(self.vol, dtype=float)
        if r.ndim == 2:
            r = r[None]
        if v.ndim == 2:
            v = v[None]
        if r.ndim != 3 or r.shape != v.shape:
            raise LengthMismatch(f"returns {r.shape} and vol {v.shape} must share shape (asset, day, bin)")
        if r.shape[0] < 1:
            raise LengthMismatch("panel has no assets")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(v))):
            raise ValueError("panel has non-finite entries")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        self.returns = r
        self.vol = v
        if self.days is not None and len(self.days) != r.shape[1]:
            raise LengthMismatch("day labels do not match the day axis")

    @property
    def n_assets(self) -> int:
        return int(self.returns.shape[0])

    @property
    def n_days(self) -> int:
        return int(self.returns.shape[1])

    @property
    def bins_per_day(self) -> int:
        return int(self.returns.shape[2])

    @property
    def sigma2(self) -> np.ndarray:
        return self.vol * self.vol

    def replace(self, **changes) -> "BinnedPanel":
        base = dict(
            returns=self.returns,
            vol=self.vol,
            stage=self.stage,
            days=self.days,
            assets=self.assets,
            meta=dict(self.meta),
        )
        base.update(changes)
        return BinnedPanel(**base)

    def select_assets(self, idx) -> "BinnedPanel":
        idx = list(idx)
        names = None if self.assets is None else [self.assets[i] for i in idx]
        return self.replace(returns=self.returns[idx], vol=self.vol[idx], assets=names)

    @staticmethod
    def stack(panels) -> "BinnedPanel":
        """Combine single-asset panels with identical day and bin grids."""
        panels = list(panels)
        shapes = {p.returns.shape[1:] for p in panels}
        if len(shapes) != 1:
            raise LengthMismatch("panels must share the day and bin grid")
        names = []
        for k, p in enumerate(panels):
            names.extend(p.assets if p.assets is not None else [f"asset{k + 1}"] * p.n_assets)
        return BinnedPanel(
            returns=np.concatenate([p.returns for p in panels]),
            vol=np.concatenate([p.vol for p in panels]),
            stage=panels[0].stage,
            days=panels[0].days,
            assets=names,
        )
