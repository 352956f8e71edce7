"""CSV readers and writers for models, panels, events and covariance suites.

Every file has a header row, UTF-8 encoding and '.' decimals.  Floats are
written with 17 significant digits so that files round-trip exactly.
"""

from __future__ import annotations

import contextlib
import csv
import os
import shutil
import tempfile
from collections import defaultdict
from typing import Iterable, Optional

import numpy as np

from .errors import DataError
from .model import ExponentialKernelParams, KernelKind, ModelSpec2D, PointProcessSpec, zhawkes_model
from .panel import BinnedPanel, EventStream

__all__ = [
    "fmt",
    "write_rows",
    "read_rows",
    "write_model",
    "read_model",
    "read_parametric_spec",
    "write_panel",
    "read_panel",
    "read_ohlc",
    "write_events",
    "read_events",
    "write_suite",
    "write_key_values",
    "read_key_values",
    "atomic_output_dir",
]

MODEL_HEADER = ["kernel", "target", "source", "lag1", "lag2", "value"]
SPEC_HEADER = ["kernel", "target", "source", "norm", "rate"]
PANEL_HEADER = ["day", "bin", "asset", "return", "vol"]
OHLC_HEADER = ["day", "bin", "asset", "open", "high", "low", "close"]
EVENT_HEADER = ["time", "mark", "asset"]


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_rows(path: str, header: list, rows: Iterable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def read_rows(path: str, required: Optional[list] = None) -> list:
    """Rows of a headed CSV as dicts; ``required`` columns must be present."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        missing = [c for c in (required or []) if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        return list(reader)


def _float(row: dict, key: str, path: str) -> float:
    try:
        return float(row[key])
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad value {row.get(key)!r} in column {key}") from exc


# models


def write_model(model: ModelSpec2D, path: str, blocks=None) -> None:
    """Long-format kernel table; lags are one-based, blank where not applicable.

    ``blocks`` optionally restricts the kernels written to a set of
    (name, target, source) with zero-based assets and name one of phi, k, L
    and phi_cross; K_upper follows k.  Absent rows read back as zeros.
    """
    n, q = model.n_assets, model.q
    short = {"phi": "phi", "k": "k", "leverage": "L", "K_upper": "k"}

    def keep(name, i, j):
        return blocks is None or (short.get(name, name), i, j) in blocks

    rows = []
    for i in range(n):
        rows.append(["sigma_inf_sq", i + 1, "", "", "", model.sigma_inf_sq[i]])
    if n == 2:
        rows.append(["equal_time_cov", "", "", "", "", model.equal_time_cov])
    for name in ("phi", "k", "leverage"):
        arr = getattr(model, name)
        for i in range(n):
            for j in range(n):
                if keep(name, i, j):
                    rows.extend([name, i + 1, j + 1, t + 1, "", arr[i, j, t]] for t in range(q))
    if n == 2:
        for i in range(n):
            if keep("phi_cross", i, 1 - i):
                rows.extend(["phi_cross", i + 1, 2 - i, t + 1, "", model.phi_cross[i, t]] for t in range(q))
    if model.K_upper is not None:
        iu = np.triu_indices(q, 1)
        for i in range(n):
            for j in range(n):
                if not keep("K_upper", i, j):
                    continue
                rows.extend(
                    ["K_upper", i + 1, j + 1, a + 1, b + 1, model.K_upper[i, j, a, b]] for a, b in zip(*iu)
                )
    if model.k_cross is not None and (blocks is None or any(b[0] == "phi_cross" for b in blocks)):
        for i in range(n):
            for a in range(q):
                rows.extend(
                    ["k_cross", i + 1, 2 - i, a + 1, b + 1, model.k_cross[i, a, b]] for b in range(q) if a != b
                )
    write_rows(path, MODEL_HEADER, rows)


def read_model(path: str) -> ModelSpec2D:
    rows = read_rows(path, MODEL_HEADER)
    base = {}
    q = 0
    for r in rows:
        if r["kernel"] == "sigma_inf_sq":
            base[int(r["target"])] = _float(r, "value", path)
        elif r["lag1"]:
            q = max(q, int(r["lag1"]), int(r["lag2"] or 0))
    n = len(base)
    if n not in (1, 2) or sorted(base) != list(range(1, n + 1)) or q < 1:
        raise DataError(f"{path}: not a model file with 1 or 2 assets")
    arrays = {name: np.zeros((n, n, q)) for name in ("phi", "k", "leverage")}
    phi_cross = np.zeros((n, q))
    K_upper = k_cross = None
    eq_cov = 0.0
    for r in rows:
        kind = r["kernel"]
        v = _float(r, "value", path)
        if kind == "sigma_inf_sq":
            continue
        if kind == "equal_time_cov":
            eq_cov = v
            continue
        i, t = int(r["target"]) - 1, int(r["lag1"]) - 1
        if kind in arrays:
            arrays[kind][i, int(r["source"]) - 1, t] = v
        elif kind == "phi_cross":
            phi_cross[i, t] = v
        elif kind == "K_upper":
            if K_upper is None:
                K_upper = np.zeros((n, n, q, q))
            K_upper[i, int(r["source"]) - 1, t, int(r["lag2"]) - 1] = v
        elif kind == "k_cross":
            if k_cross is None:
                k_cross = np.zeros((n, q, q))
            k_cross[i, t, int(r["lag2"]) - 1] = v
        else:
            raise DataError(f"{path}: unknown kernel {kind!r}")
    return ModelSpec2D(
        phi=arrays["phi"],
        k=arrays["k"],
        leverage=arrays["leverage"],
        sigma_inf_sq=np.array([base[i + 1] for i in range(n)]),
        phi_cross=phi_cross,
        equal_time_cov=eq_cov,
        K_upper=K_upper,
        k_cross=k_cross,
    )


def read_parametric_spec(path: str):
    """Exponential kernel specification.

    Rows are (kernel, target, source, norm, rate) with kernel one of
    ``baseline`` (norm holds the baseline, source and rate blank),
    ``linear``, ``zumbach`` or ``leverage``.  Returns (baselines, grids)
    where grids maps kernel kind to an (n, n) nested list of
    :class:`ExponentialKernelParams` or None.
    """
    rows = read_rows(path, SPEC_HEADER)
    base = {}
    for r in rows:
        if r["kernel"] == "baseline":
            base[int(r["target"])] = _float(r, "norm", path)
    n = len(base)
    if n not in (1, 2) or sorted(base) != list(range(1, n + 1)):
        raise DataError(f"{path}: need one baseline row per asset (1 or 2 assets)")
    grids = {k: [[None] * n for _ in range(n)] for k in KernelKind}
    for r in rows:
        if r["kernel"] == "baseline":
            continue
        try:
            kind = KernelKind(r["kernel"])
        except ValueError as exc:
            raise DataError(f"{path}: unknown kernel {r['kernel']!r}") from exc
        i, j = int(r["target"]) - 1, int(r["source"]) - 1
        if not (0 <= i < n and 0 <= j < n):
            raise DataError(f"{path}: asset index out of range")
        try:
            grids[kind][i][j] = ExponentialKernelParams(_float(r, "norm", path), _float(r, "rate", path), kind)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
    return np.array([base[i + 1] for i in range(n)]), grids


def spec_to_point_process(base, grids) -> PointProcessSpec:
    return PointProcessSpec(
        lambda_inf=tuple(base),
        phi=grids[KernelKind.LINEAR],
        k=grids[KernelKind.ZUMBACH],
        leverage=grids[KernelKind.LEVERAGE],
    )


def spec_to_model(base, grids, q: int) -> ModelSpec2D:
    n = len(base)
    arr = {f: np.zeros((n, n)) for f in ("n_H", "beta", "n_Z", "omega")}
    arr["beta"][:] = arr["omega"][:] = 1.0
    lev = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            p = grids[KernelKind.LINEAR][i][j]
            if p is not None:
                arr["n_H"][i, j], arr["beta"][i, j] = p.norm, p.rate
            p = grids[KernelKind.ZUMBACH][i][j]
            if p is not None:
                arr["n_Z"][i, j], arr["omega"][i, j] = p.norm, p.rate
            p = grids[KernelKind.LEVERAGE][i][j]
            if p is not None:
                lev[i][j] = (p.norm, p.rate)
    return zhawkes_model(arr["n_H"], arr["beta"], arr["n_Z"], arr["omega"], base, q, leverage=lev)


# panels and events


def write_panel(panel: BinnedPanel, path: str) -> None:
    names = panel.assets or [f"asset{a + 1}" for a in range(panel.n_assets)]
    days = panel.days or list(range(panel.n_days))
    r, v = panel.returns, panel.vol

    def rows():
        for d in range(panel.n_days):
            for b in range(panel.bins_per_day):
                for a in range(panel.n_assets):
                    yield days[d], b, names[a], r[a, d, b], v[a, d, b]

    write_rows(path, PANEL_HEADER, rows())


def _grid(path: str, rows: list, value_cols: list, stage: str = "raw"):
    assets, days, bins = [], [], set()
    seen_a, seen_d = set(), set()
    for r in rows:
        if r["asset"] not in seen_a:
            seen_a.add(r["asset"])
            assets.append(r["asset"])
        if r["day"] not in seen_d:
            seen_d.add(r["day"])
            days.append(r["day"])
        bins.add(int(r["bin"]))
    nb = len(bins)
    if sorted(bins) != list(range(nb)) and sorted(bins) != list(range(1, nb + 1)):
        raise DataError(f"{path}: bins must be consecutive integers")
    b0 = min(bins)
    a_idx = {a: k for k, a in enumerate(assets)}
    d_idx = {d: k for k, d in enumerate(days)}
    out = {c: np.full((len(assets), len(days), nb), np.nan) for c in value_cols}
    for r in rows:
        key = (a_idx[r["asset"]], d_idx[r["day"]], int(r["bin"]) - b0)
        for c in value_cols:
            out[c][key] = _float(r, c, path)
    for c in value_cols:
        if np.isnan(out[c]).any():
            raise DataError(f"{path}: incomplete (asset, day, bin) grid in column {c}")
    return assets, days, out


def read_panel(path: str, stage: str = "raw") -> BinnedPanel:
    rows = read_rows(path, PANEL_HEADER)
    if not rows:
        raise DataError(f"{path}: no rows")
    assets, days, cols = _grid(path, rows, ["return", "vol"])
    return BinnedPanel(returns=cols["return"], vol=cols["vol"], stage=stage, days=days, assets=assets)


def read_ohlc(path: str):
    from .preprocess import OhlcPanel

    rows = read_rows(path, OHLC_HEADER)
    if not rows:
        raise DataError(f"{path}: no rows")
    assets, days, cols = _grid(path, rows, ["open", "high", "low", "close"])
    return OhlcPanel(cols["open"], cols["high"], cols["low"], cols["close"], days=days, assets=assets)


def write_events(streams, path: str) -> None:
    def rows():
        merged = []
        for a, s in enumerate(streams):
            merged.extend((t, m, a + 1) for t, m in zip(s.times, s.marks))
        merged.sort()
        for t, m, a in merged:
            yield float(t), int(m), a

    write_rows(path, EVENT_HEADER, rows())


def read_events(path: str, horizon: Optional[float] = None, n_assets: Optional[int] = None) -> list:
    rows = read_rows(path, EVENT_HEADER)
    per = defaultdict(lambda: ([], []))
    for r in rows:
        t, m = per[int(r["asset"])]
        t.append(_float(r, "time", path))
        m.append(_float(r, "mark", path))
    n = max(per) if per else (n_assets or 1)
    n = max(n, n_assets or 0)
    if horizon is None:
        horizon = max((max(per[a][0]) for a in per), default=1.0)
    try:
        return [EventStream(np.array(per[a + 1][0]), np.array(per[a + 1][1]), horizon) for a in range(n)]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_suite(suite, path: str) -> None:
    write_rows(path, ["structure", "left", "right", "lag1", "lag2", "value"], suite.rows())


def write_key_values(values: dict, path: str) -> None:
    write_rows(path, ["key", "value"], sorted(values.items()))


def read_key_values(path: str) -> dict:
    return {r["key"]: r["value"] for r in read_rows(path, ["key", "value"])}


@contextlib.contextmanager
def atomic_output_dir(out_dir: str):
    """Yield a temporary directory whose files move into ``out_dir`` on success."""
    out_dir = os.path.abspath(out_dir)
    parent = os.path.dirname(out_dir)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".tmp-", dir=parent)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if not os.path.isdir(out_dir):
        os.replace(tmp, out_dir)
        return
    for name in sorted(os.listdir(tmp)):
        dest = os.path.join(out_dir, name)
        if os.path.isdir(dest):
            shutil.rmtree(dest)
        os.replace(os.path.join(tmp, name), dest)
    shutil.rmtree(tmp, ignore_errors=True)
