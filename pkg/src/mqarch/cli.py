"""Command-line pipeline: simulate, preprocess, moments, calibrate, mle-refine, factor, report.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import contextlib
import logging
import os
import sys

import click
import numpy as np

from . import io
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, MQARCHError, NumericalError
from .model import kernel_l1_norm, mean_squared_vol

log = logging.getLogger("mqarch")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4


class StageError(Exception):
    """Wraps a failure with the pipeline stage it happened in."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.original = exc


@contextlib.contextmanager
def stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.original
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, FileNotFoundError)):
        return EXIT_DATA
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (ValueError, TypeError)):
        return EXIT_CONFIG
    return 1


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None, help="key=value config file with sections")
@click.option("--out-dir", default="out", show_default=True, help="directory receiving the outputs")
@click.option("--workers", type=int, default=None, help="worker count (recorded; computations run in-process)")
@click.option("--seed", type=int, default=None, help="random seed")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
@click.pass_context
def cli(ctx, config_path, out_dir, workers, seed, log_level):
    cfg = load_config(config_path)
    cfg.override("run", workers=workers, seed=seed, log_level=log_level)
    level = cfg.get("run", "log_level").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        raise ConfigError(f"unknown log level {level!r}")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    ctx.obj = {"cfg": cfg, "out_dir": out_dir}


def _finish(tmp: str, cfg: RunConfig) -> None:
    cfg.write(os.path.join(tmp, "config.ini"))


def _require(value: str, what: str) -> str:
    if not value:
        raise ConfigError(f"missing {what}")
    return value


def _load_model_or_spec(path: str, q: int):
    """Tabulated model CSV or parametric exponential spec CSV, told apart by the header."""
    rows = io.read_rows(path)
    if not rows:
        raise DataError(f"{path}: no rows")
    if "lag1" in rows[0]:
        return io.read_model(path), None
    base, grids = io.read_parametric_spec(path)
    return io.spec_to_model(base, grids, q), (base, grids)


# simulate


@cli.command()
@click.option("--mode", type=click.Choice(["mqarch", "thinning"]), default=None)
@click.option("--spec", default=None, help="parametric spec CSV or tabulated model CSV")
@click.option("--bins", type=int, default=None)
@click.option("--horizon", type=float, default=None)
@click.option("--q", type=int, default=None, help="lags used to tabulate a parametric spec")
@click.option("--bins-per-day", type=int, default=None)
@click.pass_obj
def simulate(obj, mode, spec, bins, horizon, q, bins_per_day):
    """Simulate an MQARCH panel or exact Hawkes events."""
    from .simulate import simulate_mqarch, simulate_qhawkes_thinning

    cfg = obj["cfg"]
    cfg.override("simulate", mode=mode, spec=spec, bins=bins, horizon=horizon, q=q, bins_per_day=bins_per_day)
    s = cfg.section("simulate")
    seed = cfg.get("run", "seed")
    path = _require(s["spec"], "--spec")
    if not os.path.exists(path):
        raise FileNotFoundError(f"spec file not found: {path}")
    with io.atomic_output_dir(obj["out_dir"]) as tmp:
        meta = {"seed": seed, "mode": s["mode"]}
        if s["mode"] == "mqarch":
            with stage("load spec"):
                model, _ = _load_model_or_spec(path, s["q"])
            with stage("simulate"):
                panel = simulate_mqarch(model, s["bins"], seed)
                binned = panel.to_binned(s["bins_per_day"])
            if binned.n_days * binned.bins_per_day != s["bins"]:
                log.warning("dropping %d bins beyond the last full day", s["bins"] - binned.n_days * binned.bins_per_day)
            io.write_panel(binned, os.path.join(tmp, "panel.csv"))
            meta.update(n_floored=panel.meta["n_floored"], burn_in=panel.meta["burn_in"])
            for a in range(model.n_assets):
                meta[f"sample_mean_sigma2_{a + 1}"] = float(panel.sigma2[a].mean())
        else:
            with stage("load spec"):
                _, parsed = _load_model_or_spec(path, s["q"])
                if parsed is None:
                    raise ConfigError("thinning needs a parametric spec")
                pp = io.spec_to_point_process(*parsed)
            with stage("simulate"):
                streams, diag = simulate_qhawkes_thinning(pp, s["horizon"], seed, return_diagnostics=True)
            io.write_events(streams, os.path.join(tmp, "events.csv"))
            meta.update(diag)
            meta["horizon"] = s["horizon"]
            for a, rate in enumerate(pp.mean_rate()):
                meta[f"mean_rate_theory_{a + 1}"] = float(rate)
                meta[f"n_events_{a + 1}"] = len(streams[a])
        io.write_key_values(meta, os.path.join(tmp, "metadata.csv"))
        _finish(tmp, cfg)


# preprocess


@cli.command()
@click.option("--input", "input_path", default=None, help="OHLC CSV (day, bin, asset, open, high, low, close)")
@click.option("--window-days", type=int, default=None)
@click.option("--trailing/--no-trailing", default=None)
@click.option("--intraday/--no-intraday", default=None)
@click.option("--martingalise/--no-martingalise", default=None)
@click.pass_obj
def preprocess(obj, input_path, window_days, trailing, intraday, martingalise):
    """OHLC bars to a normalized, martingalised return/volatility panel."""
    from . import preprocess as pp

    cfg = obj["cfg"]
    cfg.override("preprocess", input=input_path, window_days=window_days, trailing=trailing,
                 intraday=intraday, martingalise=martingalise)
    s = cfg.section("preprocess")
    with io.atomic_output_dir(obj["out_dir"]) as tmp:
        with stage("read bars"):
            bars = io.read_ohlc(_require(s["input"], "--input"))
        with stage("returns and volatility"):
            panel = pp.ohlc_to_returns_vol(bars)
        if s["trailing"]:
            with stage("trailing normalization"):
                panel = pp.normalize_trailing(panel, s["window_days"])
        if s["intraday"]:
            with stage("intraday normalization"):
                panel = pp.normalize_intraday(panel)
        if s["martingalise"]:
            with stage("martingalisation"):
                panel = pp.martingalise(panel)
        io.write_panel(panel, os.path.join(tmp, "panel.csv"))
        meta = {"stage": panel.stage, "n_days": panel.n_days, "bins_per_day": panel.bins_per_day}
        for k, row in enumerate(panel.meta.get("lag1_regression", [])):
            for l, v in enumerate(row):
                meta[f"lag1_regression_{k + 1}{l + 1}"] = v
        meta["dropped_bins"] = " ".join(str(b) for b in panel.meta.get("dropped_bins", []))
        io.write_key_values(meta, os.path.join(tmp, "metadata.csv"))
        _finish(tmp, cfg)


# moments and calibration


def _suites(panel, q, mirror, winsorize, causal=True, leverage=True):
    from .moments import estimate_suite
    from .preprocess import mirror_augment

    if mirror:
        with stage("moments (mirrored)"):
            quad = estimate_suite(mirror_augment(panel), q, causal=causal, winsorize=winsorize)
        if not leverage:
            return quad, None
        with stage("moments (leverage)"):
            lev = estimate_suite(panel, q, causal=causal, winsorize=winsorize)
        return quad, lev
    with stage("moments"):
        suite = estimate_suite(panel, q, causal=causal, winsorize=winsorize)
    return suite, suite


@cli.command()
@click.option("--panel", default=None)
@click.option("--q", type=int, default=None)
@click.option("--mirror", type=click.Choice(["on", "off"]), default=None)
@click.option("--winsorize", type=float, default=None)
@click.option("--causal/--noncausal", default=None)
@click.pass_obj
def moments(obj, panel, q, mirror, winsorize, causal):
    """Estimate the covariance suite of a panel."""
    cfg = obj["cfg"]
    cfg.override("moments", panel=panel, q=q, winsorize=winsorize, causal=causal,
                 mirror=None if mirror is None else mirror == "on")
    s = cfg.section("moments")
    with io.atomic_output_dir(obj["out_dir"]) as tmp:
        with stage("read panel"):
            data = io.read_panel(_require(s["panel"], "--panel"))
        suite, _ = _suites(data, s["q"], s["mirror"], s["winsorize"], s["causal"], leverage=False)
        io.write_suite(suite, os.path.join(tmp, "suite.csv"))
        _finish(tmp, cfg)


def _profile_columns(model, blocks=None) -> dict:
    """Kernel profiles keyed by column name, restricted to ``blocks`` when given."""
    n = model.n_assets
    cols = {}
    for name, arr in (("phi", model.phi), ("k", model.k), ("L", model.leverage)):
        for i in range(n):
            for j in range(n):
                if blocks is None or (name, i, j) in blocks:
                    cols[f"{name}_{i + 1}{j + 1}"] = arr[i, j]
    if n == 2:
        for i in range(n):
            if blocks is None or ("phi_cross", i, 1 - i) in blocks:
                cols[f"phi_cross_{i + 1}"] = model.phi_cross[i]
    return cols


def _solved_blocks(model, steps) -> set:
    n = model.n_assets
    out = set()
    for i in range(n):
        for j in range(n):
            if 1 in steps and i == j:
                out |= {("phi", i, j), ("k", i, j)}
            if 2 in steps and i != j:
                out |= {("phi", i, j), ("k", i, j)}
            if 4 in steps:
                out.add(("L", i, j))
        if 3 in steps and n == 2:
            out.add(("phi_cross", i, 1 - i))
    return out


def _write_profiles(path: str, cols: dict, q: int) -> None:
    names = list(cols)
    rows = ([lag + 1] + [cols[c][lag] for c in names] for lag in range(q))
    io.write_rows(path, ["lag"] + names, rows)


def _norm_rows(model) -> list:
    n = model.n_assets
    rows = []
    for i in range(n):
        for j in range(n):
            rows.append([i + 1, j + 1, kernel_l1_norm(model.phi[i, j]), kernel_l1_norm(model.k[i, j] ** 2),
                         kernel_l1_norm(model.leverage[i, j])])
    return rows


def _summary(model) -> dict:
    out = {"spectral_radius": model.spectral_radius(), "q": model.q, "n_assets": model.n_assets}
    for i, v in enumerate(model.sigma_inf_sq):
        out[f"sigma_inf_sq_{i + 1}"] = float(v)
    try:
        for i, v in enumerate(mean_squared_vol(model.norms(), model.sigma_inf_sq)):
            out[f"mean_sigma2_{i + 1}"] = float(v)
    except NumericalError:
        out["mean_sigma2"] = "nonstationary"
    for key, ratio in sorted(model.meta.get("eigen_ratio", {}).items()):
        out[f"eigen_ratio_{key}"] = ratio
    return out


@cli.command()
@click.option("--panel", default=None)
@click.option("--q", type=int, default=None)
@click.option("--q-cross", type=int, default=None)
@click.option("--steps", default=None, help="comma-separated subset of 1,2,3,4")
@click.option("--mirror", type=click.Choice(["on", "off"]), default=None)
@click.option("--winsorize", type=float, default=None)
@click.option("--ridge", type=float, default=None)
@click.option("--method", type=click.Choice(["sequential", "joint"]), default=None)
@click.option("--sweeps", type=int, default=None)
@click.option("--tol", type=float, default=None)
@click.option("--smooth/--no-smooth", default=None)
@click.option("--full-cross/--no-full-cross", default=None)
@click.option("--leverage-quadratic/--no-leverage-quadratic", default=None)
@click.pass_obj
def calibrate(obj, panel, q, q_cross, steps, mirror, winsorize, ridge, method, sweeps, tol, smooth, full_cross,
              leverage_quadratic):
    """Moment calibration of an MQARCH model from a preprocessed panel."""
    from .moments import smooth_suite
    from .yulewalker import calibrate as run_calibration

    cfg = obj["cfg"]
    try:
        parsed_steps = None if steps is None else tuple(int(x) for x in steps.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad --steps {steps!r}") from exc
    cfg.override("calibrate", panel=panel, q=q, q_cross=q_cross, steps=parsed_steps,
                 mirror=None if mirror is None else mirror == "on", winsorize=winsorize, ridge=ridge,
                 method=method, sweeps=sweeps, tol=tol, smooth=smooth, full_cross=full_cross,
                 leverage_quadratic=leverage_quadratic)
    s = cfg.section("calibrate")
    with io.atomic_output_dir(obj["out_dir"]) as tmp:
        with stage("read panel"):
            data = io.read_panel(_require(s["panel"], "--panel"))
        quad, lev = _suites(data, s["q"], s["mirror"], s["winsorize"], leverage=4 in s["steps"])
        if s["smooth"]:
            with stage("smoothing"):
                quad, fits = smooth_suite(quad)
        with stage("yule-walker"):
            model = run_calibration(
                quad, leverage_suite=lev, q=s["q"], q_cross=s["q_cross"], steps=s["steps"], ridge=s["ridge"],
                sweeps=s["sweeps"], method=s["method"], full_cross=s["full_cross"],
                leverage_quadratic=s["leverage_quadratic"], tol=s["tol"],
            )
        steps_run = set(s["steps"]) if data.n_assets == 2 else set(s["steps"]) & {1, 4}
        blocks = _solved_blocks(model, steps_run)
        io.write_model(model, os.path.join(tmp, "model.csv"), blocks)
        _write_profiles(os.path.join(tmp, "kernels.csv"), _profile_columns(model, blocks), model.q)
        io.write_suite(quad, os.path.join(tmp, "suite.csv"))
        diag_rows = [[d["step"], d["target"] + 1, d["cond"], d["residual_norm"], d["rank"]]
                     for d in model.meta.get("diagnostics", [])]
        io.write_rows(os.path.join(tmp, "diagnostics.csv"), ["step", "target", "cond", "residual_norm", "rank"],
                      diag_rows)
        io.write_rows(os.path.join(tmp, "norms.csv"), ["target", "source", "phi", "k2", "leverage"],
                      _norm_rows(model))
        io.write_key_values(_summary(model), os.path.join(tmp, "summary.csv"))
        _finish(tmp, cfg)


# maximum likelihood


def _init_params(path: str, bin_length: float):
    from .mle import ExpParams, warm_start_from_model

    rows = io.read_rows(path)
    if rows and "lag1" in rows[0]:
        return warm_start_from_model(io.read_model(path), bin_length=bin_length)
    if rows and "key" in rows[0]:
        kv = {r["key"]: float(r["value"]) for r in rows}
        n = sum(1 for k in kv if k.startswith("lambda_inf["))
        if n not in (1, 2):
            raise DataError(f"{path}: need lambda_inf[0] (and lambda_inf[1])")
        template = ExpParams(np.ones(n), 0.0, 1.0, 0.0, 1.0)
        vec = template.to_vector()
        for idx, name in enumerate(template.names()):
            if name in kv:
                vec[idx] = kv[name]
        return ExpParams.from_vector(vec, n)
    base, grids = io.read_parametric_spec(path)
    return ExpParams.from_spec(io.spec_to_point_process(base, grids))


@cli.command("mle-refine")
@click.option("--events", default=None, help="event CSV (time, mark, asset) for exact modes")
@click.option("--panel", default=None, help="panel CSV for the binned proxy mode")
@click.option("--mode", type=click.Choice(["exact_linear", "exact_zhawkes", "exact_2d", "binned_proxy_2d"]),
              default=None)
@click.option("--init", default=None, help="model CSV (warm start), parameter key/value CSV or parametric spec")
@click.option("--bin-length", type=float, default=None, help="bin length of a model CSV in event time units")
@click.option("--horizon", type=float, default=None)
@click.option("--max-iter", type=int, default=None)
@click.pass_obj
def mle_refine(obj, events, panel, mode, init, bin_length, horizon, max_iter):
    """Refine exponential kernel parameters by maximum likelihood."""
    from .mle import MLEMode, MLEProblem, maximize

    cfg = obj["cfg"]
    cfg.override("mle", events=events, panel=panel, mode=mode, init=init, bin_length=bin_length,
                 horizon=horizon, max_iter=max_iter)
    s = cfg.section("mle")
    with io.atomic_output_dir(obj["out_dir"]) as tmp:
        with stage("initial parameters"):
            params = _init_params(_require(s["init"], "--init"), s["bin_length"])
        with stage("read data"):
            if MLEMode(s["mode"]) is MLEMode.BINNED_PROXY_2D:
                data = io.read_panel(_require(s["panel"], "--panel"))
            else:
                data = io.read_events(_require(s["events"], "--events"), s["horizon"], params.n_assets)
        with stage("maximize"):
            problem = MLEProblem(data, params, s["mode"])
            result = maximize(problem, max_iter=s["max_iter"])
        io.write_key_values(result.as_dict(), os.path.join(tmp, "params.csv"))
        _finish(tmp, cfg)


# factor model


@cli.command()
@click.option("--manifest", default=None, help="CSV with a ticker column (sector optional)")
@click.option("--panel", default=None, help="stock panel CSV; asset column holds tickers")
@click.option("--factor", "factor_path", default=None, help="factor panel CSV")
@click.option("--q", type=int, default=None)
@click.option("--mirror", type=click.Choice(["on", "off"]), default=None)
@click.option("--winsorize", type=float, default=None)
@click.option("--ridge", type=float, default=None)
@click.pass_obj
def factor(obj, manifest, panel, factor_path, q, mirror, winsorize, ridge):
    """Calibrate the one-factor model for a stock universe."""
    from .factor import PROFILE_KEYS, calibrate_factor_model, cross_section_aggregate

    cfg = obj["cfg"]
    cfg.override("factor", manifest=manifest, panel=panel, factor=factor_path, q=q,
                 mirror=None if mirror is None else mirror == "on", winsorize=winsorize, ridge=ridge)
    s = cfg.section("factor")
    with io.atomic_output_dir(obj["out_dir"]) as tmp:
        with stage("read manifest"):
            rows = io.read_rows(_require(s["manifest"], "--manifest"), ["ticker"])
            if not rows:
                raise DataError(f"{s['manifest']}: empty manifest")
            tickers = [r["ticker"] for r in rows]
            sectors = {r["ticker"]: r.get("sector", "") for r in rows}
        with stage("read panels"):
            stocks = io.read_panel(_require(s["panel"], "--panel"))
            fpanel = io.read_panel(_require(s["factor"], "--factor"))
            missing = [t for t in tickers if t not in stocks.assets]
            if missing:
                raise DataError(f"tickers {missing} not in {s['panel']}")
            stocks = stocks.select_assets([stocks.assets.index(t) for t in tickers])
        with stage("factor calibration"):
            fc = calibrate_factor_model(stocks, fpanel, s["q"], mirror=s["mirror"], winsorize=s["winsorize"],
                                        ridge=s["ridge"], use_panel_vol=s["use_panel_vol"])
            summary = cross_section_aggregate(fc.stocks, fc.tickers)
        io.write_model(fc.factor, os.path.join(tmp, "factor_spec.csv"))
        for t, spec in zip(fc.tickers, fc.stocks):
            io.write_model(spec, os.path.join(tmp, f"spec_{t}.csv"))
        norm_rows = summary.norm_rows()
        cols = list(norm_rows[0])
        rows_out = [[r[c] for c in cols] + [sectors.get(r["ticker"], "")] for r in norm_rows]
        io.write_rows(os.path.join(tmp, "summary.csv"), cols + ["sector"], rows_out)
        prof = {}
        for k in PROFILE_KEYS:
            prof[f"mean_{k}"] = summary.mean[k]
            prof[f"std_{k}"] = summary.std[k]
        _write_profiles(os.path.join(tmp, "profiles.csv"), prof, fc.factor.q)
        _finish(tmp, cfg)


# report


@cli.command()
@click.option("--model", "model_path", default=None, help="model CSV")
@click.pass_obj
def report(obj, model_path):
    """Plot-ready kernel profiles, norms and stationarity summary of a model."""
    cfg = obj["cfg"]
    cfg.override("report", model=model_path)
    with io.atomic_output_dir(obj["out_dir"]) as tmp:
        with stage("read model"):
            model = io.read_model(_require(cfg.get("report", "model"), "--model"))
        _write_profiles(os.path.join(tmp, "kernels.csv"), _profile_columns(model), model.q)
        io.write_rows(os.path.join(tmp, "norms.csv"), ["target", "source", "phi", "k2", "leverage"],
                      _norm_rows(model))
        io.write_key_values(_summary(model), os.path.join(tmp, "summary.csv"))
        _finish(tmp, cfg)


def main(argv=None) -> None:
    """Console entry point mapping failures to exit codes."""
    try:
        cli.main(args=argv, prog_name="mqarch", standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        sys.exit(EXIT_CONFIG if exc.exit_code == 2 else exc.exit_code)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        sys.exit(1)
    except (MQARCHError, StageError, FileNotFoundError, ValueError, TypeError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(_exit_code(exc))
    sys.exit(0)


if __name__ == "__main__":
    main()
