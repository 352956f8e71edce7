"""End-to-end acceptance checks, one test per criterion.

Every test appends a single PASS/FAIL line to the acceptance section of the
terminal summary.  Stochastic criteria use seed 0 unless noted; the seed was
fixed before the runs and not tuned.
"""

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from mqarch.factor import calibrate_factor_model, cross_section_aggregate, simulate_factor_universe
from mqarch.mle import (
    ExpParams,
    MLEProblem,
    grad_binned_proxy,
    loglik_binned_proxy,
    maximize,
    warm_start_from_model,
)
from mqarch.model import PointProcessSpec, mean_squared_vol, zhawkes_model
from mqarch.moments import estimate_suite, fit_smooth, rank_one_approx
from mqarch.panel import BinnedPanel
from mqarch.preprocess import martingalise, mirror_augment
from mqarch.simulate import bin_events, simulate_mqarch, simulate_qhawkes_thinning
from mqarch.yulewalker import build_A1, build_A2, build_A3, build_A4, build_A5, calibrate
from oracles import implied_suite
from scenarios import base_suite, l1_rel_error, max_kernel_error, random_model

# bins per pseudo-day when cutting long simulations
DAY = 10_000

TWO_D_TABLE = dict(
    n_H=np.array([[0.6, 0.1], [0.2, 0.4]]),
    beta=np.array([[0.06, 0.1], [0.08, 0.04]]),
    n_Z=np.array([[0.2, 0.15], [0.1, 0.21]]),
    omega=np.array([[0.07, 0.1], [0.09, 0.06]]),
    sigma_inf_sq=[1.2, 0.8],
)


def report(num, ok, detail):
    ACCEPTANCE_LINES.append(f"acceptance {num}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


def two_d_model(q):
    t = TWO_D_TABLE
    return zhawkes_model(t["n_H"], t["beta"], t["n_Z"], t["omega"], t["sigma_inf_sq"], q)


def test_1_builders_match_worked_matrices():
    """q = 3 worked matrices with symbolic tables D(u) = 10 + u, Dp(u, v) = 100 + 10 u + v."""
    q = 3
    d1 = lambda u: 10.0 + u
    lags = np.arange(-q, q + 1)
    u, v = np.meshgrid(lags, lags, indexing="ij")
    general = 100.0 + 10.0 * u + v
    causal = np.where((u < 0) | (v < 0), 0.0, general)
    d = lambda tab, a, b: tab[a + q, b + q]
    G = lambda a, b: d(general, a, b)
    Cz = lambda a, b: d(causal, a, b)

    checks = {
        "A1 general": (
            build_A1([d1(-1), d1(-2)], [d1(1), d1(2)], d1(0), q),
            [[d1(0), d1(-1), d1(-2)], [d1(1), d1(0), d1(-1)], [d1(2), d1(1), d1(0)]],
        ),
        "A1 even": (
            build_A1([d1(1), d1(2)], [d1(1), d1(2)], d1(0), q),
            [[d1(0), d1(1), d1(2)], [d1(1), d1(0), d1(1)], [d1(2), d1(1), d1(0)]],
        ),
        # the systems carry a factor 2 that the printed A2 and A4 matrices leave implicit
        "A2 general": (
            build_A2(general, q),
            2 * np.array([[G(0, 1), G(0, 2), G(1, 2)], [G(-1, 0), G(-1, 1), G(0, 1)],
                          [G(-2, -1), G(-2, 0), G(-1, 0)]]),
        ),
        "A2 causal": (
            build_A2(causal, q),
            2 * np.array([[Cz(0, 1), Cz(0, 2), Cz(1, 2)], [0, 0, Cz(0, 1)], [0, 0, 0]]),
        ),
        "A3 general": (
            build_A3(general, q),
            [[G(0, 1), G(-1, 0), G(-2, -1)], [G(0, 2), G(-1, 1), G(-2, 0)], [G(1, 2), G(0, 1), G(-1, 0)]],
        ),
        "A3 causal": (
            build_A3(causal, q),
            [[Cz(0, 1), 0, 0], [Cz(0, 2), 0, 0], [Cz(1, 2), Cz(0, 1), 0]],
        ),
        "A4": (
            build_A4(causal, q),
            2 * np.array([[Cz(1, 1), Cz(2, 1), 0], [Cz(1, 2), Cz(2, 2), 0], [0, 0, Cz(1, 1)]]),
        ),
        "A5": (
            build_A5([d1(1), d1(2)], q),
            [[d1(1), d1(2), 0], [0, 0, d1(1)], [0, 0, 0]],
        ),
    }
    bad = [name for name, (got, want) in checks.items() if not np.array_equal(got, np.asarray(want, dtype=float))]
    report(1, not bad, f"{len(checks) - len(bad)}/{len(checks)} worked matrices exact" + (f", mismatched {bad}" if bad else ""))


def test_2_forward_inverse_master_property():
    rng = np.random.default_rng(0)
    worst_joint = worst_seq = 0.0
    for _ in range(20):
        q = int(rng.integers(2, 11))
        truth = random_model(rng, q)
        suite = implied_suite(truth, base_suite(q), q_cross=q)
        joint = calibrate(suite, q=q, q_cross=q, steps=(1, 2, 3), method="joint")
        seq = calibrate(suite, q=q, q_cross=q, steps=(1, 2, 3), method="sequential", sweeps=2000, tol=1e-13)
        worst_joint = max(worst_joint, max_kernel_error(joint, truth))
        worst_seq = max(worst_seq, max_kernel_error(seq, truth))
    ok = worst_joint < 1e-6 and worst_seq < 1e-6
    report(2, ok, f"20 models, max abs error joint {worst_joint:.2e}, sequential {worst_seq:.2e} (< 1e-6)")


def test_3_linear_garch_recovery():
    q = 50
    truth = zhawkes_model(0.7, 0.1, 0.0, 1.0, [0.1], q)
    panel = simulate_mqarch(truth, 1_000_000, 0).to_binned(DAY)
    est = calibrate(estimate_suite(mirror_augment(panel), q), q=q, steps=(1,))
    phi = est.phi[0, 0]
    err = l1_rel_error(phi, truth.phi[0, 0])
    fit = fit_smooth(phi, "exp")
    beta = fit.params["b"]
    n_h = fit.params["a"] / beta
    ok = err < 0.10 and abs(n_h / 0.7 - 1) < 0.10 and abs(beta / 0.1 - 1) < 0.10
    report(3, ok, f"phi l1 error {err:.3f} (< 0.10), fitted n_H {n_h:.4f}, beta {beta:.4f} (within 10% of 0.7, 0.1)")


def test_4_qgarch_1d_recovery():
    q = 50
    truth = zhawkes_model(0.7, 0.06, 0.2, 0.05, [0.1], q)
    panel = simulate_mqarch(truth, 1_000_000, 0).to_binned(DAY)
    est = calibrate(estimate_suite(mirror_augment(panel), q, winsorize=1e-3), q=q, steps=(1,))
    k_est, _ = rank_one_approx(est.offdiag_K(0, 0))
    err_diag = l1_rel_error(est.phi[0, 0], truth.phi[0, 0])
    err_k = l1_rel_error(k_est, truth.k[0, 0])
    ok = err_diag < 0.15 and err_k < 0.15
    report(4, ok, f"diagonal K l1 error {err_diag:.3f}, rank-one k l1 error {err_k:.3f} (< 0.15)")


def test_5_qgarch_2d_recovery():
    q = 40
    truth = two_d_model(q)
    panel = simulate_mqarch(truth, 1_000_000, 0).to_binned(DAY)
    est = calibrate(estimate_suite(mirror_augment(panel), q, winsorize=1e-3), q=q, steps=(1, 2), method="joint")
    errs = {}
    for i in range(2):
        for j in range(2):
            k_est, _ = rank_one_approx(est.offdiag_K(i, j))
            errs[f"phi{i + 1}{j + 1}"] = l1_rel_error(est.phi[i, j], truth.phi[i, j], np.abs(truth.phi[i, i]).sum())
            errs[f"k{i + 1}{j + 1}"] = l1_rel_error(k_est, truth.k[i, j], np.abs(truth.k[i, i]).sum())
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 0.20
    detail = ", ".join(f"{k} {v:.3f}" for k, v in errs.items())
    report(5, ok, f"worst {worst} {errs[worst]:.3f} (< 0.20); {detail}")


def test_6_mean_rate_law():
    horizon = 1e7
    spec = PointProcessSpec.one_dim(0.01, n_H=0.7, beta=0.04)
    (stream,) = simulate_qhawkes_thinning(spec, horizon, 0)
    rate = len(stream.times) / horizon
    target = 0.01 / (1 - 0.7)
    rel = abs(rate / target - 1)
    report(6, rel < 0.05, f"empirical rate {rate:.5f} vs {target:.5f}, relative gap {rel:.4f} (< 0.05)")


def test_7_mean_volatility_relation():
    t = TWO_D_TABLE
    table_value = mean_squared_vol(t["n_H"], t["sigma_inf_sq"])
    # (I - N)^-1 = [[0.6, 0.1], [0.2, 0.4]] / 0.22 by hand
    closed_form = np.allclose(table_value, [(0.6 * 1.2 + 0.1 * 0.8) / 0.22, (0.2 * 1.2 + 0.4 * 0.8) / 0.22],
                              rtol=1e-12)
    q = 50
    model = two_d_model(q)
    target = model.mean_sigma2()
    sample = simulate_mqarch(model, 2_000_000, 0).sigma2.mean(axis=1)
    rel = np.abs(sample / target - 1)
    ok = closed_form and bool(np.all(rel < 0.10))
    report(
        7,
        ok,
        f"mean_squared_vol(n_H table) = ({table_value[0]:.4f}, {table_value[1]:.4f}); simulated model target "
        f"({target[0]:.3f}, {target[1]:.3f}), sample ({sample[0]:.3f}, {sample[1]:.3f}), gaps {np.round(rel, 4)} (< 0.10)",
    )


def lag1_autocorr(r):
    return float(np.mean(r[:, 1:] * r[:, :-1]) / np.mean(r * r))


def test_8_martingalisation():
    rng = np.random.default_rng(0)
    worst = 0.0
    cases = 0
    for rho in (0.3, -0.2, 0.1):
        eps = rng.standard_normal((100, 1000))
        r = np.zeros_like(eps)
        r[:, 0] = eps[:, 0]
        for t in range(1, eps.shape[1]):
            r[:, t] = rho * r[:, t - 1] + eps[:, t]
        out = martingalise(BinnedPanel(r, np.ones_like(r)))
        worst = max(worst, abs(lag1_autocorr(out.returns[0])))
        cases += 1
    # two assets with own and cross lag-1 dependence
    e = rng.standard_normal((2, 100, 1000))
    r = e.copy()
    for t in range(1, 1000):
        r[0, :, t] += 0.25 * r[0, :, t - 1]
        r[1, :, t] += 0.2 * r[0, :, t - 1] - 0.15 * r[1, :, t - 1]
    out = martingalise(BinnedPanel(r, np.ones_like(r))).returns
    for a in range(2):
        worst = max(worst, abs(lag1_autocorr(out[a])))
        cases += 1
    report(8, worst < 0.01, f"max |lag-1 autocorrelation| {worst:.4f} over {cases} series of 1e5 bins (< 0.01)")


def test_9_mirror_identities():
    rng = np.random.default_rng(0)
    q = 10
    panels = {
        "qgarch": simulate_mqarch(two_d_model(q), 60_000, 0).to_binned(1000),
        "noise": BinnedPanel(rng.standard_normal((2, 30, 500)), np.abs(rng.standard_normal((2, 30, 500))) + 0.1),
    }
    v_max = c_gap = 0.0
    for panel in panels.values():
        orig = estimate_suite(panel, q)
        mir = estimate_suite(mirror_augment(panel), q)
        for j in range(2):
            for l in range(2):
                v_max = max(v_max, float(np.max(np.abs(mir.V(j, l)))))
                scale = max(float(np.max(np.abs(orig.C(j, l)))), 1e-300)
                c_gap = max(c_gap, float(np.max(np.abs(mir.C(j, l) - orig.C(j, l)))) / scale)
    ok = v_max == 0.0 and c_gap < 1e-12
    report(9, ok, f"max |V| after mirroring {v_max:.1e} (exactly 0), max relative C change {c_gap:.1e} (< 1e-12)")


def fd_grad(f, problem, params, h=1e-6):
    u = problem.to_log(params)
    out = np.zeros(u.size)
    for a in range(u.size):
        up, dn = u.copy(), u.copy()
        up[a] += h
        dn[a] -= h
        out[a] = (f(problem, problem.from_log(up)) - f(problem, problem.from_log(dn))) / (2 * h)
    return out


def test_10_mle():
    rng = np.random.default_rng(0)
    base = zhawkes_model(np.array([[0.3, 0.1], [0.1, 0.3]]), 0.1, np.array([[0.2, 0.05], [0.05, 0.2]]), 0.05,
                         [1.0, 1.0], 100)
    grad_gap = 0.0
    monotone = True
    for inst in range(10):
        panel = simulate_mqarch(base, 4000, inst)
        p = ExpParams(rng.uniform(0.2, 1.0, 2), rng.uniform(0.05, 0.3, (2, 2)), rng.uniform(0.05, 1.0, (2, 2)),
                      rng.uniform(0.01, 0.2, (2, 2)), rng.uniform(0.05, 1.0, (2, 2)))
        prob = MLEProblem(panel, p, "binned_proxy_2d", bins_per_day=500)
        g = grad_binned_proxy(prob)
        fd = fd_grad(loglik_binned_proxy, prob, p)
        grad_gap = max(grad_gap, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-300))))
        res = maximize(prob, max_iter=5, stderr=False)
        monotone &= res.loglik >= res.init_loglik

    truth = dict(lambda_inf=0.003, n_H=0.6, beta=0.04, n_Z=0.2, omega=0.03)
    spec = PointProcessSpec.one_dim(truth["lambda_inf"], truth["n_H"], truth["beta"], truth["n_Z"], truth["omega"])
    (stream,) = simulate_qhawkes_thinning(spec, 1e5 / 0.015, 0)
    binned = bin_events(stream, 5.0)
    suite = estimate_suite(binned.to_binned(binned.n_bins // 100), 30)
    warm = warm_start_from_model(calibrate(suite, q=30, steps=(1,)), bin_length=5.0)
    res = maximize(MLEProblem(stream, warm, "exact_zhawkes"))
    monotone &= res.loglik >= res.init_loglik
    est = res.params.as_dict()
    z = {}
    for name, value in truth.items():
        key = name + ("[0]" if name == "lambda_inf" else "[0,0]")
        z[name] = (est[key] - value) / res.stderr[key]
    worst_z = max(abs(v) for v in z.values())
    ok = grad_gap < 1e-5 and monotone and worst_z < 3
    zs = ", ".join(f"{k} {v:+.2f}" for k, v in z.items())
    report(10, ok, f"proxy gradient max rel gap {grad_gap:.1e} (< 1e-5), lnL never decreased {monotone}, "
                   f"{len(stream.times)} events, z-scores {zs} (|z| < 3)")


def test_11_leverage_recovery():
    q = 30
    tau = np.arange(1, q + 1)
    lev = np.zeros((2, 2, q))
    lev[0, 0] = -0.05 * np.exp(-0.1 * tau)
    model = zhawkes_model(np.array([[0.4, 0.1], [0.1, 0.4]]), 0.1, 0.0, 1.0, [1.0, 1.0], q).copy(leverage=lev)

    def estimate(seed):
        panel = simulate_mqarch(model, 1_000_000, seed).to_binned(DAY)
        est = calibrate(estimate_suite(mirror_augment(panel), q), leverage_suite=estimate_suite(panel, q), q=q,
                        steps=(1, 2, 4))
        return est.leverage

    main = estimate(0)
    # noise band from independent replications
    reps = np.array([estimate(s) for s in range(1, 5)])
    sd = reps.std(axis=0, ddof=1)

    l00 = main[0, 0]
    err = l1_rel_error(l00, lev[0, 0])
    fit = fit_smooth(l00, "exp")
    fit_err = l1_rel_error(fit.params["a"] * np.exp(-fit.params["b"] * tau), lev[0, 0])
    sign_ok = l00.sum() < 0 and fit.params["a"] < 0
    band = {}
    for i, j in ((0, 1), (1, 0), (1, 1)):
        band[f"L{i + 1}{j + 1}"] = np.abs(main[i, j]).sum() / (3 * sd[i, j].sum())
    ok = sign_ok and err < 0.20 and fit_err < 0.20 and max(band.values()) <= 1.0
    bands = ", ".join(f"{k} {v:.2f}" for k, v in band.items())
    report(11, ok, f"L11 l1 error {err:.3f}, exponential fit error {fit_err:.3f} (< 0.20), negative {sign_ok}, "
                   f"fitted rate {fit.params['b']:.4f}; zero kernels |L|_1 / (3 sum sd): {bands} (<= 1)")


def test_12_factor_pipeline():
    q = 30
    n_stocks = 10
    truth = zhawkes_model(np.array([[0.5, 0.0], [0.15, 0.4]]), np.array([[0.15, 1.0], [0.2, 0.15]]),
                          np.array([[0.2, 0.0], [0.1, 0.15]]), np.array([[0.1, 1.0], [0.1, 0.1]]), [1.0, 1.0], q)
    stocks, factor, _ = simulate_factor_universe([truth] * n_stocks, np.linspace(0.5, 1.5, n_stocks), 500_000, 0,
                                                 bins_per_day=1000)
    fc = calibrate_factor_model(stocks, factor, q, winsorize=1e-4)
    summary = cross_section_aggregate(fc.stocks)
    errs = {}
    for key, (arr, i, j) in {"phi_self": ("phi", 1, 1), "phi_factor": ("phi", 1, 0),
                             "k_self": ("k", 1, 1), "k_factor": ("k", 1, 0)}.items():
        errs[key] = l1_rel_error(summary.mean[key], getattr(truth, arr)[i, j])
    f0 = fc.decomposition.factor_returns.ravel()
    cov = max(abs(np.cov(e.ravel(), f0)[0, 1]) for e in fc.decomposition.residuals)
    ok = max(errs.values()) < 0.20 and cov < 1e-10
    detail = ", ".join(f"{k} {v:.3f}" for k, v in errs.items())
    report(12, ok, f"mean-profile l1 errors {detail} (< 0.20); max |cov(e_i, f0)| {cov:.1e} (< 1e-10)")
