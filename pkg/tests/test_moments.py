import numpy as np
import pytest

from mqarch.errors import InsufficientBins, NonSymmetric
from mqarch.model import zhawkes_model
from mqarch.moments import (
    estimate_suite,
    estimate_three_point,
    estimate_two_point,
    fit_smooth,
    rank_one_approx,
    smooth_suite,
)
from mqarch.panel import BinnedPanel
from mqarch.preprocess import mirror_augment
from mqarch.simulate import simulate_mqarch


@pytest.fixture(scope="module")
def zpanel():
    m = zhawkes_model(np.array([[0.4, 0.1], [0.1, 0.3]]), 0.1, np.array([[0.15, 0.05], [0.05, 0.15]]), 0.08,
                      [1.0, 0.8], 40)
    return simulate_mqarch(m, 200_000, seed=0).to_binned(1000)


def iid_panel(n_assets=1, n_days=100, bins=1000, seed=0):
    rng = np.random.default_rng(seed)
    vol = np.exp(0.1 * rng.standard_normal((n_assets, n_days, bins)))
    return BinnedPanel(rng.standard_normal(vol.shape), vol)


def naive_C(panel, j, l, tau, q):
    # within-day window: bins q..B-1, centered volatility
    s2 = panel.sigma2[j][:, q:]
    r2 = panel.returns[l][:, q - tau : panel.bins_per_day - tau] ** 2
    return float(np.mean((s2 - s2.mean()) * r2))


class TestTwoPoint:
    def test_iid_C_small(self):
        p = iid_panel()
        c = estimate_two_point(p, "C", 0, 0, 10)[1:]
        assert np.all(np.abs(c) < 4 / np.sqrt(p.returns.size) * 3)

    def test_C_matches_naive(self, zpanel):
        q = 8
        c = estimate_two_point(zpanel, "C", 1, 0, q)
        for tau in (1, 3, 8):
            assert c[tau] == pytest.approx(naive_C(zpanel, 1, 0, tau, q), rel=1e-10)

    def test_V_zero_on_mirror(self, zpanel):
        v = estimate_two_point(mirror_augment(zpanel), "V", 0, 1, 10)
        assert np.all(v == 0.0)

    def test_insufficient_bins(self):
        with pytest.raises(InsufficientBins):
            estimate_two_point(iid_panel(bins=10), "C", 0, 0, 10)


class TestThreePoint:
    def test_iid_offdiag_small(self):
        p = iid_panel(seed=1)
        d = estimate_three_point(p, "D", (0, 0), 6)[1:, 1:]
        off = d[~np.eye(6, dtype=bool)]
        assert np.max(np.abs(off)) < 5 / np.sqrt(p.returns.size)

    def test_diagonal_equals_C(self, zpanel):
        s = estimate_suite(zpanel, 10)
        for j in range(2):
            for l in range(2):
                np.testing.assert_allclose(np.diag(s.D(j, l)), s.C(j, l), rtol=1e-12, atol=0)

    def test_D_symmetric_Dx_not(self, zpanel):
        s = estimate_suite(zpanel, 6)
        d = s.D(0, 0)
        np.testing.assert_array_equal(d, d.T)
        assert not np.allclose(s.Dx(0), s.Dx(0).T, rtol=0, atol=0)

    def test_zumbach_shape(self, zpanel):
        q = 20
        d = estimate_suite(zpanel, q).D(0, 0)[1:, 1:]
        off = d - np.diag(np.diag(d))
        k, _ = rank_one_approx(off)
        k = k / np.linalg.norm(k)
        truth = np.exp(-0.08 * np.arange(1, q + 1))
        truth /= np.linalg.norm(truth)
        assert float(k @ truth) > 0.9


class TestMirrorInvariance:
    def test_even_moments_and_zero_leverage(self, zpanel):
        s = estimate_suite(zpanel, 8)
        m = estimate_suite(mirror_augment(zpanel), 8)
        for j in range(2):
            for l in range(2):
                np.testing.assert_allclose(m.C(j, l), s.C(j, l), rtol=1e-12, atol=1e-14)
                np.testing.assert_allclose(m.D(j, l), s.D(j, l), rtol=1e-12, atol=1e-14)
                assert np.all(m.V(j, l) == 0.0)
            np.testing.assert_allclose(m.Dx(j), s.Dx(j), rtol=1e-12, atol=1e-14)


class TestLinearity:
    def test_concatenation_averages(self):
        a = iid_panel(seed=2, n_days=20, bins=50)
        b = iid_panel(seed=3, n_days=20, bins=50)
        ab = BinnedPanel(np.concatenate([a.returns, b.returns], 1), np.concatenate([a.vol, b.vol], 1))
        sa, sb, sab = (estimate_suite(p, 5) for p in (a, b, ab))
        # uncentered moments average exactly; centered ones also shift the means
        np.testing.assert_allclose(sab.Vr(0, 0), 0.5 * (sa.Vr(0, 0) + sb.Vr(0, 0)), rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(sab.Dp(0, 0, 0, 0), 0.5 * (sa.Dp(0, 0, 0, 0) + sb.Dp(0, 0, 0, 0)),
                                   rtol=1e-12, atol=1e-15)


class TestFitSmooth:
    def test_power_law_table_row(self):
        tau = np.arange(1, 51, dtype=float)
        curve = 3.0845 * np.exp(-1e-8 * tau) * (1 + 10 * tau) ** -0.740
        fit = fit_smooth(curve, "power_law_exp")
        assert fit.params["n"] == pytest.approx(3.0845, rel=1e-4)
        assert fit.params["alpha"] == pytest.approx(0.740, rel=1e-4)
        assert fit.params["gamma"] == pytest.approx(10.0, rel=1e-4)

    def test_exponential_exact(self):
        curve = np.exp(-0.1 * np.arange(1, 31))
        fit = fit_smooth(curve, "exp")
        assert fit.sse < 1e-18
        assert fit.params["b"] == pytest.approx(0.1, rel=1e-8)

    def test_noisy_power_law(self):
        # with gamma = 10 the amplitude is not identifiable at 1% noise (Fisher sd ~17%),
        # so the perturbation study uses gamma = 0.3 where the bound is ~1.2%
        rng = np.random.default_rng(0)
        tau = np.arange(1, 51, dtype=float)
        clean = 3.0845 * (1 + 0.3 * tau) ** -0.740
        errs = []
        for _ in range(20):
            fit = fit_smooth(clean * (1 + 0.01 * rng.standard_normal(50)), "power_law_exp")
            errs.append(abs(fit.params["n"] / 3.0845 - 1))
        assert np.median(errs) < 0.05

    def test_zero_curve(self):
        assert fit_smooth(np.zeros(10), "exp").sse == 0.0


class TestRankOne:
    def test_zero(self):
        k, ratio = rank_one_approx(np.zeros((4, 4)))
        assert not np.any(k) and ratio == float("inf")

    def test_recovers_offdiagonal(self):
        k0 = np.array([1.0, 0.5, 0.25])
        m = np.outer(k0, k0) - np.diag(k0 ** 2)
        k, _ = rank_one_approx(m)
        rec = np.outer(k, k)
        mask = ~np.eye(3, dtype=bool)
        assert k.sum() >= 0
        # the leading eigenpair of the masked matrix is not k0 itself
        lam, vec = np.linalg.eigh(m)
        lead = lam[-1] * np.outer(vec[:, -1], vec[:, -1])
        np.testing.assert_allclose(rec, lead, atol=1e-12)
        assert np.linalg.norm((rec - m)[mask]) < np.linalg.norm(m[mask])

    def test_tie_break_deterministic(self):
        m = np.zeros((4, 4))
        m[0, 1] = m[1, 0] = 1.0
        m[2, 3] = m[3, 2] = 1.0
        k1, r1 = rank_one_approx(m)
        k2, _ = rank_one_approx(m.copy())
        np.testing.assert_array_equal(k1, k2)
        assert r1 == 1.0

    def test_nonsymmetric(self):
        with pytest.raises(NonSymmetric):
            rank_one_approx(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestSmoothSuite:
    def test_raw_kept_and_fits_reported(self, zpanel):
        s = estimate_suite(zpanel, 10)
        sm, fits = smooth_suite(s)
        assert ("C", 0, 0) in fits and ("Dx", 1) in fits
        np.testing.assert_array_equal(sm.Cr(0, 0), s.Cr(0, 0))
        assert sm.meta["smoothed"] == ["C", "Dx", "D", "V"]
        assert not np.array_equal(sm.C(0, 0), s.C(0, 0))
