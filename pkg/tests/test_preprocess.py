import numpy as np
import pytest

from mqarch.errors import InsufficientHistory, InvalidBar, SingularCorrelation
from mqarch.panel import BinnedPanel
from mqarch.preprocess import (
    OhlcPanel,
    martingalise,
    mirror_augment,
    normalize_intraday,
    normalize_trailing,
    ohlc_to_returns_vol,
)


def bar(o, h, l, c):
    return OhlcPanel(*(np.full((1, 1, 1), x, dtype=float) for x in (o, h, l, c)))


def within_day_lag1_corr(r):
    cur, prev = r[:, 1:].ravel(), r[:, :-1].ravel()
    return float(np.mean(cur * prev) / np.mean(r * r))


class TestOhlc:
    def test_flat_bar(self):
        p = ohlc_to_returns_vol(bar(100, 100, 100, 100))
        assert p.returns.item() == 0.0 and p.vol.item() == 0.0

    def test_up_bar(self):
        p = ohlc_to_returns_vol(bar(100, 101.5, 99.5, 101))
        assert p.returns.item() == pytest.approx(np.log(1.01), rel=1e-14)
        assert p.vol.item() == pytest.approx(0.02 / 3 + 2 * 0.01 / 3, rel=1e-14)
        assert p.vol.item() == pytest.approx(0.013333, abs=1e-6)

    def test_down_bar_uses_absolute_move(self):
        p = ohlc_to_returns_vol(bar(100, 100.5, 98.5, 99))
        assert p.returns.item() < 0
        assert p.vol.item() == pytest.approx(0.02 / 3 + 2 * 0.01 / 3, rel=1e-14)

    @pytest.mark.parametrize("o,h,l,c", [(0, 1, 0, 1), (100, 99, 98, 100), (100, 101, 100.5, 100)])
    def test_invalid(self, o, h, l, c):
        with pytest.raises(InvalidBar):
            ohlc_to_returns_vol(bar(o, h, l, c))


class TestTrailing:
    def test_constant_maps_to_one(self):
        v = np.full((1, 30, 5), 2.5)
        out = normalize_trailing(BinnedPanel(v, v), window_days=10)
        assert out.n_days == 20
        np.testing.assert_allclose(out.vol, 1.0, rtol=1e-14)

    def test_level_shift_removed(self):
        rng = np.random.default_rng(0)
        n_days = 2000
        level = np.where(np.arange(n_days) < n_days // 2, 1.0, 2.0)[None, :, None]
        vol = level * np.exp(0.2 * rng.standard_normal((1, n_days, 10)))
        out = normalize_trailing(BinnedPanel(vol * rng.standard_normal(vol.shape), vol), window_days=100)
        s2 = out.sigma2[0]
        first, second = s2[: s2.shape[0] // 2 - 200].mean(), s2[s2.shape[0] // 2 + 200 :].mean()
        assert second / first == pytest.approx(1.0, abs=0.05)

    def test_window_too_long(self):
        v = np.ones((1, 5, 3))
        with pytest.raises(InsufficientHistory):
            normalize_trailing(BinnedPanel(v, v), window_days=5)


class TestIntraday:
    def test_profile_removed_exactly(self):
        g = 1.0 + np.cos(np.linspace(0, np.pi, 20)) ** 2
        vol = np.broadcast_to(g, (1, 7, 20))
        out = normalize_intraday(BinnedPanel(vol, vol))
        np.testing.assert_allclose(out.vol, 1.0, rtol=1e-14)

    def test_flat_profile_is_global_scale(self):
        rng = np.random.default_rng(1)
        vol = np.full((1, 50, 8), 3.0)
        r = rng.standard_normal(vol.shape)
        out = normalize_intraday(BinnedPanel(r, vol))
        np.testing.assert_allclose(out.returns, r / 3.0, rtol=1e-14)

    def test_sinusoidal_profile_monte_carlo(self):
        rng = np.random.default_rng(2)
        g = 1.0 + 0.5 * np.sin(np.linspace(0, 2 * np.pi, 30))
        vol = g * np.exp(0.3 * rng.standard_normal((1, 10_000, 30)))
        out = normalize_intraday(BinnedPanel(vol * rng.standard_normal(vol.shape), vol))
        prof = out.sigma2[0].mean(axis=0)
        assert np.max(np.abs(prof - 1.0)) < 0.02

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        vol = np.abs(rng.standard_normal((2, 40, 12))) + 0.1
        p = BinnedPanel(rng.standard_normal(vol.shape), vol)
        once = normalize_intraday(p)
        twice = normalize_intraday(once)
        np.testing.assert_allclose(twice.vol, once.vol, atol=1e-10)
        np.testing.assert_allclose(twice.returns, once.returns, atol=1e-10)


class TestMartingalise:
    def test_white_noise_unchanged(self):
        rng = np.random.default_rng(4)
        r = rng.standard_normal((1, 200, 500))
        out = martingalise(BinnedPanel(r, np.ones_like(r)))
        z = (r - r.mean()) / r.std()
        assert np.max(np.abs(out.returns - z)) < 0.05
        assert abs(out.meta["lag1_regression"][0][0]) < 0.01

    def test_ar1_whitened(self):
        rng = np.random.default_rng(5)
        eps = rng.standard_normal((100, 1000))
        r = np.zeros_like(eps)
        r[:, 0] = eps[:, 0]
        for t in range(1, eps.shape[1]):
            r[:, t] = 0.3 * r[:, t - 1] + eps[:, t]
        out = martingalise(BinnedPanel(r, np.ones_like(r)))
        assert abs(within_day_lag1_corr(out.returns[0])) < 0.01
        assert out.returns.std() == pytest.approx(1.0, rel=1e-12)

    def test_cross_lag_whitened(self):
        rng = np.random.default_rng(6)
        e = rng.standard_normal((2, 100, 1000))
        r = e.copy()
        r[1, :, 1:] += 0.2 * r[0, :, :-1]
        out = martingalise(BinnedPanel(r, np.ones_like(r))).returns
        cross = np.mean(out[1, :, 1:] * out[0, :, :-1])
        assert abs(cross) < 3 / np.sqrt(out[0, :, 1:].size)

    def test_singular_correlation(self):
        r = np.random.default_rng(7).standard_normal((1, 10, 20))
        r = np.concatenate([r, r])
        with pytest.raises(SingularCorrelation):
            martingalise(BinnedPanel(r, np.ones_like(r)))


class TestMirror:
    def test_cardinality_and_signs(self):
        rng = np.random.default_rng(8)
        p = BinnedPanel(rng.standard_normal((2, 5, 4)), np.ones((2, 5, 4)), days=list("abcde"))
        m = mirror_augment(p)
        assert m.n_days == 10 and m.stage == "mirrored"
        np.testing.assert_array_equal(m.returns[:, 5:], -p.returns)
        np.testing.assert_array_equal(m.vol[:, 5:], p.vol)
        assert m.days[5] == "a~mirror"
