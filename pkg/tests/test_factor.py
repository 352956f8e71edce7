import numpy as np
import pytest

from mqarch.errors import DegenerateFactor, LengthMismatch
from mqarch.factor import (
    calibrate_factor_model,
    cross_section_aggregate,
    decompose,
    endogeneity,
    estimate_beta,
    simulate_factor_universe,
    squared_return_panel,
)
from mqarch.model import ModelSpec2D, spectral_radius, zhawkes_model
from mqarch.moments import estimate_suite
from mqarch.preprocess import mirror_augment
from mqarch.yulewalker import calibrate


def pair_model(q, nh_rf=0.15, nz_rf=0.1):
    return zhawkes_model(
        np.array([[0.5, 0.0], [nh_rf, 0.4]]),
        np.array([[0.15, 1.0], [0.2, 0.15]]),
        np.array([[0.2, 0.0], [nz_rf, 0.15]]),
        np.array([[0.1, 1.0], [0.1, 0.1]]),
        [1.0, 1.0],
        q,
    )


@pytest.fixture(scope="module")
def universe():
    q = 10
    models = [pair_model(q), pair_model(q, 0.0, 0.0), pair_model(q)]
    stocks, factor, paths = simulate_factor_universe(models, [0.8, 0.0, 1.2], 60_000, seed=2, bins_per_day=1000)
    return q, models, stocks, factor, paths


class TestBeta:
    def test_identity(self):
        f = np.random.default_rng(0).standard_normal(1000)
        assert estimate_beta(f, f) == pytest.approx(1.0, rel=1e-14)

    def test_independent(self):
        rng = np.random.default_rng(1)
        n = 100_000
        assert abs(estimate_beta(rng.standard_normal(n), rng.standard_normal(n))) < 4 / np.sqrt(n)

    def test_regression(self):
        rng = np.random.default_rng(2)
        n = 100_000
        f = rng.standard_normal(n)
        b = estimate_beta(0.5 * f + rng.standard_normal(n), f)
        assert abs(b - 0.5) < 4 / np.sqrt(n)

    def test_degenerate(self):
        with pytest.raises(DegenerateFactor):
            estimate_beta([1.0, 2.0], [3.0, 3.0])

    def test_length(self):
        with pytest.raises(LengthMismatch):
            estimate_beta([1.0, 2.0], [1.0, 2.0, 3.0])


class TestDecompose:
    def test_residuals_orthogonal(self, universe):
        _, _, stocks, factor, _ = universe
        dec = decompose(stocks, factor)
        f = dec.factor_returns.ravel()
        for e, r, b in zip(dec.residuals, stocks.returns, dec.beta):
            np.testing.assert_allclose(e, r - b * dec.factor_returns, rtol=0, atol=1e-15)
            assert abs(np.cov(e.ravel(), f)[0, 1]) < 1e-10

    def test_betas_close_to_truth(self, universe):
        _, _, stocks, factor, _ = universe
        np.testing.assert_allclose(decompose(stocks, factor).beta, [0.8, 0.0, 1.2], atol=0.03)

    def test_squared_return_panel(self, universe):
        _, _, _, factor, _ = universe
        p = squared_return_panel(factor.returns[0], factor)
        np.testing.assert_array_equal(p.sigma2, factor.returns ** 2)


class TestSimulateUniverse:
    def test_shared_factor(self, universe):
        _, _, stocks, factor, paths = universe
        assert stocks.n_assets == 3 and factor.n_assets == 1
        for p in paths:
            np.testing.assert_array_equal(p.returns[0], paths[0].returns[0])

    def test_factor_must_not_depend_on_residual(self):
        m = pair_model(5)
        m.phi[0, 1] = 0.01
        with pytest.raises(ValueError):
            simulate_factor_universe([m], [1.0], 2000, 0)


class TestCalibration:
    def test_factor_fit_equals_direct_1d(self, universe):
        q, _, stocks, factor, _ = universe
        fc = calibrate_factor_model(stocks, factor, q)
        fp = squared_return_panel(factor.returns[0], factor)
        direct = calibrate(estimate_suite(mirror_augment(fp), q), leverage_suite=estimate_suite(fp, q), q=q,
                           steps=(1, 4))
        np.testing.assert_array_equal(fc.factor.phi, direct.phi)
        np.testing.assert_array_equal(fc.factor.k, direct.k)
        for spec in fc.stocks:
            np.testing.assert_array_equal(spec.phi[0, 0], direct.phi[0, 0])
            assert not np.any(spec.phi[0, 1]) and not np.any(spec.k[0, 1])
            assert not np.any(spec.phi_cross)

    def test_decoupled_stock_small_factor_kernels(self, universe):
        q, models, stocks, factor, _ = universe
        fc = calibrate_factor_model(stocks, factor, q)
        spec = fc.stocks[1]
        self_norm = spec.phi[1, 1].sum()
        assert abs(spec.phi[1, 0].sum()) < 0.3 * self_norm
        assert np.sum(spec.k[1, 0] ** 2) < 0.3 * np.sum(spec.k[1, 1] ** 2)
        assert spec.meta["beta"] == pytest.approx(0.0, abs=0.03)


def spec_with(phi_self, phi_factor=0.0, q=3):
    m = ModelSpec2D.zeros(2, q)
    m.phi[1, 1] = phi_self
    m.phi[1, 0] = phi_factor
    m.phi[0, 0] = 0.1
    return m


class TestAggregate:
    def test_single_spec(self):
        s = spec_with(0.2)
        out = cross_section_aggregate([s])
        np.testing.assert_array_equal(out.mean["phi_self"], s.phi[1, 1])
        assert not np.any(out.std["phi_self"])

    def test_opposite_specs(self):
        out = cross_section_aggregate([spec_with(0.0, 0.05), spec_with(0.0, -0.05)])
        np.testing.assert_allclose(out.mean["phi_factor"], 0.0)
        np.testing.assert_allclose(out.std["phi_factor"], 0.05)

    def test_target_norm(self):
        q = 10
        targets = [0.90, 0.94, 0.98]
        specs = [spec_with(t / q, q=q) for t in targets]
        out = cross_section_aggregate(specs, tickers=["a", "b", "c"])
        assert out.mean["phi_self"].sum() == pytest.approx(0.94, rel=1e-12)
        assert [r["ticker"] for r in out.norm_rows()] == ["a", "b", "c"]

    def test_duplicated_list(self):
        specs = [spec_with(0.1, 0.02), spec_with(0.3, 0.01)]
        a = cross_section_aggregate(specs)
        b = cross_section_aggregate(specs + specs)
        for k in a.mean:
            np.testing.assert_allclose(a.mean[k], b.mean[k], rtol=1e-15)
            np.testing.assert_allclose(a.std[k], b.std[k], rtol=1e-12)

    def test_empty(self):
        with pytest.raises(LengthMismatch):
            cross_section_aggregate([])


class TestEndogeneity:
    def test_triangular_rules_agree(self):
        m = spec_with(0.2, 0.05)
        out = endogeneity(m)
        assert out["spectral_radius"] == pytest.approx(out["max_rule"], rel=1e-14)
        assert out["spectral_radius"] == pytest.approx(spectral_radius(m.norms()))
        assert out["max_rule"] == pytest.approx(0.6)
