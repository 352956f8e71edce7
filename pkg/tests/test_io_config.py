import numpy as np
import pytest

from mqarch import io
from mqarch.config import SCHEMA_VERSION, RunConfig, load_config
from mqarch.errors import ConfigError, DataError
from mqarch.model import ModelSpec2D, zhawkes_model
from mqarch.panel import BinnedPanel, EventStream


def full_model(rng, q=4):
    return ModelSpec2D(
        phi=rng.uniform(0, 0.05, (2, 2, q)),
        k=rng.normal(0, 0.1, (2, 2, q)),
        leverage=rng.normal(0, 0.1, (2, 2, q)),
        phi_cross=rng.normal(0, 0.02, (2, q)),
        sigma_inf_sq=rng.uniform(0.1, 1, 2),
        equal_time_cov=0.3,
        K_upper=rng.normal(0, 0.01, (2, 2, q, q)),
        k_cross=rng.normal(0, 0.01, (2, q, q)),
    )


class TestModelFiles:
    def test_round_trip_exact(self, tmp_path):
        m = full_model(np.random.default_rng(0))
        path = str(tmp_path / "m.csv")
        io.write_model(m, path)
        back = io.read_model(path)
        for name in ("phi", "k", "leverage", "phi_cross", "sigma_inf_sq", "K_upper", "k_cross"):
            np.testing.assert_array_equal(getattr(back, name), getattr(m, name))
        assert back.equal_time_cov == m.equal_time_cov

    def test_header(self, tmp_path):
        path = tmp_path / "m.csv"
        io.write_model(zhawkes_model(0.5, 0.1, 0.1, 0.1, [1.0], 3), str(path))
        assert path.read_text().splitlines()[0] == "kernel,target,source,lag1,lag2,value"

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            io.read_model(str(tmp_path / "nope.csv"))

    def test_wrong_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(DataError):
            io.read_model(str(path))

    def test_parametric_spec(self, tmp_path):
        path = tmp_path / "spec.csv"
        path.write_text(
            "kernel,target,source,norm,rate\n"
            "baseline,1,,0.003,\n"
            "linear,1,1,0.6,0.04\n"
            "zumbach,1,1,0.2,0.03\n"
        )
        base, grids = io.read_parametric_spec(str(path))
        pp = io.spec_to_point_process(base, grids)
        assert pp.mean_rate()[0] == pytest.approx(0.003 / 0.2)
        m = io.spec_to_model(base, grids, 10)
        np.testing.assert_array_equal(m.phi, zhawkes_model(0.6, 0.04, 0.2, 0.03, [0.003], 10).phi)

    def test_parametric_spec_bad_kernel(self, tmp_path):
        path = tmp_path / "spec.csv"
        path.write_text("kernel,target,source,norm,rate\nbaseline,1,,0.1,\nfoo,1,1,0.1,0.1\n")
        with pytest.raises(DataError):
            io.read_parametric_spec(str(path))


class TestPanelsAndEvents:
    def test_panel_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        p = BinnedPanel(rng.standard_normal((2, 3, 4)), np.abs(rng.standard_normal((2, 3, 4))),
                        days=["d1", "d2", "d3"], assets=["AAA", "BBB"])
        path = str(tmp_path / "p.csv")
        io.write_panel(p, path)
        back = io.read_panel(path)
        np.testing.assert_array_equal(back.returns, p.returns)
        np.testing.assert_array_equal(back.vol, p.vol)
        assert back.assets == ["AAA", "BBB"] and back.days == ["d1", "d2", "d3"]

    def test_incomplete_grid(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("day,bin,asset,return,vol\n0,0,a,0.1,1\n0,1,a,0.1,1\n1,0,a,0.1,1\n")
        with pytest.raises(DataError):
            io.read_panel(str(path))

    def test_events_round_trip(self, tmp_path):
        s1 = EventStream([0.5, 1.5], [1, -1], 10.0)
        s2 = EventStream([0.7], [-1], 10.0)
        path = str(tmp_path / "e.csv")
        io.write_events([s1, s2], path)
        back = io.read_events(path, horizon=10.0)
        np.testing.assert_array_equal(back[0].times, s1.times)
        np.testing.assert_array_equal(back[1].marks, s2.marks)

    def test_atomic_dir_discards_on_error(self, tmp_path):
        out = tmp_path / "out"
        with pytest.raises(RuntimeError):
            with io.atomic_output_dir(str(out)) as tmp:
                (tmp_path / "marker").write_text("x")
                open(f"{tmp}/partial.csv", "w").close()
                raise RuntimeError("boom")
        assert not out.exists()
        assert [p.name for p in tmp_path.iterdir()] == ["marker"]


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.get("run", "schema_version") == SCHEMA_VERSION
        assert cfg.get("calibrate", "steps") == (1, 2, 3, 4)

    def test_round_trip(self, tmp_path):
        cfg = RunConfig()
        cfg.set("calibrate", "q", 12)
        cfg.set("calibrate", "winsorize", 1e-4)
        cfg.set("calibrate", "steps", (1, 2))
        path = str(tmp_path / "c.ini")
        cfg.write(path)
        back = load_config(path)
        assert back.values == cfg.values

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[calibrate]\nqq = 3\n")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[plots]\nq = 3\n")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_bad_value_and_version(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[calibrate]\nq = many\n")
        with pytest.raises(ConfigError):
            load_config(str(path))
        path.write_text("[run]\nschema_version = 99\n")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_override_skips_none(self):
        cfg = RunConfig()
        cfg.override("calibrate", q=7, ridge=None)
        assert cfg.get("calibrate", "q") == 7 and cfg.get("calibrate", "ridge") == 0.0
        with pytest.raises(ConfigError):
            cfg.set("calibrate", "nope", 1)
