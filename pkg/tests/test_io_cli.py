import json
import math
from pathlib import Path

import numpy as np
import pytest

from jointscan.cli import run_cli
from jointscan.io import (SIM_MODEL, ConfigError, InputError, ModelSpec, dumps_report, ingest,
                          parse_config, write_simulated)
from jointscan.simulate import SimConfig, simulate_dataset

GOLDEN = Path(__file__).parent / "data" / "golden_report_n80_seed3.json"
SIM_FIT_CONFIG = {"model": {"fixed": ["time", "x2"], "random": ["time"], "survival": ["x1", "x2"],
                            "n_causes": 2}}


def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture
def config_file(tmp_path):
    return write(tmp_path / "cfg.json", json.dumps(SIM_FIT_CONFIG))


def toy_pair(tmp_path, long_rows, surv_rows, long_header="id,time,y", surv_header="id,obs_time,cause"):
    lp = write(tmp_path / "long.csv", "\n".join([long_header] + long_rows) + "\n")
    sp = write(tmp_path / "surv.csv", "\n".join([surv_header] + surv_rows) + "\n")
    return lp, sp


class TestIngest:
    def test_two_subject_toy(self, tmp_path):
        lp, sp = toy_pair(tmp_path, ["a,0,1.0", "a,1,2.0", "b,0,0.5"], ["a,1.5,1", "b,3,0"])
        ds = ingest(lp, sp, ModelSpec(n_causes=1))
        assert ds.n == 2 and ds.ids == ["a", "b"]
        assert [ds.ids[i] for i in ds.desc_order] == ["b", "a"]
        np.testing.assert_array_equal(ds.X, [[1, 0], [1, 1], [1, 0]])

    def test_cause_out_of_range_names_row(self, tmp_path):
        lp, sp = toy_pair(tmp_path, ["a,0,1.0"], ["a,1.5,1", "b,2,3"])
        with pytest.raises(InputError, match=r"surv.csv:3: cause 3 outside 0..2"):
            ingest(lp, sp, ModelSpec())

    def test_duplicate_measurement(self, tmp_path):
        lp, sp = toy_pair(tmp_path, ["a,0,1.0", "a,0,1.5"], ["a,1.5,1"])
        with pytest.raises(InputError, match="rows 2 and 3"):
            ingest(lp, sp, ModelSpec())

    def test_unknown_id(self, tmp_path):
        lp, sp = toy_pair(tmp_path, ["z,0,1.0"], ["a,1.5,1"])
        with pytest.raises(InputError, match="'z' missing from survival file"):
            ingest(lp, sp, ModelSpec())

    def test_post_event_rows(self, tmp_path):
        lp, sp = toy_pair(tmp_path, ["a,0,1.0", "a,2,1.0", "a,3,1.0"], ["a,1.5,1"])
        with pytest.raises(InputError, match="rows 3, 4"):
            ingest(lp, sp, ModelSpec())
        assert ingest(lp, sp, ModelSpec(), drop_post_event=True).n_total_obs == 1

    def test_missing_column_is_config_error(self, tmp_path):
        lp, sp = toy_pair(tmp_path, ["a,0,1.0"], ["a,1.5,1"])
        with pytest.raises(ConfigError, match="x3"):
            ingest(lp, sp, ModelSpec(survival=["x3"]))

    def test_bad_number(self, tmp_path):
        lp, sp = toy_pair(tmp_path, ["a,0,oops"], ["a,1.5,1"])
        with pytest.raises(InputError, match="long.csv:2: column 'y'"):
            ingest(lp, sp, ModelSpec())

    def test_round_trip_is_exact(self, tmp_path):
        cfg = SimConfig(n=150, seed=51)
        lp, sp = write_simulated(cfg, tmp_path / "sim")
        got = ingest(lp, sp, SIM_MODEL)
        want = simulate_dataset(cfg)
        assert got.ids == want.ids
        for name in ("obs_subject", "obs_times", "y", "X", "Z", "W", "T", "D", "desc_order"):
            np.testing.assert_array_equal(getattr(got, name), getattr(want, name), err_msg=name)
        assert got.names() == want.names()


class TestConfig:
    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            parse_config({"em": {"tolerance": 1}})
        with pytest.raises(ConfigError, match="sections"):
            parse_config({"fitting": {}})

    def test_quadrature_block(self):
        cfg = parse_config({"quadrature": {"mode": "standard", "n_q": 12}, "se": {"enabled": False}})
        assert cfg.em.quad_mode == "standard" and cfg.em.n_q == 12 and cfg.se is False

    def test_invalid_value(self):
        with pytest.raises(ConfigError, match="em block"):
            parse_config({"em": {"tol": -1}})


class TestReportEncoding:
    def test_floats_round_trip(self):
        vals = [0.1, 1 / 3, 2.0 ** -1074, 1e300, -123456.789012345678]
        text = dumps_report({"v": vals, "nan": math.nan})
        back = json.loads(text)
        assert back["v"] == vals and back["nan"] is None


class TestCli:
    def test_simulate_is_byte_identical(self, tmp_path, capsys):
        for tag in ("a", "b"):
            assert run_cli(["simulate", "--out-prefix", str(tmp_path / tag), "--seed", "9", "--n", "40"]) == 0
        for suffix in ("_long.csv", "_surv.csv"):
            assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()

    def test_missing_column_exits_2(self, tmp_path, capsys):
        run_cli(["simulate", "--out-prefix", str(tmp_path / "s"), "--n", "20"])
        cfg = write(tmp_path / "c.json", json.dumps({"model": {"survival": ["x3"]}}))
        code = run_cli(["fit", "--config", str(cfg), "--long", str(tmp_path / "s_long.csv"),
                        "--surv", str(tmp_path / "s_surv.csv")])
        assert code == 2
        assert "x3" in capsys.readouterr().err

    def test_usage_errors_exit_2(self, capsys):
        assert run_cli(["fit"]) == 2
        assert run_cli(["frobnicate"]) == 2
        assert run_cli(["bench", "--methods", "fastest"]) == 2

    def test_unreadable_config_exits_2(self, tmp_path, capsys):
        bad = write(tmp_path / "bad.json", "{not json")
        assert run_cli(["simulate", "--config", str(bad), "--out-prefix", str(tmp_path / "x")]) == 2

    def test_fit_smoke_n500(self, tmp_path, config_file, capsys):
        run_cli(["simulate", "--out-prefix", str(tmp_path / "s"), "--seed", "52", "--n", "500"])
        out = tmp_path / "r.json"
        code = run_cli(["fit", "--config", str(config_file), "--long", str(tmp_path / "s_long.csv"),
                        "--surv", str(tmp_path / "s_surv.csv"), "--out", str(out)])
        assert code == 0
        rep = json.loads(out.read_text())
        assert rep["converged"] is True and rep["report_version"] == 1
        assert set(rep["estimates"]) == set(rep["standard_errors"])
        assert len(rep["estimates"]) == 3 + 3 + 1 + 2 * 2 + 2 * 2
        assert all(v > 0 for v in rep["standard_errors"].values())
        assert "timing_seconds" in rep

    def test_golden_report(self, tmp_path, config_file, capsys):
        run_cli(["simulate", "--out-prefix", str(tmp_path / "s"), "--seed", "3", "--n", "80"])
        out = tmp_path / "r.json"
        assert run_cli(["se", "--config", str(config_file), "--long", str(tmp_path / "s_long.csv"),
                        "--surv", str(tmp_path / "s_surv.csv"), "--out", str(out), "--omit-timing"]) == 0
        got, want = json.loads(out.read_text()), json.loads(GOLDEN.read_text())
        assert_same_report(got, want)


def assert_same_report(got, want, path="report"):
    """Same structure and keys; numbers equal to 1e-9 relative (platform rounding)."""
    assert type(got) is type(want) or {type(got), type(want)} <= {int, float}, path
    if isinstance(want, dict):
        assert list(got) == list(want), path
        for k in want:
            assert_same_report(got[k], want[k], f"{path}.{k}")
    elif isinstance(want, list):
        assert len(got) == len(want), path
        for i, (g, w) in enumerate(zip(got, want)):
            assert_same_report(g, w, f"{path}[{i}]")
    elif isinstance(want, float):
        assert got == pytest.approx(want, rel=1e-9, abs=1e-12), path
    else:
        assert got == want, path
