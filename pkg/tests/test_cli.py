import csv
import json

import numpy as np
import pytest

from catcoef import cli, mcsim


def _write_dgp1_csv(path, n=10_000, seed=42):
    spec = mcsim.DgpSpec(n=n, kind="baseline", parametrization="high")
    sample, truth = mcsim.generate(spec, seed)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["wage", "edu", "exper", "tenure"])
        for i in range(sample.n):
            writer.writerow(
                [repr(float(sample.y[i])), repr(float(sample.x[i])),
                 repr(float(sample.z[i, 1])), repr(float(sample.z[i, 2]))]
            )
    return truth


class TestEstimate:
    def test_synthetic_dgp1_within_table_bands(self, tmp_path):
        csv_path = tmp_path / "dgp1.csv"
        out_path = tmp_path / "fit.json"
        _write_dgp1_csv(csv_path)
        code = cli.main(
            [
                "estimate",
                "--input", str(csv_path),
                "--outcome", "wage",
                "--focal", "edu",
                "--covariates", "exper,tenure",
                "--k", "2",
                "--out", str(out_path),
            ]
        )
        assert code == 0
        result = json.loads(out_path.read_text())
        pi = result["distribution"]["pi"]
        b = result["distribution"]["b"]
        # +-3 RMSE bands around the published n = 10,000 values
        assert abs(pi[0] - 0.5) < 3 * 0.0301
        assert abs(b[0] - 1.0) < 3 * 0.0365
        assert abs(b[1] - 2.0) < 3 * 0.0362
        assert result["ratio_high_low"]["se"] > 0
        assert 0.8 < result["kappa_squared"] < 1.0
        assert result["phi"]["names"][0] == "E_beta"

    def test_json_round_trips_exactly(self, tmp_path):
        csv_path = tmp_path / "dgp1.csv"
        out_path = tmp_path / "fit.json"
        _write_dgp1_csv(csv_path, n=2_000, seed=9)
        args = [
            "estimate", "--input", str(csv_path), "--outcome", "wage",
            "--focal", "edu", "--covariates", "exper,tenure", "--out", str(out_path),
        ]
        assert cli.main(args) == 0
        first = out_path.read_text()
        assert cli.main(args) == 0
        assert out_path.read_text() == first
        payload = json.loads(first)
        assert json.dumps(payload, indent=2, sort_keys=True) + "\n" == first

    def test_constant_focal_column_exits_1(self, tmp_path, capsys):
        csv_path = tmp_path / "const.csv"
        rng = np.random.default_rng(0)
        with open(csv_path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["y", "x"])
            for _ in range(200):
                writer.writerow([repr(float(rng.normal())), "1.0"])
        code = cli.main(
            ["estimate", "--input", str(csv_path), "--outcome", "y", "--focal", "x"]
        )
        assert code == 1

    def test_homogeneous_slope_exits_2_with_point_mass(self, tmp_path):
        rng = np.random.default_rng(1)
        n = 5_000
        x = (rng.chisquare(2, n) - 2) / 2
        z = rng.normal(size=n)
        y = 2.0 * x + z + rng.normal(size=n)
        csv_path = tmp_path / "homog.csv"
        out_path = tmp_path / "fit.json"
        with open(csv_path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["y", "x", "z"])
            for i in range(n):
                writer.writerow([repr(float(y[i])), repr(float(x[i])), repr(float(z[i]))])
        code = cli.main(
            [
                "estimate", "--input", str(csv_path), "--outcome", "y",
                "--focal", "x", "--covariates", "z", "--out", str(out_path),
            ]
        )
        assert code == 2
        result = json.loads(out_path.read_text())
        assert "pi_not_identified" in result["flags"]
        assert len(result["distribution"]["pi"]) == 1
        assert result["distribution"]["b"][0] == pytest.approx(2.0, abs=0.1)
        assert result["ratio_high_low"] is None

    def test_missing_column_exits_1(self, tmp_path, capsys):
        csv_path = tmp_path / "bad.csv"
        csv_path.write_text("a,b\n1,2\n")
        code = cli.main(
            ["estimate", "--input", str(csv_path), "--outcome", "y", "--focal", "x"]
        )
        assert code == 1
        assert "missing columns" in capsys.readouterr().err

    def test_non_numeric_cell_names_line_and_column(self, tmp_path, capsys):
        csv_path = tmp_path / "bad.csv"
        csv_path.write_text("y,x\n1.0,2.0\n1.5,oops\n")
        code = cli.main(
            ["estimate", "--input", str(csv_path), "--outcome", "y", "--focal", "x"]
        )
        assert code == 1
        err = capsys.readouterr().err
        assert ":3:" in err and "'x'" in err


class TestSimulate:
    def test_reps_zero_is_usage_error(self, tmp_path, capsys):
        code = cli.main(
            ["simulate", "--dgp", "baseline", "--n", "100", "--reps", "0",
             "--out", str(tmp_path / "r")]
        )
        assert code == 1
        assert "--reps" in capsys.readouterr().err

    def test_byte_identical_outputs(self, tmp_path, capsys):
        args = [
            "simulate", "--dgp", "baseline", "--var", "high", "--n", "200",
            "--reps", "5", "--seed", "1", "--estimator", "ols",
        ]
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert cli.main(args + ["--out", str(out1)]) == 0
        assert cli.main(args + ["--out", str(out2)]) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_power_grid_csv(self, tmp_path, capsys):
        out = tmp_path / "p"
        code = cli.main(
            [
                "simulate", "--dgp", "baseline", "--n", "200", "--reps", "4",
                "--seed", "3", "--estimator", "ols", "--power-span", "0.2",
                "--power-points", "5", "--out", str(out), "--format", "csv",
            ]
        )
        assert code == 0
        lines = (tmp_path / "p_power.csv").read_text().splitlines()
        assert lines[0] == "parameter,theta_delta,rejection_rate"
        assert not (tmp_path / "p.json").exists()

    def test_report_is_loadable(self, tmp_path, capsys):
        out = tmp_path / "rep"
        code = cli.main(
            ["simulate", "--n", "300", "--reps", "6", "--seed", "5",
             "--estimator", "gmm_moments", "--out", str(out), "--format", "json"]
        )
        assert code == 0
        payload = json.loads((tmp_path / "rep.json").read_text())
        names = [p["name"] for p in payload["parameters"]]
        assert names == ["m1", "m2", "m3"]


class TestInvertMoments:
    def test_high_variance_tuple(self, capsys):
        code = cli.main(["invert-moments", "--k", "2", "--moments", "1.5,2.5,4.5"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["pi"] == pytest.approx([0.5, 0.5])
        assert payload["b"] == pytest.approx([1.0, 2.0])
        assert payload["kappa_squared"] == pytest.approx(0.9)

    def test_three_category_tuple(self, tmp_path):
        out = tmp_path / "theta.json"
        code = cli.main(
            ["invert-moments", "--k", "3",
             "--moments", "2.1,5.1,13.5,37.5,107.1", "--out", str(out)]
        )
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["pi"] == pytest.approx([0.3, 0.3, 0.4], abs=1e-8)
        assert payload["b"] == pytest.approx([1.0, 2.0, 3.0], abs=1e-8)

    def test_degenerate_moments_exit_2(self, capsys):
        code = cli.main(["invert-moments", "--k", "2", "--moments", "2,4,8"])
        assert code == 2
        assert "identification failure" in capsys.readouterr().err

    def test_wrong_count_exit_1(self, capsys):
        code = cli.main(["invert-moments", "--k", "2", "--moments", "1.5,2.5"])
        assert code == 1


def test_unknown_command_is_usage_error(capsys):
    assert cli.main(["frobnicate"]) == 1
