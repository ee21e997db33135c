import json

import numpy as np
import pytest

from catcoef import mcsim
from catcoef.core import CategoricalDistribution, EstimationError


class TestGenerate:
    def test_baseline_standardization(self):
        spec = mcsim.DgpSpec(n=1_000_000, kind="baseline", parametrization="high")
        sample, truth = mcsim.generate(spec, 2026)
        assert abs(sample.x.mean()) < 0.005
        assert abs(sample.x.var() - 1.0) < 0.01
        assert abs(np.mean(truth["beta"] == 1.0) - 0.5) < 0.002
        assert abs(np.mean(truth["u"] ** 2) - 1.0) < 0.01

    def test_categorical_u_error_moment(self):
        # halves mix E(u^2) = 2 (chi-squared scale) and 1 (standardized)
        spec = mcsim.DgpSpec(n=1_000_000, kind="categorical_u", parametrization="high")
        _, truth = mcsim.generate(spec, 7)
        assert abs(np.mean(truth["u"] ** 2) - 1.5) < 0.01

    def test_categorical_x_half_shift(self):
        spec = mcsim.DgpSpec(n=200_000, kind="categorical_x", parametrization="high")
        sample, _ = mcsim.generate(spec, 3)
        half = spec.n // 2
        assert abs(sample.x[:half].mean()) < 0.02
        # second half keeps the chi-squared(4) location as written: mean 1/2
        assert abs(sample.x[half:].mean() - 0.5) < 0.02
        assert abs(sample.x[half:].var() - 0.5) < 0.02

    def test_low_variance_distribution(self):
        spec = mcsim.DgpSpec(n=500_000, kind="baseline", parametrization="low")
        _, truth = mcsim.generate(spec, 11)
        assert abs(np.mean(truth["beta"] == 0.5) - 0.3) < 0.005
        assert truth["theta"].b[1] == pytest.approx(1.345)

    def test_outcome_assembled_from_parts(self):
        spec = mcsim.DgpSpec(n=500, kind="baseline", parametrization="high")
        sample, truth = mcsim.generate(spec, 5)
        rebuilt = (
            sample.x * truth["beta"] + sample.z @ truth["gamma_full"] + truth["u"]
        )
        assert np.allclose(sample.y, rebuilt, atol=1e-12)
        assert np.allclose(sample.z[:, 0], 1.0)

    def test_determinism(self):
        spec = mcsim.DgpSpec(n=300, kind="baseline", parametrization="high")
        a, _ = mcsim.generate(spec, 99)
        b, _ = mcsim.generate(spec, 99)
        assert np.array_equal(a.y, b.y) and np.array_equal(a.x, b.x)
        c, _ = mcsim.generate(spec, 100)
        assert not np.array_equal(a.y, c.y)

    def test_hetero_noise_fixed_across_replications(self):
        spec = mcsim.DgpSpec(n=10_000, kind="hetero", hetero_alpha=0.5)
        noise = mcsim.hetero_fixed_noise(17, spec)
        assert noise.size == 100
        assert np.array_equal(noise, mcsim.hetero_fixed_noise(17, spec))
        # the same fixed draws enter every replication
        _, t1 = mcsim.generate(spec, mcsim._replication_seed(17, 0), fixed_noise=noise)
        _, t2 = mcsim.generate(spec, mcsim._replication_seed(17, 1), fixed_noise=noise)
        assert not np.array_equal(t1["u"], t2["u"])  # base errors differ

    def test_k3_kind_uses_three_categories(self):
        spec = mcsim.DgpSpec(n=100, kind="k3")
        assert spec.k == 3
        _, truth = mcsim.generate(spec, 1)
        assert set(np.unique(truth["beta"])) <= {1.0, 2.0, 3.0}

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            mcsim.DgpSpec(n=100, kind="nope")
        with pytest.raises(ValueError):
            mcsim.DgpSpec(n=100, parametrization="custom")
        with pytest.raises(ValueError):
            mcsim.DgpSpec(n=5)


class TestRunStudy:
    def test_single_replication_smoke(self):
        spec = mcsim.DgpSpec(n=500, kind="baseline", parametrization="high")
        cfg = mcsim.EstimatorConfig(method="ols")
        report = mcsim.run_study(spec, 1, cfg, seed=4, workers=1)
        for p in report.parameters:
            assert p.size in (0.0, 1.0)
            assert p.rmse == pytest.approx(abs(p.bias))

    def test_rmse_dominates_bias_and_power_at_zero_equals_size(self):
        spec = mcsim.DgpSpec(n=400, kind="baseline", parametrization="high")
        cfg = mcsim.EstimatorConfig(method="ols")
        report = mcsim.run_study(
            spec, 25, cfg, seed=6, workers=1,
            power_offsets=np.array([-0.1, 0.0, 0.1]),
        )
        for p in report.parameters:
            assert p.rmse >= abs(p.bias)
            curve = dict(report.power[p.name])
            assert curve[0.0] == pytest.approx(p.size)

    def test_bit_identical_reports(self):
        spec = mcsim.DgpSpec(n=300, kind="baseline", parametrization="high")
        cfg = mcsim.EstimatorConfig(method="ols")
        r1 = mcsim.run_study(spec, 10, cfg, seed=12, workers=1)
        r2 = mcsim.run_study(spec, 10, cfg, seed=12, workers=2)
        assert r1.to_json() == r2.to_json()
        assert r1.to_csv() == r2.to_csv()

    def test_subsetting_matches_fresh_run(self):
        spec = mcsim.DgpSpec(n=300, kind="baseline", parametrization="high")
        cfg = mcsim.EstimatorConfig(method="ols")
        big = mcsim.run_study(spec, 12, cfg, seed=3, workers=1, keep_replications=True)
        small = mcsim.run_study(spec, 5, cfg, seed=3, workers=2, keep_replications=True)
        for name, values in small.replications.items():
            assert values == big.replications[name][:5]

    def test_failures_excluded_with_count(self, monkeypatch):
        calls = {"i": 0}
        real = mcsim._ESTIMATORS["ols"]

        def flaky(sample, truth, config):
            calls["i"] += 1
            if calls["i"] % 3 == 0:
                raise EstimationError("synthetic failure")
            return real(sample, truth, config)

        monkeypatch.setitem(mcsim._ESTIMATORS, "ols", flaky)
        spec = mcsim.DgpSpec(n=200, kind="baseline", parametrization="high")
        cfg = mcsim.EstimatorConfig(method="ols")
        report = mcsim.run_study(spec, 9, cfg, seed=8, workers=1)
        assert report.failures == 3
        assert report.reps_used == 6

    def test_variance_ordering(self):
        # a wider slope distribution is estimated more precisely at fixed n
        wide = CategoricalDistribution(pi=(0.3, 0.7), b=(0.5, 6.0))
        spec_wide = mcsim.DgpSpec(
            n=10_000, kind="baseline", parametrization="custom", theta=wide
        )
        spec_low = mcsim.DgpSpec(n=10_000, kind="baseline", parametrization="low")
        cfg = mcsim.EstimatorConfig(method="gmm_theta")
        r_wide = mcsim.run_study(spec_wide, 30, cfg, seed=14)
        r_low = mcsim.run_study(spec_low, 30, cfg, seed=14)
        assert r_wide.parameter("pi1").rmse < r_low.parameter("pi1").rmse

    def test_monotone_informativeness(self):
        # Table-2 style: every GMM parameter's RMSE falls as n grows
        cfg = mcsim.EstimatorConfig(method="gmm_theta")
        reports = []
        for n in (1_000, 10_000, 100_000):
            spec = mcsim.DgpSpec(n=n, kind="baseline", parametrization="high")
            reports.append(mcsim.run_study(spec, 200, cfg, seed=15))
        for name in ("pi1", "b1", "b2"):
            rmses = [r.parameter(name).rmse for r in reports]
            assert rmses[0] >= rmses[1] >= rmses[2]

    def test_report_serialization_round_trips(self, tmp_path):
        spec = mcsim.DgpSpec(n=200, kind="baseline", parametrization="high")
        cfg = mcsim.EstimatorConfig(method="ols")
        report = mcsim.run_study(
            spec, 5, cfg, seed=2, workers=1, power_offsets=np.array([0.0, 0.05])
        )
        payload = json.loads(report.to_json())
        assert payload["reps_used"] == 5
        assert "runtime" not in json.dumps(payload)
        by_name = {p["name"]: p for p in payload["parameters"]}
        for p in report.parameters:
            assert by_name[p.name]["rmse"] == p.rmse  # exact float round-trip
        lines = report.to_csv().splitlines()
        assert lines[0].startswith("dgp,parametrization,estimator")
        assert len(lines) == 1 + len(report.parameters)
        power_lines = report.power_to_csv().splitlines()
        assert power_lines[0] == "parameter,theta_delta,rejection_rate"
        assert len(power_lines) == 1 + 2 * len(report.parameters)

    def test_threads_env_caps_workers(self, monkeypatch):
        monkeypatch.setenv(mcsim.THREADS_ENV, "3")
        assert mcsim._resolve_workers(None) == 3
        monkeypatch.setenv(mcsim.THREADS_ENV, "not-a-number")
        assert mcsim._resolve_workers(None) >= 1
        assert mcsim._resolve_workers(5) == 5

    def test_bad_reps_rejected(self):
        spec = mcsim.DgpSpec(n=100, kind="baseline", parametrization="high")
        cfg = mcsim.EstimatorConfig(method="ols")
        with pytest.raises(ValueError):
            mcsim.run_study(spec, 0, cfg, seed=1)
