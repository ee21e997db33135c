"""Replicated study: bias, RMSE, empirical size, and a power curve.

Runs a small Monte Carlo (the published tables use R = 5,000; this demo
uses R = 100 to stay quick) for the GMM estimator of the slope
distribution under the baseline design, then writes the JSON/CSV
reports the command line tool also produces.

Identical (spec, reps, seed) runs produce byte-identical reports, and
each replication's stream depends only on (seed, replication), so a
shorter run reproduces the head of a longer one.
"""

import pathlib
import tempfile

import numpy as np

from catcoef import DgpSpec, EstimatorConfig, run_study

spec = DgpSpec(n=10_000, kind="baseline", parametrization="high")
config = EstimatorConfig(method="gmm_theta")
report = run_study(
    spec,
    reps=100,
    config=config,
    seed=1,
    power_offsets=np.linspace(-0.1, 0.1, 5),
)

print(f"DGP {report.dgp['kind']}/{report.dgp['parametrization']}, n = {report.n}, "
      f"{report.reps_used}/{report.reps} replications used, {report.failures} failures")
print(f"{'param':6s} {'truth':>7s} {'bias':>9s} {'rmse':>8s} {'size':>7s} {'mean se':>8s}")
for p in report.parameters:
    print(f"{p.name:6s} {p.truth:7.3f} {p.bias:+9.4f} {p.rmse:8.4f} {p.size:7.3f} {p.mean_se:8.4f}")

print("\npower curve for pi1 (rejection rate of H0: pi = truth + delta):")
for delta, rate in report.power["pi1"]:
    print(f"  delta {delta:+.3f} -> {rate:.3f}")

out_dir = pathlib.Path(tempfile.mkdtemp(prefix="catcoef_demo_"))
(out_dir / "report.json").write_text(report.to_json())
(out_dir / "report.csv").write_text(report.to_csv())
(out_dir / "report_power.csv").write_text(report.power_to_csv())
print(f"\nreports written under {out_dir}")
