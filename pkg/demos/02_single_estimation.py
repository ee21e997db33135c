"""Full estimation pipeline on one simulated cross-section.

Draws n = 10,000 observations from the baseline design (chi-squared
focal regressor, correlated covariates, heteroskedastic errors, slope
equal to 1 or 2 with equal probability) and runs the staged estimator:
least squares for (E(beta), gamma), sequential moment recovery, iterated
GMM over the raw moments, then iterated GMM over (pi, b, sigma).
"""

import numpy as np

from catcoef import DgpSpec, estimate, generate, kappa_squared

spec = DgpSpec(n=10_000, kind="baseline", parametrization="high")
sample, truth = generate(spec, seed=42)
print(f"sample: n = {sample.n}, covariates p_z = {sample.p_z}")
print("true slope distribution: pi =", truth["theta"].pi, " b =", truth["theta"].b)

est = estimate(sample, k=2)

print("\nfirst stage (least squares, robust SEs):")
for name, value, se in zip(
    ["E(beta)", "alpha", "gamma1", "gamma2"], est.phi.phi, est.phi.se()
):
    print(f"  {name:8s} {value:8.4f}  (se {se:.4f})")

print("\nmoment-space GMM:")
stage = est.moment_stage
for name, value, se in zip(stage.param_names(), stage.param_values(), stage.param_se()):
    print(f"  {name:8s} {value:8.4f}  (se {se:.4f})")
print(f"  kappa^2 = {kappa_squared(est.moments):.4f}  (1 would mean a homogeneous slope)")

print("\ndistributional parameters:")
for name, value, se in zip(est.param_names(), est.param_values(), est.param_se()):
    print(f"  {name:8s} {value:8.4f}  (se {se:.4f})")

ratio = est.theta.b[-1] / est.theta.b[0]
print(f"\nhigh/low support ratio: {ratio:.3f}")
print(f"objective {est.objective:.3e}, {est.iterations} evaluations, flags {est.flags}")
