"""Two random slopes: monomial moments, marginals, and the joint table.

With several random coefficients the scalar moment recursion generalizes
to monomial vectors weighted by multinomial coefficients.  For two
binary-support slopes, the marginals plus the single cross moment
E(beta1 beta2) pin down all four joint cell probabilities.
"""

import numpy as np

from catcoef import (
    joint_2x2,
    lambda_matrix,
    marginal_distribution,
    monomial_basis,
    solve_moments_multi,
)

# -- the monomial machinery -------------------------------------------------
basis = monomial_basis(p=2, r=2)
print("degree-2 monomials in two variables:", basis.exponents)
print("multinomial weights:", np.diag(lambda_matrix(basis)))

# -- simulate a joint 2x2 slope ---------------------------------------------
# higher-order moment inversion amplifies sampling noise, so recovering
# the joint table cleanly takes a large cross-section
rng = np.random.default_rng(3)
n = 400_000
pi_cells = np.array([0.2, 0.3, 0.25, 0.25])  # (LL, LH, HL, HH)
b1 = np.array([1.0, 2.0])
b2 = np.array([3.0, 5.0])
cells = rng.choice(4, p=pi_cells, size=n)
beta1, beta2 = b1[cells // 2], b2[cells % 2]
x1 = rng.choice([-1.0, 0.5, 2.0], p=[0.3, 0.4, 0.3], size=n)
x2 = rng.choice([-0.8, 0.4, 1.6], p=[0.25, 0.5, 0.25], size=n)
y = x1 * beta1 + x2 * beta2 + 0.5 * rng.standard_normal(n)

out = solve_moments_multi(y, np.column_stack([x1, x2]), np.empty((n, 0)), np.empty(0), k=2)
cross = out.cross_moment((1, 1))
truth_cross = float(pi_cells.reshape(2, 2).ravel() @ np.outer(b1, b2).ravel())
print(f"\nE(beta1 beta2): estimated {cross:.4f}, truth {truth_cross:.4f}")

# -- marginals per coordinate, then the joint table --------------------------
marg1 = marginal_distribution(out.coordinate_moments(0), k=2)
marg2 = marginal_distribution(out.coordinate_moments(1), k=2)
print("marginal 1: pi =", marg1.pi.round(3), " b =", marg1.b.round(3))
print("marginal 2: pi =", marg2.pi.round(3), " b =", marg2.b.round(3))

joint = joint_2x2(marg1, marg2, cross)
print("\njoint cell probabilities (rows: slope 1 low/high, cols: slope 2 low/high):")
print(joint.pi.reshape(2, 2).round(3))
print("truth:")
print(pi_cells.reshape(2, 2))
