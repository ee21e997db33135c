"""Bidirectional map between (pi, b) and the moment vector of beta.

The forward direction evaluates m_r = sum_k pi_k b_k^r.  The inverse
recovers the support points as roots of the characteristic polynomial of
a linear recurrence satisfied by the moment sequence, then solves a
Vandermonde system for the probabilities.  For two categories a closed
form exists and is kept as a separate fast path, which also serves as an
independent cross-check of the general route.
"""

from __future__ import annotations

import numpy as np

from .core import (
    CategoricalDistribution,
    DegenerateSupportError,
    HomogeneityError,
    InfeasibleMomentsError,
    NonRealSupportError,
    ReducedRankError,
)

VAR_TOL = 1e-10
IMAG_REL_TOL = 1e-6
PI_SLACK = 1e-8


def forward_moments(theta: CategoricalDistribution, r_max: int) -> np.ndarray:
    """Raw moments (E beta, E beta^2, ..., E beta^r_max) of a categorical slope."""
    if r_max < 1:
        raise ValueError(f"r_max must be positive, got {r_max}")
    powers = theta.b[None, :] ** np.arange(1, r_max + 1)[:, None]
    return powers @ theta.pi


def hankel_det(m: np.ndarray, k: int) -> float:
    """Determinant of the K x K Hankel moment matrix [m_{i+j}], m_0 = 1.

    For K = 2 this is the variance m_2 - m_1^2; positivity for every K
    certifies K distinct categories with interior probabilities.
    """
    m_full = _m_full(m, 2 * k - 2)
    idx = np.arange(k)
    return float(np.linalg.det(m_full[idx[:, None] + idx[None, :]]))


def _m_full(m, need: int) -> np.ndarray:
    m = np.asarray(m, dtype=float).reshape(-1)
    if m.size < need:
        raise ValueError(f"moment vector supplies orders up to {m.size}, need {need}")
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite moments")
    return np.concatenate(([1.0], m))


def invert_k2(m: np.ndarray) -> CategoricalDistribution:
    """Closed-form inversion of (m_1, m_2, m_3) into a two-point distribution.

    Solves for the sum and product of the support points, takes the two
    quadratic roots, and backs out the low-state probability.

    Raises
    ------
    HomogeneityError
        If m_2 - m_1^2 is numerically zero: pi is not identified.
    DegenerateSupportError
        If the discriminant vanishes (coincident support points).
    InfeasibleMomentsError
        If the implied probability leaves (0, 1) by more than 1e-8.
    """
    m = np.asarray(m, dtype=float).reshape(-1)
    if m.size != 3:
        raise ValueError(f"invert_k2 needs exactly (m_1, m_2, m_3), got length {m.size}")
    m1, m2, m3 = m
    var = m2 - m1 ** 2
    if var <= VAR_TOL * max(1.0, abs(m2)):
        raise HomogeneityError(
            f"var(beta) = {var:.3e} is numerically zero: pi is not identified"
        )
    b_sum = (m3 - m1 * m2) / var
    b_prod = (m1 * m3 - m2 ** 2) / var
    disc = b_sum ** 2 - 4.0 * b_prod
    if disc <= VAR_TOL * max(1.0, b_sum ** 2):
        raise DegenerateSupportError(
            f"discriminant {disc:.3e} is not positive: support points coincide"
        )
    root = np.sqrt(disc)
    b_lo, b_hi = (b_sum - root) / 2.0, (b_sum + root) / 2.0
    pi_lo = (b_hi - m1) / (b_hi - b_lo)
    return _finish(np.array([pi_lo, 1.0 - pi_lo]), np.array([b_lo, b_hi]))


def invert_general(m: np.ndarray, k: int) -> CategoricalDistribution:
    """Invert (m_1, ..., m_{2K-1}) into a K-point distribution.

    The moment sequence satisfies a linear homogeneous recurrence whose
    coefficients are signed elementary symmetric functions of the support
    points.  The steps are:

    1. solve the K x K system M D b* = (m_K, ..., m_{2K-1})' where M is the
       Hankel moment matrix and D alternates signs;
    2. form the monic characteristic polynomial and extract its roots via
       the companion-matrix eigensolve;
    3. sort the roots ascending into the support vector;
    4. solve the Vandermonde system for the probabilities and validate.
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    m = np.asarray(m, dtype=float).reshape(-1)
    if m.size != 2 * k - 1:
        raise ValueError(f"need 2K-1 = {2 * k - 1} moments, got {m.size}")
    m_full = _m_full(m, 2 * k - 2)
    if k == 1:
        return CategoricalDistribution(pi=np.array([1.0]), b=np.array([m[0]]))

    idx = np.arange(k)
    hankel = m_full[idx[:, None] + idx[None, :]]
    singular_values = np.linalg.svd(hankel, compute_uv=False)
    if singular_values[-1] <= VAR_TOL * max(1.0, singular_values[0]):
        raise ReducedRankError(
            f"Hankel moment matrix is near singular "
            f"(smallest singular value {singular_values[-1]:.3e}); "
            f"fewer than K={k} categories are identified, try a smaller K"
        )
    signs = np.array([(-1.0) ** (k - 1 - j) for j in range(k)])
    rhs = m_full[k : 2 * k]
    bstar_rev = np.linalg.solve(hankel * signs[None, :], rhs)
    # bstar_rev = (b*_K, ..., b*_1); b*_j is the j-th elementary symmetric
    # function of the support points.
    esym = bstar_rev[::-1]
    coeffs = np.concatenate(([1.0], [(-1.0) ** j * esym[j - 1] for j in range(1, k + 1)]))
    roots = np.roots(coeffs)
    bad = np.abs(roots.imag) > IMAG_REL_TOL * np.maximum(1.0, np.abs(roots))
    if bad.any():
        raise NonRealSupportError(
            f"characteristic roots are not all real: {roots[bad]}"
        )
    b = np.sort(roots.real)
    vand = b[None, :] ** idx[:, None]
    pi = np.linalg.solve(vand, m_full[:k])
    return _finish(pi, b)


def _finish(pi: np.ndarray, b: np.ndarray) -> CategoricalDistribution:
    if np.any(pi < -PI_SLACK) or np.any(pi > 1.0 + PI_SLACK):
        raise InfeasibleMomentsError(
            f"implied probabilities {pi} fall outside [0, 1]: "
            "no valid distribution reproduces these moments"
        )
    pi = np.clip(pi, 1e-12, 1.0)
    return CategoricalDistribution(pi=pi / pi.sum(), b=b)
