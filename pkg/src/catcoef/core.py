"""Domain types, validation, and shared numeric helpers.

Every estimation module works with the same three kinds of objects: a
cross-section sample, a finite categorical distribution for the random
slope, and the moment vectors linking the two.  The types here validate
their invariants on construction and freeze their arrays afterwards, so
instances are safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PROB_SUM_TOL = 1e-12
SUPPORT_GAP_TOL = 1e-10
PSD_EIG_TOL = 1e-10


class EstimationError(Exception):
    """Base class for typed estimation failures."""


class SingularDesignError(EstimationError):
    """Regressor matrix is numerically rank deficient."""


class NoVariationError(EstimationError):
    """The focal regressor has too little variation to identify moments."""


class HomogeneityError(EstimationError):
    """var(beta) is numerically zero, so pi is not identified."""


class DegenerateSupportError(EstimationError):
    """Support points coincide; the category count is effectively smaller."""


class InfeasibleMomentsError(EstimationError):
    """No valid categorical distribution reproduces the given moments."""


class ReducedRankError(EstimationError):
    """Hankel moment matrix is singular; fewer categories are identified."""


class NonRealSupportError(EstimationError):
    """Characteristic roots have non-negligible imaginary parts."""


class MomentOverflowError(EstimationError):
    """A power of the data overflowed while building moment tables."""


class CollinearRegressorsError(EstimationError):
    """Monomial second-moment block is singular (collinear regressors)."""


class RankDeficiencyError(EstimationError):
    """Moment-condition Jacobian G'AG is singular at the estimate."""


class InfeasibleJointError(EstimationError):
    """Joint probabilities implied by the marginals are outside [0, 1]."""


class NonConvergenceError(EstimationError):
    """Optimizer exhausted its budget; carries the best iterate found."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


def binomial(r: int, q: int) -> int:
    """Binomial coefficient r! / (q! (r-q)!) in exact integer arithmetic.

    Parameters
    ----------
    r, q : int
        Non-negative integers with ``0 <= q <= r <= 64``.

    Returns
    -------
    int
        The exact coefficient; no floating-point accumulation is involved.
    """
    if r < 0 or q < 0 or q > r:
        raise ValueError(f"binomial requires 0 <= q <= r, got r={r}, q={q}")
    if r > 64:
        raise OverflowError(f"binomial order r={r} exceeds the supported range r <= 64")
    return math.comb(r, q)


def sample_moment(v: np.ndarray, r: int) -> float:
    """Raw sample moment n^-1 sum_i v_i^r of a non-empty finite vector."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("sample_moment requires a non-empty 1-d vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("sample_moment requires finite entries")
    if r < 1:
        raise ValueError(f"moment order must be positive, got {r}")
    return float(np.mean(v ** r))


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class RegressionSample:
    """One cross-section: outcome, scalar focal regressor, covariates.

    Attributes
    ----------
    y : ndarray, shape (n,)
        Outcome vector.
    x : ndarray, shape (n,)
        Focal regressor whose slope is random.
    z : ndarray, shape (n, p_z)
        Covariates with homogeneous slopes; the first column may be an
        intercept of ones, and ``p_z = 0`` (empty matrix) is allowed.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        y = _frozen(np.asarray(self.y, dtype=float).reshape(-1))
        x = _frozen(np.asarray(self.x, dtype=float).reshape(-1))
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, 1) if z.size else z.reshape(0, 0)
        z = _frozen(z)
        n = y.shape[0]
        if n < 1:
            raise ValueError("sample must contain at least one observation")
        if x.shape[0] != n or (z.size and z.shape[0] != n):
            raise ValueError(
                f"inconsistent row counts: y has {n}, x has {x.shape[0]}, z has {z.shape[0] if z.size else z.shape[0]}"
            )
        if z.size == 0 and z.shape != (n, 0):
            z = _frozen(np.empty((n, 0)))
        for name, arr in (("y", y), ("x", x), ("z", z)):
            if arr.size and not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p_z(self) -> int:
        return self.z.shape[1]

    @property
    def w(self) -> np.ndarray:
        """Stacked regressor matrix (x_i, z_i')' of shape (n, 1 + p_z)."""
        return np.column_stack([self.x, self.z])


@dataclass(frozen=True)
class CategoricalDistribution:
    """Finite distribution theta = (pi, b) for the random slope.

    ``pi`` holds the K category probabilities and ``b`` the strictly
    increasing support points.  For K = 1 the single probability is 1;
    for K >= 2 every probability must lie strictly inside (0, 1).
    A probability sum off by at most 1e-12 is renormalized silently,
    anything worse is rejected.
    """

    pi: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float).reshape(-1)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if pi.size != b.size or pi.size < 1:
            raise ValueError("pi and b must be equal-length vectors of size K >= 1")
        if not (np.all(np.isfinite(pi)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite distribution parameters")
        k = pi.size
        if k == 1:
            if abs(pi[0] - 1.0) > PROB_SUM_TOL:
                raise ValueError("K = 1 requires pi = (1,)")
            pi = np.array([1.0])
        else:
            if np.any(pi <= 0.0) or np.any(pi >= 1.0):
                raise ValueError(f"probabilities must lie in (0, 1), got {pi}")
            gap = abs(float(pi.sum()) - 1.0)
            if gap > PROB_SUM_TOL:
                raise ValueError(f"probabilities sum to {pi.sum()!r}, off by {gap:.3e}")
            pi = pi / pi.sum()
        diffs = np.diff(b)
        if np.any(diffs <= SUPPORT_GAP_TOL):
            raise DegenerateSupportError(
                f"support points must be strictly increasing with gaps > {SUPPORT_GAP_TOL:g}, got {b}"
            )
        object.__setattr__(self, "pi", _frozen(pi))
        object.__setattr__(self, "b", _frozen(b))

    @property
    def k(self) -> int:
        return self.pi.size

    def mean(self) -> float:
        return float(self.pi @ self.b)

    def var(self) -> float:
        m1 = self.mean()
        return float(self.pi @ self.b ** 2) - m1 ** 2


@dataclass(frozen=True)
class MomentSet:
    """Raw moments of beta and of the error term.

    ``m`` stacks (m_1, ..., m_{2K-1}) with m_r = E(beta^r) and ``sigma``
    stacks (sigma_2, ..., sigma_{2K-1}) with sigma_r the limiting average
    of E(u^r); by convention sigma_0 = 1 and sigma_1 = 0 (exposed through
    :meth:`sigma_full`).  Moment-positivity violations caused by sampling
    noise must be acknowledged through ``warnings`` or construction fails.
    """

    m: np.ndarray
    sigma: np.ndarray
    k: int
    warnings: tuple = ()

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=float).reshape(-1)
        if m.size != 2 * self.k - 1 or sigma.size != m.size - 1:
            raise ValueError(
                f"need len(m) = 2K-1 = {2 * self.k - 1} and len(sigma) = 2K-2, "
                f"got {m.size} and {sigma.size}"
            )
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(sigma))):
            raise ValueError("non-finite moments")
        warnings = tuple(self.warnings)
        even = m[1::2]  # m_2, m_4, ...
        if np.any(even < 0) and "negative_even_moment" not in warnings:
            raise ValueError(f"even moments of beta must be nonnegative, got {even}")
        if sigma.size and sigma[0] < 0 and "negative_sigma2" not in warnings:
            raise ValueError(f"sigma_2 must be nonnegative, got {sigma[0]!r}")
        if m.size >= 2 and m[1] - m[0] ** 2 < 0 and "hankel_violation" not in warnings:
            raise ValueError("m_2 - m_1^2 < 0 violates variance nonnegativity")
        object.__setattr__(self, "m", _frozen(m))
        object.__setattr__(self, "sigma", _frozen(sigma))
        object.__setattr__(self, "warnings", warnings)

    def m_full(self) -> np.ndarray:
        """Moments indexed by power: entry r is m_r, with m_0 = 1."""
        return np.concatenate(([1.0], self.m))

    def sigma_full(self) -> np.ndarray:
        """Error moments indexed by power, with sigma_0 = 1 and sigma_1 = 0."""
        return np.concatenate(([1.0, 0.0], self.sigma))

    def var(self) -> float:
        return float(self.m[1] - self.m[0] ** 2) if self.m.size >= 2 else 0.0


@dataclass(frozen=True)
class PhiEstimate:
    """Least-squares estimate of phi = (E(beta), gamma')'.

    ``cov`` already includes the 1/n scaling, so standard errors read off
    the diagonal directly.
    """

    phi: np.ndarray
    cov: np.ndarray
    residuals: np.ndarray

    def __post_init__(self):
        phi = _frozen(np.asarray(self.phi, dtype=float).reshape(-1))
        cov = np.asarray(self.cov, dtype=float)
        residuals = _frozen(np.asarray(self.residuals, dtype=float).reshape(-1))
        if cov.shape != (phi.size, phi.size):
            raise ValueError(f"cov must be {phi.size}x{phi.size}, got {cov.shape}")
        if not np.allclose(cov, cov.T, atol=1e-10 * max(1.0, float(np.abs(cov).max()))):
            raise ValueError("covariance matrix is not symmetric")
        scale = max(1.0, float(np.abs(cov).max()))
        if cov.size and float(np.linalg.eigvalsh((cov + cov.T) / 2.0).min()) < -PSD_EIG_TOL * scale:
            raise ValueError("covariance matrix is not positive semidefinite")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "cov", _frozen((cov + cov.T) / 2.0))
        object.__setattr__(self, "residuals", residuals)

    @property
    def e_beta(self) -> float:
        """Estimated mean slope E(beta)."""
        return float(self.phi[0])

    @property
    def gamma(self) -> np.ndarray:
        return self.phi[1:]

    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))
