"""Identification-stage solver for moments of beta and of the error term.

Given the mean slope m_1 from the least-squares stage, the higher moments
E(beta^r) and error moments sigma_r, r = 2..2K-1, solve a sequence of 2x2
linear systems built from cross moments of (ytilde, x).  Each order r uses
only already-solved lower orders, so the recursion runs strictly upward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    MomentOverflowError,
    MomentSet,
    NoVariationError,
    binomial,
    _frozen,
)

DET_REL_TOL = 1e-10
SIGMA2_CLAMP_FLAG = "negative_sigma2"
HANKEL_FLAG = "hankel_violation"
NEG_EVEN_FLAG = "negative_even_moment"


@dataclass(frozen=True)
class RhoTable:
    """Sample cross-moment table rho[r, s] = n^-1 sum ytilde_i^r x_i^s.

    Row index r runs over powers of the partialled outcome up to 2K-1,
    column index s over powers of the focal regressor up to
    max(2(2K-1), S).  rho[0, 0] is 1 by construction.
    """

    rho: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        if rho.ndim != 2 or rho.shape[0] < 1 or rho.shape[1] < 1:
            raise ValueError("rho table must be a non-empty 2-d array")
        if not np.all(np.isfinite(rho)):
            raise ValueError("rho table has non-finite entries")
        if abs(rho[0, 0] - 1.0) > 1e-12:
            raise ValueError(f"rho[0, 0] must equal 1, got {rho[0, 0]!r}")
        object.__setattr__(self, "rho", _frozen(rho))

    @property
    def r_max(self) -> int:
        return self.rho.shape[0] - 1

    @property
    def s_max(self) -> int:
        return self.rho.shape[1] - 1

    def __getitem__(self, idx) -> float:
        r, s = idx
        return float(self.rho[r, s])


def build_rho_table(ytilde: np.ndarray, x: np.ndarray, k: int, s: int) -> RhoTable:
    """Tabulate n^-1 sum ytilde^r x^s for all orders the solver needs.

    Parameters
    ----------
    ytilde, x : array_like, shape (n,)
        Partialled outcome and focal regressor.
    k : int
        Category count; outcome powers run to 2K-1.
    s : int
        Highest x-moment order used by the GMM stack; must exceed 2K-1.
        Columns extend to max(2(2K-1), s) so the sequential solver always
        has the rho[0, 2r] entries it needs.

    Raises
    ------
    MomentOverflowError
        If any tabulated product overflows, naming the offending (r, s).
    """
    ytilde = np.asarray(ytilde, dtype=float).reshape(-1)
    x = np.asarray(x, dtype=float).reshape(-1)
    if ytilde.size != x.size or ytilde.size < 1:
        raise ValueError("ytilde and x must be equal-length non-empty vectors")
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if s <= 2 * k - 1:
        raise ValueError(f"need S > 2K-1 = {2 * k - 1}, got S = {s}")
    r_max = 2 * k - 1
    s_max = max(2 * (2 * k - 1), s)
    with np.errstate(over="ignore", invalid="ignore"):
        ypow = np.vander(ytilde, r_max + 1, increasing=True)  # (n, r_max+1)
        xpow = np.vander(x, s_max + 1, increasing=True)
        table = ypow.T @ xpow / ytilde.size
    bad = ~np.isfinite(table)
    if bad.any():
        r, s_bad = np.argwhere(bad)[0]
        raise MomentOverflowError(
            f"moment table overflowed at outcome power r={int(r)}, regressor power s={int(s_bad)}"
        )
    return RhoTable(rho=table)


def solve_moments(rho: RhoTable, k: int, m1: float) -> MomentSet:
    """Recover (m_r, sigma_r) for r = 2..2K-1 from a cross-moment table.

    For each r the pair solves the 2x2 system

        rho[0,r]  * m_r +           sigma_r = rhs_r
        rho[0,2r] * m_r + rho[0,r] * sigma_r = rhs_2r

    where the right-hand sides subtract the already-solved lower-order
    contributions.  ``m1`` comes from the least-squares stage.

    Raises
    ------
    NoVariationError
        If |rho[0,2r] - rho[0,r]^2| falls below 1e-10 relative tolerance
        (the focal regressor lacks variation at order r).
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    r_top = 2 * k - 1
    if rho.r_max < r_top or rho.s_max < 2 * r_top:
        raise ValueError(
            f"rho table too small: need rows to {r_top} and columns to {2 * r_top}"
        )
    m = np.zeros(r_top + 1)
    sig = np.zeros(r_top + 1)
    m[0], sig[0] = 1.0, 1.0
    m[1], sig[1] = float(m1), 0.0
    warnings = []
    for r in range(2, r_top + 1):
        det = rho[0, r] ** 2 - rho[0, 2 * r]
        if abs(det) <= DET_REL_TOL * max(1.0, abs(rho[0, 2 * r])):
            raise NoVariationError(
                f"near-singular moment system at order r={r}: "
                f"rho[0,{2 * r}] - rho[0,{r}]^2 = {-det:.3e}"
            )
        rhs_r = rho[r, 0]
        rhs_2r = rho[r, r]
        for q in range(2, r):
            c = binomial(r, q)
            rhs_r -= c * rho[0, r - q] * sig[q] * m[r - q]
            rhs_2r -= c * rho[0, 2 * r - q] * sig[q] * m[r - q]
        a = np.array([[rho[0, r], 1.0], [rho[0, 2 * r], rho[0, r]]])
        m[r], sig[r] = np.linalg.solve(a, np.array([rhs_r, rhs_2r]))
    if r_top >= 2 and sig[2] < 0.0:
        # Sampling noise can push sigma_2 slightly negative; downstream GMM
        # needs a feasible start, so clamp and flag.
        sig[2] = 0.0
        warnings.append(SIGMA2_CLAMP_FLAG)
    if r_top >= 2 and m[2] - m[1] ** 2 < 0.0:
        warnings.append(HANKEL_FLAG)
    if np.any(m[2::2] < 0.0):
        warnings.append(NEG_EVEN_FLAG)
    return MomentSet(m=m[1:], sigma=sig[2:], k=k, warnings=tuple(warnings))


def kappa_squared(moments: MomentSet) -> float:
    """Scale-invariant homogeneity statistic m_1^2 / m_2 in [0, 1].

    Values near 1 signal a homogeneous slope (var(beta) near 0).
    """
    m1 = float(moments.m[0])
    if moments.m.size < 2:
        raise ValueError("kappa^2 needs moments up to order 2")
    m2 = float(moments.m[1])
    if m2 <= 0.0:
        raise ValueError(f"kappa^2 requires m_2 > 0, got {m2!r}")
    return m1 ** 2 / m2
