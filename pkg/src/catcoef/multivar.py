"""Moment identification with several random slopes.

For p focal regressors the scalar powers generalize to monomial vectors:
tau_r(x) stacks the distinct degree-r monomials in a fixed graded
reverse-lexicographic order, and diagonal multinomial-coefficient
matrices replace the binomial weights.  Each order r then yields a
(nu_r + 1)-dimensional linear system for the degree-r moments of beta
and the error moment sigma_r, solved sequentially as in the scalar case.

Marginal distributions per coordinate follow from the univariate
inversion; the joint distribution is recovered only for the p = 2, K = 2
case, where the marginals plus one cross moment pin down all four cell
probabilities.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import catdist
from .core import (
    CategoricalDistribution,
    CollinearRegressorsError,
    InfeasibleJointError,
    MomentOverflowError,
    binomial,
    _frozen,
)

P_MAX = 4
BLOCK_EIG_TOL = 1e-10
JOINT_SLACK = 1e-8


@dataclass(frozen=True)
class MonomialBasis:
    """Exponent vectors of the distinct degree-r monomials in p variables.

    The order is graded reverse-lexicographic and shared by every matrix
    built on the basis, so products like Xi_{r,s} Lambda_s stay aligned.
    """

    p: int
    r: int
    exponents: tuple

    @property
    def nu(self) -> int:
        return len(self.exponents)

    def index_of(self, q) -> int:
        return self.exponents.index(tuple(q))

    def evaluate(self, x_mat: np.ndarray) -> np.ndarray:
        """Monomial matrix tau_r(x_i), shape (n, nu_r)."""
        x_mat = np.atleast_2d(np.asarray(x_mat, dtype=float))
        n = x_mat.shape[0]
        out = np.ones((n, self.nu))
        for j, q in enumerate(self.exponents):
            for coord, power in enumerate(q):
                if power:
                    out[:, j] *= x_mat[:, coord] ** power
        return out


def monomial_basis(p: int, r: int) -> MonomialBasis:
    """Enumerate degree-r exponent vectors for p variables, grevlex order."""
    if not (1 <= p <= P_MAX):
        raise ValueError(f"p must be in 1..{P_MAX}, got {p}")
    if r < 0:
        raise ValueError(f"degree must be nonnegative, got {r}")
    exps = [
        q
        for q in itertools.product(range(r + 1), repeat=p)
        if sum(q) == r
    ]
    exps.sort(key=lambda q: tuple(reversed(q)))
    basis = MonomialBasis(p=p, r=r, exponents=tuple(exps))
    assert basis.nu == binomial(r + p - 1, p - 1)
    return basis


def lambda_matrix(basis: MonomialBasis) -> np.ndarray:
    """Diagonal matrix of multinomial coefficients r!/(q_1!...q_p!)."""
    diag = [
        math.factorial(basis.r) // math.prod(math.factorial(qi) for qi in q)
        for q in basis.exponents
    ]
    return np.diag(np.asarray(diag, dtype=float))


@dataclass(frozen=True)
class MultiMomentSet:
    """Sequentially solved monomial moments of beta and error moments.

    ``tau_moments[r]`` holds E[tau_r(beta)] aligned with ``bases[r]``;
    ``sigma`` stacks (sigma_2, ..., sigma_2K-1).
    """

    p: int
    k: int
    tau_moments: dict
    bases: dict
    sigma: np.ndarray

    def coordinate_moments(self, j: int) -> np.ndarray:
        """Univariate raw moments (E beta_j, ..., E beta_j^{2K-1})."""
        out = np.empty(2 * self.k - 1)
        for r in range(1, 2 * self.k):
            q = tuple(r if c == j else 0 for c in range(self.p))
            out[r - 1] = self.tau_moments[r][self.bases[r].index_of(q)]
        return out

    def cross_moment(self, q) -> float:
        """E[prod_j beta_j^{q_j}] for an arbitrary exponent vector."""
        r = int(sum(q))
        return float(self.tau_moments[r][self.bases[r].index_of(q)])


def _check_finite(name: str, arr: np.ndarray, r: int, s: int):
    if not np.all(np.isfinite(arr)):
        raise MomentOverflowError(f"{name} table overflowed at orders (r={r}, s={s})")


def solve_moments_multi(
    y: np.ndarray,
    x_mat: np.ndarray,
    z: np.ndarray,
    gammahat: np.ndarray,
    k: int,
) -> MultiMomentSet:
    """Recover monomial moments of beta and sigma_r from one cross-section.

    The first-degree moments E(beta_j) come from least squares on the
    stacked regressors, mirroring the scalar pipeline; higher degrees
    solve the sequential block systems.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    x_mat = np.atleast_2d(np.asarray(x_mat, dtype=float))
    if x_mat.shape[0] != y.size:
        x_mat = x_mat.T
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1) if z.size else np.empty((y.size, 0))
    gammahat = np.asarray(gammahat, dtype=float).reshape(-1)
    ytilde = y - z @ gammahat if gammahat.size else y.copy()

    n, p = x_mat.shape
    w = np.column_stack([x_mat, z])
    q_ww = w.T @ w / n
    eigmin = float(np.linalg.eigvalsh(q_ww).min())
    if eigmin <= BLOCK_EIG_TOL * max(1.0, float(np.abs(q_ww).max())):
        raise CollinearRegressorsError(
            f"stacked regressor matrix is rank deficient (min eigenvalue {eigmin:.3e})"
        )
    phi = np.linalg.solve(q_ww, w.T @ y / n)
    m1_vec = phi[:p]

    bases = {r: monomial_basis(p, r) for r in range(0, 2 * k)}
    taus = {r: bases[r].evaluate(x_mat) for r in range(0, 2 * k)}
    ypow = np.vander(ytilde, 2 * k, increasing=True)

    tau_moments = {1: np.asarray(m1_vec, dtype=float)}
    sigma = np.zeros(2 * k)
    sigma[0] = 1.0
    for r in range(2, 2 * k):
        nu_r = bases[r].nu
        lam_r = lambda_matrix(bases[r])
        xi_rr = taus[r].T @ taus[r] / n
        rho_0r = taus[r].mean(axis=0)
        rho_rr = taus[r].T @ ypow[:, r] / n
        rho_r0 = float(ypow[:, r].mean())
        for name, arr in (("xi", xi_rr), ("rho", rho_rr)):
            _check_finite(name, arr, r, r)
        centered = xi_rr - np.outer(rho_0r, rho_0r)
        min_eig = float(np.linalg.eigvalsh((centered + centered.T) / 2).min())
        if min_eig <= BLOCK_EIG_TOL * max(1.0, float(np.abs(xi_rr).max())):
            raise CollinearRegressorsError(
                f"monomial covariance block at degree {r} is singular "
                f"(min eigenvalue {min_eig:.3e}); regressors are collinear"
            )
        rhs_vec = rho_rr.copy()
        rhs_sca = rho_r0
        for s in range(2, r):
            lam_rs = lambda_matrix(bases[r - s])
            xi_r_rs = taus[r].T @ taus[r - s] / n
            rho_0rs = taus[r - s].mean(axis=0)
            coef = binomial(r, s) * sigma[s]
            contrib = lam_rs @ tau_moments[r - s]
            rhs_vec -= coef * (xi_r_rs @ contrib)
            rhs_sca -= coef * float(rho_0rs @ contrib)
        block = np.zeros((nu_r + 1, nu_r + 1))
        block[:nu_r, :nu_r] = xi_rr @ lam_r
        block[:nu_r, nu_r] = rho_0r
        block[nu_r, :nu_r] = rho_0r @ lam_r
        block[nu_r, nu_r] = 1.0
        sol = np.linalg.solve(block, np.concatenate([rhs_vec, [rhs_sca]]))
        tau_moments[r] = sol[:nu_r]
        sigma[r] = sol[nu_r]
    return MultiMomentSet(
        p=p, k=k, tau_moments=tau_moments, bases=bases, sigma=_frozen(sigma[2:])
    )


def marginal_distribution(moments_of_beta_j: np.ndarray, k: int) -> CategoricalDistribution:
    """Marginal K-point distribution of one coordinate from its raw moments."""
    return catdist.invert_general(np.asarray(moments_of_beta_j, dtype=float), k)


@dataclass(frozen=True)
class JointDistribution2x2:
    """Joint distribution of two binary-support slopes.

    ``pi`` orders the cells (LL, LH, HL, HH); boundary probabilities are
    allowed because exactly comonotone or antimonotone pairs put zero
    mass on two cells.
    """

    pi: np.ndarray
    b1: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float).reshape(-1)
        b1 = np.asarray(self.b1, dtype=float).reshape(-1)
        b2 = np.asarray(self.b2, dtype=float).reshape(-1)
        if pi.size != 4 or b1.size != 2 or b2.size != 2:
            raise ValueError("joint distribution needs 4 cell probabilities and 2+2 support points")
        if np.any(pi < 0.0) or np.any(pi > 1.0) or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError(f"cell probabilities invalid: {pi}")
        if not (b1[0] < b1[1] and b2[0] < b2[1]):
            raise ValueError("support points must be strictly increasing per coordinate")
        object.__setattr__(self, "pi", _frozen(pi))
        object.__setattr__(self, "b1", _frozen(b1))
        object.__setattr__(self, "b2", _frozen(b2))

    def marginal(self, j: int) -> np.ndarray:
        """Marginal (low, high) probabilities of coordinate j in {0, 1}."""
        cells = self.pi.reshape(2, 2)
        return cells.sum(axis=1) if j == 0 else cells.sum(axis=0)

    def cross_moment(self) -> float:
        cells = self.pi.reshape(2, 2)
        return float(self.b1 @ cells @ self.b2)


def joint_2x2(
    marginal_1: CategoricalDistribution,
    marginal_2: CategoricalDistribution,
    cross_moment: float,
) -> JointDistribution2x2:
    """Recover the four joint cell probabilities from marginals + E(b1 b2).

    Solves the 4x4 system stacking three marginal constraints and the
    cross-moment equation; the system is invertible whenever both
    coordinates have strictly ordered support.
    """
    if marginal_1.k != 2 or marginal_2.k != 2:
        raise ValueError("joint recovery is implemented for K = 2 per coordinate")
    b1, b2 = marginal_1.b, marginal_2.b
    bmat = np.array(
        [
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0],
            [1.0, 0.0, 1.0, 0.0],
            [b1[0] * b2[0], b1[0] * b2[1], b1[1] * b2[0], b1[1] * b2[1]],
        ]
    )
    rhs = np.array([marginal_1.pi[0], marginal_1.pi[1], marginal_2.pi[0], float(cross_moment)])
    pi = np.linalg.solve(bmat, rhs)
    if np.any(pi < -JOINT_SLACK) or np.any(pi > 1.0 + JOINT_SLACK):
        raise InfeasibleJointError(
            f"implied joint probabilities {pi} fall outside [0, 1]"
        )
    pi = np.clip(pi, 0.0, 1.0)
    return JointDistribution2x2(pi=pi / pi.sum(), b1=b1, b2=b2)


def marginal_constraint_matrix(p: int, k: int) -> np.ndarray:
    """0/1 matrix linking joint probabilities to all pK marginal ones.

    Row (j, c) selects the joint cells whose coordinate j sits in
    category c.  Its rank is pK - (p - 1): one redundancy per extra
    coordinate, since every coordinate's marginals sum to the same total.
    """
    cells = list(itertools.product(range(k), repeat=p))
    rows = np.zeros((p * k, len(cells)))
    for j in range(p):
        for c in range(k):
            for idx, cell in enumerate(cells):
                if cell[j] == c:
                    rows[j * k + c, idx] = 1.0
    return rows


def joint_identification_counts(p: int, k: int) -> tuple:
    """(usable equation count, unknown joint probabilities K^p - 1).

    The first entry is sum_{r=1}^{2K-1} C(r+p-1, p-1) - pK: marginal plus
    cross-moment equations net of the coordinates' own moments.  When it
    falls short of K^p - 1 the joint distribution is not identified from
    these moments alone.
    """
    usable = sum(binomial(r + p - 1, p - 1) for r in range(1, 2 * k)) - p * k
    return usable, k ** p - 1
