"""Two-step iterated GMM for the slope distribution and error moments.

The estimator stacks moment conditions in powers of the partialled
outcome and the focal regressor, weights them efficiently, and minimizes
the quadratic form twice per stage (preliminary weight, estimate,
re-weight, re-estimate).  Estimation runs in two spaces: first over the
raw moments (m, sigma), then over the distributional parameters
(pi, b, sigma) with the ordering and simplex constraints enforced
through a smooth reparameterization.  The sandwich covariance includes
the correction for the estimated first-stage covariate coefficients.

Every averaged moment condition depends on the data only through the
cross-moment table rho[r, s] = n^-1 sum ytilde^r x^s, so the optimizer's
inner loop works on a small precomputed table instead of the raw sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize

from . import catdist, momsolve, ols
from .core import (
    CategoricalDistribution,
    EstimationError,
    MomentSet,
    NonConvergenceError,
    PhiEstimate,
    RankDeficiencyError,
    RegressionSample,
    binomial,
)

WEIGHT_COND_LIMIT = 1e12
WEIGHT_RIDGE_REL = 1e-10
HOMOGENEITY_REL_TOL = 1e-4


def default_s(k: int) -> int:
    """Default highest regressor-moment order: 2K (4 for K=2, 6 for K=3)."""
    return 2 * k


@dataclass(frozen=True)
class MomentStack:
    """Index set of stacked conditions (r, s_r), r = 1..2K-1, s_r = 0..S-r."""

    k: int
    s: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")
        if not (2 * self.k - 1 < self.s <= 4 * self.k - 2):
            raise ValueError(
                f"S must satisfy 2K-1 < S <= 4K-2, got S={self.s} for K={self.k}"
            )

    @property
    def conditions(self) -> tuple:
        return tuple(
            (r, sr)
            for r in range(1, 2 * self.k)
            for sr in range(0, self.s - r + 1)
        )

    @property
    def dimension(self) -> int:
        return sum(self.s - r + 1 for r in range(1, 2 * self.k))


@dataclass(frozen=True)
class GmmOptions:
    """Optimizer and constraint knobs for the estimation pipeline."""

    max_evals: int = 10_000
    ftol: float = 1e-10
    polish: bool = True
    sigma_max_scale: float = 10.0
    homogeneity_rel_tol: float = HOMOGENEITY_REL_TOL


@dataclass(frozen=True)
class MomentsGmmEstimate:
    """Iterated-GMM estimate of the raw moments (m, sigma).

    ``cov`` is the sandwich covariance, already divided by n, for the
    stacked vector (m_1..m_{2K-1}, sigma_2..sigma_{2K-1}).
    """

    moments: MomentSet
    cov: np.ndarray
    objective: float
    weighting: np.ndarray
    iterations: int
    flags: tuple
    phi: PhiEstimate
    stack: MomentStack

    def param_names(self) -> list:
        k = self.stack.k
        return [f"m{r}" for r in range(1, 2 * k)] + [f"sigma{r}" for r in range(2, 2 * k)]

    def param_values(self) -> np.ndarray:
        return np.concatenate([self.moments.m, self.moments.sigma])

    def param_se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


@dataclass(frozen=True)
class GmmEstimate:
    """Point estimates and diagnostics from the full pipeline.

    ``cov`` is the sandwich covariance (already divided by n) for the
    stacked parameter vector (pi_1..pi_K, b_1..b_K, sigma_2..sigma_2K-1);
    it is None when homogeneity was flagged and the distributional
    parameters are not identified.  ``moment_stage`` carries the
    intermediate moment-space estimates.
    """

    theta: CategoricalDistribution
    sigma: np.ndarray
    objective: float
    weighting: np.ndarray
    cov: np.ndarray | None
    gradient_norm: float
    iterations: int
    flags: tuple
    moment_stage: MomentsGmmEstimate
    phi: PhiEstimate
    stack: MomentStack

    def __post_init__(self):
        if self.objective < 0:
            raise ValueError(f"objective must be nonnegative, got {self.objective!r}")
        if self.cov is not None:
            c = self.cov
            scale = max(1.0, float(np.abs(c).max()))
            if not np.allclose(c, c.T, atol=1e-8 * scale):
                raise ValueError("cov is not symmetric")
            if float(np.linalg.eigvalsh((c + c.T) / 2).min()) < -1e-8 * scale:
                raise ValueError("cov is not positive semidefinite")

    @property
    def moments(self) -> MomentSet:
        return self.moment_stage.moments

    def param_names(self) -> list:
        k = self.theta.k
        return (
            [f"pi{j + 1}" for j in range(k)]
            + [f"b{j + 1}" for j in range(k)]
            + [f"sigma{r}" for r in range(2, 2 * k)]
        )

    def param_values(self) -> np.ndarray:
        return np.concatenate([self.theta.pi, self.theta.b, self.sigma])

    def param_se(self) -> np.ndarray | None:
        if self.cov is None:
            return None
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


class _GmmData:
    """Precomputed views of one sample for a given condition stack."""

    def __init__(self, sample: RegressionSample, gammahat: np.ndarray, stack: MomentStack):
        self.sample = sample
        self.stack = stack
        self.n = sample.n
        self.x = sample.x
        self.ytilde = ols.detilde(sample, gammahat)
        self.rho_table = momsolve.build_rho_table(self.ytilde, self.x, stack.k, stack.s)
        rho = self.rho_table.rho
        conds = stack.conditions
        self.d = len(conds)
        self.cond_r = np.array([r for r, _ in conds])
        self.cond_s = np.array([sr for _, sr in conds])
        term_cond, term_coef, term_pow, term_m, term_q = [], [], [], [], []
        for j, (r, sr) in enumerate(conds):
            for q in range(0, r + 1):
                if q == 1:
                    continue  # sigma_1 = 0 kills the q = 1 term
                term_cond.append(j)
                term_coef.append(float(binomial(r, q)))
                term_pow.append(r - q + sr)
                term_m.append(r - q)
                term_q.append(q)
        self.term_cond = np.asarray(term_cond)
        self.term_coef = np.asarray(term_coef)
        self.term_pow = np.asarray(term_pow)
        self.term_m = np.asarray(term_m)
        self.term_q = np.asarray(term_q)
        self.term_rho = rho[0, self.term_pow]
        self.target = rho[self.cond_r, self.cond_s]
        self._xpow = None
        self._ypow = None

    def _powers(self):
        if self._xpow is None:
            self._xpow = np.vander(self.x, self.stack.s + 1, increasing=True)
            self._ypow = np.vander(self.ytilde, 2 * self.stack.k, increasing=True)
        return self._xpow, self._ypow

    def gbar(self, m_full: np.ndarray, sigma_full: np.ndarray) -> np.ndarray:
        """Averaged moment conditions; table-based, O(#terms)."""
        vals = self.term_coef * self.term_rho * m_full[self.term_m] * sigma_full[self.term_q]
        return np.bincount(self.term_cond, weights=vals, minlength=self.d) - self.target

    def g_obs(self, m_full: np.ndarray, sigma_full: np.ndarray) -> np.ndarray:
        """Per-observation moment contributions, shape (n, d)."""
        xpow, ypow = self._powers()
        g = np.empty((self.n, self.d))
        for j, (r, sr) in enumerate(self.stack.conditions):
            col = -(ypow[:, r] * xpow[:, sr])
            for q in range(0, r + 1):
                if q == 1:
                    continue
                col = col + (
                    binomial(r, q) * sigma_full[q] * m_full[r - q]
                ) * xpow[:, r - q + sr]
            g[:, j] = col
        return g

    def jac_m(self, m_full: np.ndarray, sigma_full: np.ndarray) -> np.ndarray:
        """d gbar / d(m_1..m_2K-1, sigma_2..sigma_2K-1), shape (d, 4K-2)."""
        k = self.stack.k
        n_m = 2 * k - 1
        jac = np.zeros((self.d, n_m + max(0, 2 * k - 2)))
        keep_m = self.term_m >= 1
        np.add.at(
            jac,
            (self.term_cond[keep_m], self.term_m[keep_m] - 1),
            self.term_coef[keep_m] * self.term_rho[keep_m] * sigma_full[self.term_q[keep_m]],
        )
        keep_q = self.term_q >= 2
        np.add.at(
            jac,
            (self.term_cond[keep_q], n_m + self.term_q[keep_q] - 2),
            self.term_coef[keep_q] * self.term_rho[keep_q] * m_full[self.term_m[keep_q]],
        )
        return jac

    def jac_theta(self, pi: np.ndarray, b: np.ndarray, sigma_full: np.ndarray) -> np.ndarray:
        """d gbar / d(pi_1..pi_K, b_1..b_K, sigma), via the chain rule."""
        k = self.stack.k
        n_m = 2 * k - 1
        m_full = np.concatenate(([1.0], _forward(pi, b, n_m)))
        jm = self.jac_m(m_full, sigma_full)
        orders = np.arange(1, n_m + 1)[:, None]
        dm_dpi = b[None, :] ** orders                              # (2K-1, K)
        dm_db = pi[None, :] * orders * b[None, :] ** (orders - 1)  # (2K-1, K)
        return np.hstack([jm[:, :n_m] @ dm_dpi, jm[:, :n_m] @ dm_db, jm[:, n_m:]])

    def dgamma(self, m_full: np.ndarray, sigma_full: np.ndarray) -> np.ndarray:
        """Gradient of gbar in the covariate coefficients, shape (d, p_z)."""
        p_z = self.sample.p_z
        if p_z == 0:
            return np.zeros((self.d, 0))
        xpow, ypow = self._powers()
        out = np.empty((self.d, p_z))
        for j, (r, sr) in enumerate(self.stack.conditions):
            out[j] = (r / self.n) * ((ypow[:, r - 1] * xpow[:, sr]) @ self.sample.z)
        return out


def _forward(pi: np.ndarray, b: np.ndarray, r_max: int) -> np.ndarray:
    powers = b[None, :] ** np.arange(1, r_max + 1)[:, None]
    return powers @ pi


def _m_sigma_full(m: np.ndarray, sigma: np.ndarray):
    return np.concatenate(([1.0], m)), np.concatenate(([1.0, 0.0], sigma))


def moment_vector(
    sample: RegressionSample,
    gammahat: np.ndarray,
    theta: CategoricalDistribution,
    sigma: np.ndarray,
    stack: MomentStack,
) -> np.ndarray:
    """Averaged stacked moment conditions g_n(theta, sigma, gammahat)."""
    if theta.k != stack.k:
        raise ValueError(f"theta has K={theta.k} but stack was built for K={stack.k}")
    data = _GmmData(sample, gammahat, stack)
    m_full, sigma_full = _m_sigma_full(
        _forward(theta.pi, theta.b, 2 * stack.k - 1), np.asarray(sigma, dtype=float)
    )
    return data.gbar(m_full, sigma_full)


def weighting_matrix(
    sample: RegressionSample,
    gammahat: np.ndarray,
    theta_prelim: CategoricalDistribution,
    sigma_prelim: np.ndarray,
    stack: MomentStack,
):
    """Efficient weighting matrix at preliminary estimates.

    Returns
    -------
    (a, regularized) : (ndarray, bool)
        Inverse of the centered sample covariance of the per-observation
        conditions, and a flag marking whether a ridge term was added
        because that covariance was ill conditioned.
    """
    data = _GmmData(sample, gammahat, stack)
    m_full, sigma_full = _m_sigma_full(
        _forward(theta_prelim.pi, theta_prelim.b, 2 * stack.k - 1),
        np.asarray(sigma_prelim, dtype=float),
    )
    return _weighting(data, m_full, sigma_full)


def _weighting(data: _GmmData, m_full, sigma_full):
    g = data.g_obs(m_full, sigma_full)
    gbar = g.mean(axis=0)
    inner = g.T @ g / data.n - np.outer(gbar, gbar)
    inner = (inner + inner.T) / 2.0
    regularized = False
    # conditions satisfied exactly (degenerate data) leave a covariance at
    # rounding scale; inverting that would blow the objective scale up, so
    # fall back to a data-scale identity instead of a relative ridge
    scale0 = 1.0 + float(np.mean(data.target ** 2))
    trace_per_dim = float(np.trace(inner)) / data.d
    cond = np.linalg.cond(inner)
    if trace_per_dim <= 1e-16 * scale0:
        inner = inner + scale0 * np.eye(data.d)
        regularized = True
    elif not np.isfinite(cond) or cond > WEIGHT_COND_LIMIT:
        inner = inner + (WEIGHT_RIDGE_REL * trace_per_dim) * np.eye(data.d)
        regularized = True
    a = np.linalg.inv(inner)
    return (a + a.T) / 2.0, regularized


# ---------------------------------------------------------------------------
# constraint-free reparameterization of (pi, b, sigma)

def theta_to_free(pi, b, sigma, sigma_max) -> np.ndarray:
    """Map interior (pi, b, sigma) to unconstrained coordinates.

    pi uses multinomial logits against the last category, b uses its first
    point plus log-increments, sigma uses atanh against its box bound.
    The map is a bijection on the feasible interior.
    """
    pi = np.asarray(pi, dtype=float)
    b = np.asarray(b, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    u_pi = np.log(pi[:-1] / pi[-1]) if pi.size > 1 else np.empty(0)
    u_b = np.concatenate(([b[0]], np.log(np.diff(b)))) if b.size > 1 else b[:1].copy()
    if sigma.size:
        ratio = np.clip(sigma / sigma_max, -1 + 1e-12, 1 - 1e-12)
        u_sigma = np.arctanh(ratio)
    else:
        u_sigma = np.empty(0)
    return np.concatenate([u_pi, u_b, u_sigma])


def free_to_theta(u: np.ndarray, k: int, sigma_max):
    """Inverse of :func:`theta_to_free`."""
    u = np.asarray(u, dtype=float)
    u_pi, u_b, u_sigma = u[: k - 1], u[k - 1 : 2 * k - 1], u[2 * k - 1 :]
    logits = np.concatenate([u_pi, [0.0]])
    logits = logits - logits.max()
    e = np.exp(logits)
    pi = e / e.sum()
    b = np.concatenate(([u_b[0]], u_b[0] + np.cumsum(np.exp(u_b[1:]))))
    sigma = np.asarray(sigma_max) * np.tanh(u_sigma) if u_sigma.size else np.empty(0)
    return pi, b, sigma


def _free_jacobian(u: np.ndarray, k: int, sigma_max) -> np.ndarray:
    """d(pi_1..pi_K, b_1..b_K, sigma)/du, shape (4K-2) x (4K-3)."""
    pi, b, sigma = free_to_theta(u, k, sigma_max)
    n_free = u.size
    jac = np.zeros((2 * k + sigma.size, n_free))
    for kk in range(k):          # softmax block
        for j in range(k - 1):
            jac[kk, j] = pi[kk] * ((1.0 if kk == j else 0.0) - pi[j])
    jac[k : 2 * k, k - 1] = 1.0  # every b_k moves with b_1
    for kk in range(1, k):       # log-increment block
        for j in range(1, kk + 1):
            jac[k + kk, k - 1 + j] = np.exp(u[k - 1 + j])
    if sigma.size:
        t = np.tanh(u[2 * k - 1 :])
        jac[2 * k :, 2 * k - 1 :] = np.diag(np.asarray(sigma_max) * (1.0 - t ** 2))
    return jac


def canonicalize(pi, b):
    """Sort support ascending, carrying probabilities along."""
    order = np.argsort(np.asarray(b, dtype=float))
    return np.asarray(pi, dtype=float)[order], np.asarray(b, dtype=float)[order]


# ---------------------------------------------------------------------------
# optimization helpers

def _minimize(fun, x0, options: GmmOptions, grad=None):
    """Simplex search with optional quasi-Newton refinement.

    Returns the best point seen; never worse than the starting value.
    """
    res = scipy.optimize.minimize(
        fun,
        x0,
        method="Nelder-Mead",
        options={
            "xatol": 1e-8,
            "fatol": options.ftol,
            "maxfev": options.max_evals,
            "maxiter": options.max_evals,
            "adaptive": True,
        },
    )
    best_x, best_f, evals = res.x, float(res.fun), int(res.nfev)
    converged = bool(res.success)
    if grad is not None and options.polish:
        try:
            res2 = scipy.optimize.minimize(
                fun, best_x, jac=grad, method="BFGS",
                options={"gtol": 1e-12, "maxiter": 500},
            )
            evals += int(res2.nfev)
            if np.isfinite(res2.fun) and res2.fun <= best_f:
                best_x, best_f = res2.x, float(res2.fun)
            converged = True
        except (np.linalg.LinAlgError, ValueError):
            pass
    return best_x, best_f, evals, converged


def _momentset_flagged(m: np.ndarray, sigma: np.ndarray, k: int) -> MomentSet:
    flags = []
    if sigma.size and sigma[0] < 0:
        flags.append(momsolve.SIGMA2_CLAMP_FLAG)
    if m.size >= 2 and m[1] - m[0] ** 2 < 0:
        flags.append(momsolve.HANKEL_FLAG)
    if np.any(m[1::2] < 0):
        flags.append(momsolve.NEG_EVEN_FLAG)
    return MomentSet(m=m, sigma=sigma, k=k, warnings=tuple(flags))


def estimate_moments(
    sample: RegressionSample,
    k: int,
    s: int | None = None,
    options: GmmOptions | None = None,
) -> MomentsGmmEstimate:
    """Two-step iterated GMM over the raw moments (m, sigma).

    Stage order: least squares for (E(beta), gamma), sequential moment
    recovery for starting values, then weight/estimate/re-weight/
    re-estimate in the unconstrained moment space.
    """
    options = options or GmmOptions()
    stack = MomentStack(k=k, s=s if s is not None else default_s(k))
    phi = ols.estimate_phi(sample)
    data = _GmmData(sample, phi.gamma, stack)
    prelim = momsolve.solve_moments(data.rho_table, k, phi.e_beta)
    return _estimate_moments_impl(data, phi, prelim, options)


def _estimate_moments_impl(
    data: _GmmData, phi: PhiEstimate, prelim: MomentSet, options: GmmOptions
) -> MomentsGmmEstimate:
    stack = data.stack
    k = stack.k
    n_m = 2 * k - 1
    flags = set(prelim.warnings)
    p = np.concatenate([prelim.m, prelim.sigma])
    a_mat = None
    total_evals = 0
    converged = True
    obj = np.inf
    for _ in range(2):
        a_mat, reg = _weighting(data, *_m_sigma_full(p[:n_m], p[n_m:]))
        if reg:
            flags.add("weighting_regularized")

        def q_m(v, a=a_mat):
            mf, sf = _m_sigma_full(v[:n_m], v[n_m:])
            g = data.gbar(mf, sf)
            return float(g @ a @ g)

        def q_m_grad(v, a=a_mat):
            mf, sf = _m_sigma_full(v[:n_m], v[n_m:])
            g = data.gbar(mf, sf)
            return 2.0 * data.jac_m(mf, sf).T @ (a @ g)

        p, obj, evals, converged = _minimize(q_m, p, options, grad=q_m_grad)
        total_evals += evals
    if not converged:
        raise NonConvergenceError(
            f"moment-stage optimizer exhausted {options.max_evals} evaluations", best=p
        )
    m_hat, sigma_hat = p[:n_m], p[n_m:]
    moments = _momentset_flagged(m_hat, sigma_hat, k)
    flags |= set(moments.warnings)
    m_full, sigma_full = _m_sigma_full(m_hat, sigma_hat)
    cov = _sandwich(
        data, phi, data.jac_m(m_full, sigma_full), None, a_mat,
        data.g_obs(m_full, sigma_full), data.dgamma(m_full, sigma_full),
    )
    return MomentsGmmEstimate(
        moments=moments,
        cov=cov,
        objective=obj,
        weighting=a_mat,
        iterations=total_evals,
        flags=tuple(sorted(flags)),
        phi=phi,
        stack=stack,
    )


def estimate(
    sample: RegressionSample,
    k: int,
    s: int | None = None,
    options: GmmOptions | None = None,
) -> GmmEstimate:
    """Full estimation pipeline for a K-point random slope.

    Stages: (1) least squares for (E(beta), gamma); (2) sequential moment
    recovery for starting values; (3) two-step iterated GMM over the raw
    moments; (4) minimum-distance projection of the moment estimates onto
    the distribution manifold; (5) two-step iterated GMM over (pi, b,
    sigma) with ordering and simplex constraints; then the sandwich
    covariance with the first-stage correction.

    When the estimated var(beta) is numerically zero the result carries a
    ``pi_not_identified`` flag and a point-mass distribution instead of a
    K-point fit: the probabilities cannot be estimated in that case.
    """
    options = options or GmmOptions()
    stack = MomentStack(k=k, s=s if s is not None else default_s(k))
    phi = ols.estimate_phi(sample)
    data = _GmmData(sample, phi.gamma, stack)
    prelim = momsolve.solve_moments(data.rho_table, k, phi.e_beta)
    stage3 = _estimate_moments_impl(data, phi, prelim, options)

    n_m = 2 * k - 1
    m_hat = stage3.moments.m
    sigma_hat = np.asarray(stage3.moments.sigma, dtype=float)
    flags = set(stage3.flags)
    total_evals = stage3.iterations

    # homogeneity screen: var(beta) numerically zero means pi is not
    # identified, so report a point mass instead of forcing a K-point fit
    var_beta = m_hat[1] - m_hat[0] ** 2 if n_m >= 2 else 0.0
    if n_m >= 2 and var_beta < options.homogeneity_rel_tol * m_hat[0] ** 2:
        theta = CategoricalDistribution(pi=np.array([1.0]), b=np.array([m_hat[0]]))
        return GmmEstimate(
            theta=theta,
            sigma=sigma_hat,
            objective=stage3.objective,
            weighting=stage3.weighting,
            cov=None,
            gradient_norm=float("nan"),
            iterations=total_evals,
            flags=tuple(sorted(flags | {"pi_not_identified"})),
            moment_stage=stage3,
            phi=phi,
            stack=stack,
        )

    # stage 4: minimum-distance projection onto the distribution manifold
    pi0, b0, evals = _project_moments(m_hat, k, options)
    total_evals += evals

    # stage 5: iterated GMM over (pi, b, sigma) in free coordinates
    scale = max(float(np.std(data.ytilde)), 1e-8)
    sigma_max = (
        options.sigma_max_scale * scale ** np.arange(2, 2 * k)
        if k > 1
        else np.empty(0)
    )
    sigma_start = (
        np.clip(sigma_hat, -0.999 * sigma_max, 0.999 * sigma_max)
        if sigma_max.size
        else sigma_hat
    )
    u = theta_to_free(pi0, b0, sigma_start, sigma_max)
    u_start0 = u.copy()
    pi_cur, b_cur, sigma_cur = pi0, b0, sigma_start
    a_mat = stage3.weighting
    obj_t = np.inf
    converged = True
    q_t_grad = None
    for _ in range(2):
        a_mat, reg = _weighting(
            data, *_m_sigma_full(_forward(pi_cur, b_cur, n_m), sigma_cur)
        )
        if reg:
            flags.add("weighting_regularized")

        def q_t(v, a=a_mat):
            pi_v, b_v, sigma_v = free_to_theta(v, k, sigma_max)
            mf, sf = _m_sigma_full(_forward(pi_v, b_v, n_m), sigma_v)
            g = data.gbar(mf, sf)
            return float(g @ a @ g)

        def q_t_grad(v, a=a_mat):
            pi_v, b_v, sigma_v = free_to_theta(v, k, sigma_max)
            mf, sf = _m_sigma_full(_forward(pi_v, b_v, n_m), sigma_v)
            g = data.gbar(mf, sf)
            jac = data.jac_theta(pi_v, b_v, sf) @ _free_jacobian(v, k, sigma_max)
            return 2.0 * jac.T @ (a @ g)

        u, obj_t, evals, converged = _minimize(q_t, u, options, grad=q_t_grad)
        if q_t(u_start0) < obj_t:  # monotonicity guard against a drifting start
            u, obj_t = u_start0.copy(), q_t(u_start0)
        pi_cur, b_cur, sigma_cur = free_to_theta(u, k, sigma_max)
        total_evals += evals
    if not converged:
        raise NonConvergenceError(
            f"distribution-stage optimizer exhausted {options.max_evals} evaluations",
            best=(pi_cur, b_cur, sigma_cur),
        )
    grad_norm = float(np.linalg.norm(q_t_grad(u)))
    theta = CategoricalDistribution(pi=pi_cur, b=b_cur)

    m_full, sigma_full = _m_sigma_full(_forward(pi_cur, b_cur, n_m), sigma_cur)
    cov = _sandwich(
        data, phi, data.jac_theta(pi_cur, b_cur, sigma_full), _pi_reduction(k), a_mat,
        data.g_obs(m_full, sigma_full), data.dgamma(m_full, sigma_full),
    )
    return GmmEstimate(
        theta=theta,
        sigma=sigma_cur,
        objective=obj_t,
        weighting=a_mat,
        cov=cov,
        gradient_norm=grad_norm,
        iterations=total_evals,
        flags=tuple(sorted(flags)),
        moment_stage=stage3,
        phi=phi,
        stack=stack,
    )


def _project_moments(m_hat: np.ndarray, k: int, options: GmmOptions):
    """Least-squares projection of moment estimates onto h(Theta)."""
    try:
        theta = catdist.invert_general(m_hat, k)
        return theta.pi.copy(), theta.b.copy(), 0
    except EstimationError:
        pass
    m1 = m_hat[0]
    var = max(m_hat[1] - m1 ** 2, 1e-6 * max(1.0, m1 ** 2)) if m_hat.size >= 2 else 1.0
    spread = np.sqrt(var)
    b0 = m1 + spread * np.linspace(-1.0, 1.0, k) * np.sqrt(3.0)
    pi0 = np.full(k, 1.0 / k)
    u0 = theta_to_free(pi0, b0, np.empty(0), np.empty(0))

    def dist2(u):
        pi_v, b_v, _ = free_to_theta(u, k, np.empty(0))
        return float(np.sum((_forward(pi_v, b_v, m_hat.size) - m_hat) ** 2))

    u_best, _, evals, _ = _minimize(dist2, u0, options)
    pi_v, b_v, _ = free_to_theta(u_best, k, np.empty(0))
    return pi_v, b_v, evals


def _pi_reduction(k: int) -> np.ndarray:
    """Chain matrix d(full params)/d(reduced params) dropping pi_K.

    Full order: (pi_1..pi_K, b_1..b_K, sigma); the reduced vector drops
    pi_K, which moves one-for-one against the free probabilities.
    """
    n_full = 4 * k - 2
    n_red = n_full - 1
    jac = np.zeros((n_full, n_red))
    for j in range(k - 1):
        jac[j, j] = 1.0
        jac[k - 1, j] = -1.0
    jac[k:, k - 1 :] = np.eye(n_full - k)
    return jac


def _sandwich(data: _GmmData, phi: PhiEstimate, jac_full, reduce_map, a_mat, g_obs, dgamma):
    """Sandwich covariance (divided by n) with the first-stage correction."""
    n = data.n
    if reduce_map is None:
        reduce_map = np.eye(jac_full.shape[1])
    g_red = jac_full @ reduce_map
    bread = g_red.T @ a_mat @ g_red
    if not np.isfinite(bread).all() or np.linalg.cond(bread) > 1e12:
        raise RankDeficiencyError(
            "moment-condition Jacobian G'AG is numerically singular at the estimate"
        )
    psi = _psi_corrected(data, phi, g_obs, dgamma)
    v_zeta = psi.T @ psi / n
    bread_inv = np.linalg.inv(bread)
    middle = g_red.T @ a_mat @ v_zeta @ a_mat.T @ g_red
    v_red = bread_inv @ middle @ bread_inv
    v_full = reduce_map @ v_red @ reduce_map.T / n
    return (v_full + v_full.T) / 2.0


def _psi_corrected(data: _GmmData, phi: PhiEstimate, g_obs: np.ndarray, dgamma) -> np.ndarray:
    """psi_i = g_i + dgamma L Q^-1 (w_i xi_i); the correction vanishes at p_z = 0."""
    p_z = data.sample.p_z
    if p_z == 0:
        return g_obs
    w = data.sample.w
    q_ww = w.T @ w / data.n
    load = np.zeros((p_z, 1 + p_z))
    load[:, 1:] = np.eye(p_z)
    correction = dgamma @ load @ np.linalg.inv(q_ww)
    w_xi = w * phi.residuals[:, None]
    return g_obs + w_xi @ correction.T


def variance_estimate(
    sample: RegressionSample,
    est: GmmEstimate,
    phi: PhiEstimate,
    stack: MomentStack,
) -> np.ndarray:
    """Sandwich covariance (divided by n) at a converged estimate.

    Recomputes the analytic Jacobian and the psi-corrected influence
    terms that account for the estimated first-stage covariate
    coefficients, using the estimate's own weighting matrix.
    """
    data = _GmmData(sample, phi.gamma, stack)
    k = stack.k
    m_full, sigma_full = _m_sigma_full(
        _forward(est.theta.pi, est.theta.b, 2 * k - 1), est.sigma
    )
    jac_full = data.jac_theta(est.theta.pi, est.theta.b, sigma_full)
    g_obs = data.g_obs(m_full, sigma_full)
    dgamma = data.dgamma(m_full, sigma_full)
    return _sandwich(
        data, phi, jac_full, _pi_reduction(k), est.weighting, g_obs, dgamma
    )
