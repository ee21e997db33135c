"""First-stage least squares for phi = (E(beta), gamma')'.

The mean slope and the homogeneous coefficients are estimated by OLS of
y on w = (x, z')', with a heteroskedasticity-robust sandwich covariance.
The composite error xi_i = u_i + x_i (beta_i - E(beta)) is heteroskedastic
by construction whenever the slope is truly random, so the robust form is
not optional.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .core import PhiEstimate, RegressionSample, SingularDesignError

EIGENVALUE_FLOOR = 1e-10


def estimate_phi(sample: RegressionSample) -> PhiEstimate:
    """Least-squares estimate of (E(beta), gamma')' with robust covariance.

    Parameters
    ----------
    sample : RegressionSample
        Cross-section with n > 1 + p_z observations.

    Returns
    -------
    PhiEstimate
        Point estimates, residuals, and the sandwich covariance
        Q^-1 V_hat Q^-1 / n with V_hat = n^-1 sum w_i w_i' xi_i^2.

    Raises
    ------
    SingularDesignError
        If the smallest eigenvalue of Q = n^-1 sum w_i w_i' is below the
        1e-10 floor (rank-deficient design).
    """
    n, d = sample.n, 1 + sample.p_z
    if n <= d:
        raise SingularDesignError(f"need n > 1 + p_z = {d}, got n = {n}")
    w = sample.w
    q_ww = w.T @ w / n
    eigmin = float(np.linalg.eigvalsh(q_ww).min())
    if eigmin <= EIGENVALUE_FLOOR:
        raise SingularDesignError(
            f"regressor second-moment matrix is near singular: smallest eigenvalue {eigmin:.3e}"
        )
    q_wy = w.T @ sample.y / n
    # SPD factorization rather than an explicit inverse, for conditioning.
    cho = scipy.linalg.cho_factor(q_ww)
    phi = scipy.linalg.cho_solve(cho, q_wy)
    residuals = sample.y - w @ phi
    v_wxi = (w * residuals[:, None] ** 2).T @ w / n
    q_inv = scipy.linalg.cho_solve(cho, np.eye(d))
    cov = q_inv @ v_wxi @ q_inv / n
    return PhiEstimate(phi=phi, cov=(cov + cov.T) / 2.0, residuals=residuals)


def detilde(sample: RegressionSample, gamma: np.ndarray) -> np.ndarray:
    """Partial the covariates out of the outcome: y_i - z_i' gamma."""
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    if gamma.size != sample.p_z:
        raise ValueError(f"gamma has length {gamma.size}, expected p_z = {sample.p_z}")
    if gamma.size == 0:
        return sample.y.copy()
    return sample.y - sample.z @ gamma
