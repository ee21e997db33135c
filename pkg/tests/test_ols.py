import numpy as np
import pytest

from catcoef.core import RegressionSample, SingularDesignError
from catcoef.ols import detilde, estimate_phi


def test_noiseless_homogeneous_exact_fit():
    rng = np.random.default_rng(1)
    x = rng.normal(size=50)
    z = rng.normal(size=(50, 1))
    y = 2.0 * x + 1.0 * z[:, 0]
    est = estimate_phi(RegressionSample(y=y, x=x, z=z))
    assert np.allclose(est.phi, [2.0, 1.0], atol=1e-10)
    assert np.allclose(est.residuals, 0.0, atol=1e-10)
    assert np.allclose(est.cov, 0.0, atol=1e-12)


def test_five_observation_fixture_matches_normal_equations_oracle():
    y = np.array([1.1, 0.4, -0.8, 2.2, 0.5])
    x = np.array([0.3, -1.2, 0.7, 1.5, -0.4])
    z = np.array([[1.0, 0.2], [1.0, -0.7], [1.0, 1.1], [1.0, 0.4], [1.0, -1.3]])
    sample = RegressionSample(y=y, x=x, z=z)
    est = estimate_phi(sample)
    # oracle: direct normal-equations solve with an explicit inverse
    w = np.column_stack([x, z])
    phi_oracle = np.linalg.inv(w.T @ w) @ (w.T @ y)
    assert np.allclose(est.phi, phi_oracle, atol=1e-12)
    # oracle for the sandwich
    resid = y - w @ phi_oracle
    q_inv = np.linalg.inv(w.T @ w / 5)
    v_wxi = (w * resid[:, None] ** 2).T @ w / 5
    cov_oracle = q_inv @ v_wxi @ q_inv / 5
    assert np.allclose(est.cov, cov_oracle, atol=1e-12)


def test_orthogonality_and_psd(rng):
    n = 500
    x = rng.normal(size=n)
    z = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = 1.5 * x + z @ np.array([0.25, 1.0]) + rng.normal(size=n)
    sample = RegressionSample(y=y, x=x, z=z)
    est = estimate_phi(sample)
    # normal-equation identity: sum_i w_i xi_i = 0
    score = sample.w.T @ est.residuals
    assert np.all(np.abs(score) < 1e-8 * n)
    assert np.allclose(est.cov, est.cov.T)
    assert np.linalg.eigvalsh(est.cov).min() >= -1e-14


def test_singular_design_reports_eigenvalue():
    x = np.arange(10.0)
    z = np.column_stack([x, 2.0 * x])  # collinear with x and each other
    with pytest.raises(SingularDesignError, match="eigenvalue"):
        estimate_phi(RegressionSample(y=np.ones(10), x=x, z=z))


def test_too_few_observations():
    with pytest.raises(SingularDesignError):
        estimate_phi(RegressionSample(y=[1.0], x=[1.0], z=np.empty((1, 0))))


class TestDetilde:
    def test_zero_gamma(self):
        sample = RegressionSample(y=[1.0, 2.0], x=[0.1, 0.2], z=[[3.0], [4.0]])
        assert np.allclose(detilde(sample, [0.0]), sample.y)

    def test_no_covariates(self):
        sample = RegressionSample(y=[1.0, 2.0], x=[0.1, 0.2], z=np.empty((2, 0)))
        assert np.allclose(detilde(sample, []), sample.y)

    def test_four_observation_fixture(self):
        y = np.array([1.0, -2.0, 0.5, 3.0])
        z = np.array([[1.0, 2.0], [0.5, -1.0], [2.0, 0.0], [-1.0, 1.0]])
        gamma = np.array([0.3, -0.7])
        sample = RegressionSample(y=y, x=np.ones(4), z=z)
        expected = np.array(
            [y[i] - (z[i, 0] * 0.3 + z[i, 1] * -0.7) for i in range(4)]
        )
        assert np.allclose(detilde(sample, gamma), expected, atol=1e-15)

    def test_dimension_mismatch(self):
        sample = RegressionSample(y=[1.0, 2.0], x=[0.1, 0.2], z=[[3.0], [4.0]])
        with pytest.raises(ValueError):
            detilde(sample, [1.0, 2.0])
