"""Shared oracles and fixture builders.

The population-table helpers here deliberately re-derive everything with
plain Python loops and exact discrete moments, independent of the library
code paths they are used to check.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from catcoef.core import CategoricalDistribution, RegressionSample


def discrete_moment(atoms, probs, order: int) -> float:
    """Exact raw moment of a finite discrete distribution."""
    return float(sum(p * a ** order for a, p in zip(atoms, probs)))


def theta_moments_full(theta: CategoricalDistribution, r_max: int) -> np.ndarray:
    """(1, m_1, ..., m_r_max) by direct summation."""
    out = [1.0]
    for r in range(1, r_max + 1):
        out.append(float(sum(p * b ** r for p, b in zip(theta.pi, theta.b))))
    return np.asarray(out)


def population_rho(theta: CategoricalDistribution, sigma_full, x_moments, r_max: int, s_max: int):
    """Population table rho[r, s] = E(ytilde^r x^s) via the binomial expansion.

    With ytilde = x*beta + u and (x, beta, u) mutually independent,
    E(ytilde^r x^s) = sum_q C(r, q) E(x^{r-q+s}) E(u^q) E(beta^{r-q}).
    ``x_moments`` must supply E(x^j) up to j = r_max + s_max.
    """
    m_full = theta_moments_full(theta, r_max)
    rho = np.zeros((r_max + 1, s_max + 1))
    for r in range(r_max + 1):
        for s in range(s_max + 1):
            total = 0.0
            for q in range(r + 1):
                total += (
                    math.comb(r, q)
                    * x_moments[r - q + s]
                    * sigma_full[q]
                    * m_full[r - q]
                )
            rho[r, s] = total
    return rho


def exact_fit_sample(theta: CategoricalDistribution, x_atoms, copies: int = 1):
    """Noise-free sample whose empirical moments hit the population exactly.

    Each x atom is paired with every support point in exact proportion to
    the category probabilities (which must be rational with a small
    denominator), and u = 0.  Independence between the slope and the
    regressor then holds exactly in-sample.
    """
    weights = np.round(np.asarray(theta.pi) * 10).astype(int)
    assert np.allclose(weights / weights.sum(), theta.pi), "pi must be multiples of 0.1"
    x_list, beta_list = [], []
    for atom in x_atoms:
        for b_val, w in zip(theta.b, weights):
            for _ in range(w * copies):
                x_list.append(atom)
                beta_list.append(b_val)
    x = np.asarray(x_list, dtype=float)
    beta = np.asarray(beta_list, dtype=float)
    y = x * beta
    return RegressionSample(y=y, x=x, z=np.empty((x.size, 0))), beta


def random_theta(rng: np.random.Generator, k: int, min_gap: float = 0.1, min_weight: float = 0.05):
    """Random valid distribution with bounded-away gaps and weights."""
    raw = rng.dirichlet(np.ones(k))
    pi = min_weight + (1.0 - k * min_weight) * raw
    b0 = rng.uniform(-2.0, 2.0)
    gaps = min_gap + rng.uniform(0.0, 1.5, size=k - 1)
    b = np.concatenate(([b0], b0 + np.cumsum(gaps)))
    return CategoricalDistribution(pi=pi / pi.sum(), b=b)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260810)
