"""Monte Carlo engine: data generation, replication loops, reporting.

Three cross-sectional designs share a chi-squared focal regressor and
correlated covariates; they differ in whether the regressor or the error
distribution is heterogeneous across observations.  Two further variants
cover a three-category slope and idiosyncratic error heterogeneity whose
draws stay fixed across replications.

Replication i draws from a stream that is a pure function of (study
seed, i), so shortening a study reproduces the head of a longer one and
parallel execution is deterministic.  Chi-squared variates are built as
sums of squared standard normals (exactness over generality).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import gmm, ols
from .core import CategoricalDistribution, EstimationError, RegressionSample

THREADS_ENV = "CCRM_THREADS"
CV_05 = float(norm.ppf(0.975))

HIGH_VARIANCE = CategoricalDistribution(pi=(0.5, 0.5), b=(1.0, 2.0))
LOW_VARIANCE = CategoricalDistribution(pi=(0.3, 0.7), b=(0.5, 1.345))
THREE_CATEGORY = CategoricalDistribution(pi=(0.3, 0.3, 0.4), b=(1.0, 2.0, 3.0))

DGP_KINDS = ("baseline", "categorical_x", "categorical_u", "k3", "hetero")


@dataclass(frozen=True)
class DgpSpec:
    """One data generating process.

    ``kind`` picks the design; ``parametrization`` picks the slope
    distribution ("high", "low", or "custom" with an explicit ``theta``).
    The k3 kind defaults to the three-category parameter values.
    ``hetero_alpha`` is the heterogeneity degree for the hetero kind
    (fraction n^alpha of observations receive a fixed extra error).
    """

    n: int
    kind: str = "baseline"
    parametrization: str = "high"
    theta: CategoricalDistribution | None = None
    alpha_intercept: float = 0.25
    gamma: tuple = (1.0, 1.0)
    hetero_alpha: float = 0.25

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise ValueError(f"unknown DGP kind {self.kind!r}, pick one of {DGP_KINDS}")
        if self.parametrization not in ("high", "low", "custom"):
            raise ValueError(f"unknown parametrization {self.parametrization!r}")
        if self.parametrization == "custom" and self.theta is None:
            raise ValueError("custom parametrization requires an explicit theta")
        if self.n < 10:
            raise ValueError(f"n must be at least 10, got {self.n}")

    @property
    def distribution(self) -> CategoricalDistribution:
        if self.theta is not None:
            return self.theta
        if self.kind == "k3":
            return THREE_CATEGORY
        return HIGH_VARIANCE if self.parametrization == "high" else LOW_VARIANCE

    @property
    def k(self) -> int:
        return self.distribution.k

    def gamma_full(self) -> np.ndarray:
        """Coefficients on (intercept, z1, z2)."""
        return np.concatenate(([self.alpha_intercept], np.asarray(self.gamma, dtype=float)))

    def describe(self) -> dict:
        theta = self.distribution
        return {
            "kind": self.kind,
            "parametrization": self.parametrization,
            "n": self.n,
            "pi": list(theta.pi),
            "b": list(theta.b),
            "alpha_intercept": self.alpha_intercept,
            "gamma": list(self.gamma),
            "hetero_alpha": self.hetero_alpha if self.kind == "hetero" else None,
        }


def _seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _chi2(rng: np.random.Generator, df: int, n: int) -> np.ndarray:
    """chi-squared draws as sums of df squared standard normals."""
    z = rng.standard_normal((n, df))
    return np.einsum("ij,ij->i", z, z)


def regressors(rng: np.random.Generator, n: int, kind: str = "baseline"):
    """Focal regressor and covariates (x, z1, z2) for the given design.

    The baseline x is a standardized chi-squared(2); the categorical_x
    design switches the second half of the sample to a chi-squared(4)
    based variate so the regressor distribution varies over i.
    """
    if kind == "categorical_x":
        half = n // 2
        x = np.empty(n)
        x[:half] = (_chi2(rng, 2, half) - 2.0) / 2.0
        x[half:] = (_chi2(rng, 4, n - half) - 2.0) / 4.0
    else:
        x = (_chi2(rng, 2, n) - 2.0) / 2.0
    v1 = rng.standard_normal(n)
    v2 = rng.standard_normal(n)
    z1 = x + v1
    z2 = z1 + v2
    return x, z1, z2


def _errors(rng: np.random.Generator, n: int, kind: str) -> np.ndarray:
    if kind == "categorical_u":
        half = n // 2
        u = np.empty(n)
        sig2 = _chi2(rng, 2, half)
        u[:half] = np.sqrt(sig2) * rng.standard_normal(half)
        u[half:] = (_chi2(rng, 2, n - half) - 2.0) / 2.0
        return u
    sig2 = 0.5 * (1.0 + _chi2(rng, 1, n))
    return np.sqrt(sig2) * rng.standard_normal(n)


def conditional_hetero_errors(rng: np.random.Generator, x: np.ndarray) -> np.ndarray:
    """Conditionally heteroskedastic errors u_i = x_i eps_i.

    Least squares for (E(beta), gamma) stays valid under this error, so
    coverage checks reuse it; it is deliberately not a DgpSpec kind since
    the distributional GMM stage is not identified there.
    """
    return x * rng.standard_normal(x.size)


def generate(spec: DgpSpec, seed, fixed_noise: np.ndarray | None = None):
    """Draw one sample; deterministic given (spec, seed).

    Returns
    -------
    (sample, truth) : (RegressionSample, dict)
        The sample plus the realized slopes, errors, and the true
        parameter values ("theta", "gamma_full", "moments").

    For the hetero kind, ``fixed_noise`` supplies the extra error terms
    that stay constant across replications; when omitted they are drawn
    from a dedicated sub-stream of this call's seed.
    """
    root = _seedseq(seed)
    rng = np.random.default_rng(root)
    n = spec.n
    theta = spec.distribution

    x, z1, z2 = regressors(rng, n, spec.kind)
    u = _errors(rng, n, spec.kind)
    draws = rng.random(n)
    beta = theta.b[np.searchsorted(np.cumsum(theta.pi), draws, side="right").clip(0, theta.k - 1)]

    if spec.kind == "hetero":
        n_h = int(math.floor(n ** spec.hetero_alpha))
        if fixed_noise is None:
            fixed_noise = hetero_fixed_noise(root, spec)
        if fixed_noise.size < n_h:
            raise ValueError(f"fixed_noise supplies {fixed_noise.size} draws, need {n_h}")
        u = u.copy()
        u[:n_h] += fixed_noise[:n_h]

    z = np.column_stack([np.ones(n), z1, z2])
    y = x * beta + z @ spec.gamma_full() + u
    sample = RegressionSample(y=y, x=x, z=z)
    truth = {
        "beta": beta,
        "u": u,
        "theta": theta,
        "gamma_full": spec.gamma_full(),
        "moments": theta.b[None, :] ** np.arange(1, 2 * theta.k)[:, None] @ theta.pi,
    }
    return sample, truth


def hetero_fixed_noise(seed, spec: DgpSpec) -> np.ndarray:
    """Replication-invariant extra errors, from a dedicated sub-stream."""
    n_h = int(math.floor(spec.n ** spec.hetero_alpha))
    root = _seedseq(seed)
    stream = np.random.SeedSequence(
        entropy=root.entropy, spawn_key=tuple(root.spawn_key) + (1,)
    )
    return np.random.default_rng(stream).standard_normal(n_h)


@dataclass(frozen=True)
class EstimatorConfig:
    """Which estimator a study runs, and with what settings."""

    method: str = "gmm_theta"  # ols | gmm_moments | gmm_theta
    k: int | None = None       # defaults to the DGP's category count
    s: int | None = None
    options: gmm.GmmOptions = field(default_factory=gmm.GmmOptions)

    def __post_init__(self):
        if self.method not in _ESTIMATORS:
            raise ValueError(
                f"unknown estimator {self.method!r}, pick one of {sorted(_ESTIMATORS)}"
            )


def _fit_ols(sample: RegressionSample, truth: dict, config: EstimatorConfig):
    est = ols.estimate_phi(sample)
    names = ["E_beta", "alpha"] + [f"gamma{j}" for j in range(1, sample.p_z)]
    truths = np.concatenate(([truth["theta"].mean()], truth["gamma_full"]))
    return names, est.phi.copy(), est.se(), truths


def _fit_gmm_moments(sample: RegressionSample, truth: dict, config: EstimatorConfig):
    k = config.k or truth["theta"].k
    est = gmm.estimate_moments(sample, k, s=config.s, options=config.options)
    names = [f"m{r}" for r in range(1, 2 * k)]
    theta = truth["theta"]
    truths = theta.b[None, :] ** np.arange(1, 2 * k)[:, None] @ theta.pi
    values = est.moments.m.copy()
    ses = est.param_se()[: 2 * k - 1]
    return names, values, ses, truths


def _fit_gmm_theta(sample: RegressionSample, truth: dict, config: EstimatorConfig):
    k = config.k or truth["theta"].k
    est = gmm.estimate(sample, k, s=config.s, options=config.options)
    if "pi_not_identified" in est.flags or est.theta.k != k:
        raise EstimationError("homogeneity flagged: pi is not identified")
    names = [f"pi{j + 1}" for j in range(k)] + [f"b{j + 1}" for j in range(k)]
    theta = truth["theta"]
    truths = np.concatenate([theta.pi, theta.b])
    values = np.concatenate([est.theta.pi, est.theta.b])
    ses = est.param_se()[: 2 * k]
    return names, values, ses, truths


_ESTIMATORS = {
    "ols": _fit_ols,
    "gmm_moments": _fit_gmm_moments,
    "gmm_theta": _fit_gmm_theta,
}


@dataclass(frozen=True)
class ParamSummary:
    """Bias, RMSE and empirical test size for one parameter."""

    name: str
    truth: float
    bias: float
    rmse: float
    size: float
    mean_se: float

    def __post_init__(self):
        if not (0.0 <= self.size <= 1.0):
            raise ValueError(f"size must be in [0, 1], got {self.size!r}")
        if self.rmse < abs(self.bias) - 1e-12:
            raise ValueError(f"rmse {self.rmse!r} smaller than |bias| {self.bias!r}")


@dataclass(frozen=True)
class McReport:
    """Aggregated study results.

    ``runtime_seconds`` is informational only and never serialized, so
    identical (spec, reps, seed) runs produce byte-identical reports.
    ``replications`` optionally keeps the per-replication estimates
    (needed to verify the subsetting property).
    """

    dgp: dict
    estimator: str
    n: int
    reps: int
    reps_used: int
    failures: int
    seed: int
    parameters: tuple
    power: dict | None
    runtime_seconds: float
    replications: dict | None = None

    def parameter(self, name: str) -> ParamSummary:
        for p in self.parameters:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_dict(self) -> dict:
        out = {
            "dgp": self.dgp,
            "estimator": self.estimator,
            "n": self.n,
            "reps": self.reps,
            "reps_used": self.reps_used,
            "failures": self.failures,
            "seed": self.seed,
            "parameters": [
                {
                    "name": p.name,
                    "truth": p.truth,
                    "bias": p.bias,
                    "rmse": p.rmse,
                    "size": p.size,
                    "mean_se": p.mean_se,
                }
                for p in self.parameters
            ],
        }
        if self.power is not None:
            out["power"] = {
                name: [{"theta_delta": d, "rejection_rate": r} for d, r in curve]
                for name, curve in self.power.items()
            }
        if self.replications is not None:
            out["replications"] = {k: list(v) for k, v in self.replications.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Flat rows: one per parameter, with the DGP context repeated."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["dgp", "parametrization", "estimator", "n", "reps_used",
             "parameter", "truth", "bias", "rmse", "size", "mean_se"]
        )
        for p in self.parameters:
            writer.writerow(
                [self.dgp["kind"], self.dgp["parametrization"], self.estimator,
                 self.n, self.reps_used, p.name,
                 repr(p.truth), repr(p.bias), repr(p.rmse), repr(p.size), repr(p.mean_se)]
            )
        return buf.getvalue()

    def power_to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["parameter", "theta_delta", "rejection_rate"])
        if self.power:
            for name, curve in self.power.items():
                for delta, rate in curve:
                    writer.writerow([name, repr(delta), repr(rate)])
        return buf.getvalue()


def _replication_seed(seed: int, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(0, i))


def _run_one(args):
    spec, config, seed, i, fixed_noise = args
    sample, truth = generate(spec, _replication_seed(seed, i), fixed_noise=fixed_noise)
    fit = _ESTIMATORS[config.method]
    try:
        names, values, ses, truths = fit(sample, truth, config)
    except EstimationError as exc:
        return i, None, str(exc)
    return i, (names, values, ses, truths), None


def _resolve_workers(workers: int | None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, min(8, os.cpu_count() or 1))


def run_study(
    spec: DgpSpec,
    reps: int,
    config: EstimatorConfig,
    seed: int,
    power_offsets: np.ndarray | None = None,
    keep_replications: bool = False,
    workers: int | None = None,
) -> McReport:
    """Replicate generate -> estimate and aggregate bias/RMSE/size.

    Replications that raise a typed estimation error are excluded and
    counted in ``failures``.  ``power_offsets`` adds rejection rates over
    the displaced values truth + offset for every parameter; the offset 0
    reproduces the size.  ``workers`` caps process-level parallelism
    (default: CCRM_THREADS environment variable, then CPU count up to 8).
    """
    if reps < 1:
        raise ValueError(f"reps must be at least 1, got {reps}")
    t0 = time.perf_counter()
    fixed_noise = (
        hetero_fixed_noise(seed, spec) if spec.kind == "hetero" else None
    )
    jobs = [(spec, config, seed, i, fixed_noise) for i in range(reps)]
    workers = _resolve_workers(workers)
    results = [None] * reps
    if workers == 1 or reps == 1:
        for job in jobs:
            i, payload, err = _run_one(job)
            results[i] = (payload, err)
    else:
        chunk = max(1, reps // (workers * 4))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, payload, err in pool.map(_run_one, jobs, chunksize=chunk):
                results[i] = (payload, err)

    names = None
    rows, ses_rows = [], []
    failures = 0
    for payload, _err in results:
        if payload is None:
            failures += 1
            continue
        names, values, ses, truths = payload
        rows.append(values)
        ses_rows.append(ses)
    if not rows:
        raise EstimationError(f"all {reps} replications failed")
    est = np.asarray(rows)
    se = np.asarray(ses_rows)
    truth_vec = np.asarray(truths)

    params = []
    power = None if power_offsets is None else {}
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat_den = np.where(se > 0, se, np.inf)
        for j, name in enumerate(names):
            dev = est[:, j] - truth_vec[j]
            bias = float(dev.mean())
            rmse = float(np.sqrt(np.mean(dev ** 2)))
            reject = np.abs(dev) / tstat_den[:, j] > CV_05
            params.append(
                ParamSummary(
                    name=name,
                    truth=float(truth_vec[j]),
                    bias=bias,
                    rmse=rmse,
                    size=float(reject.mean()),
                    mean_se=float(se[:, j].mean()),
                )
            )
            if power is not None:
                curve = []
                for delta in np.asarray(power_offsets, dtype=float):
                    shifted = np.abs(est[:, j] - (truth_vec[j] + delta)) / tstat_den[:, j]
                    curve.append((float(delta), float(np.mean(shifted > CV_05))))
                power[name] = tuple(curve)

    replications = None
    if keep_replications:
        replications = {name: tuple(est[:, j]) for j, name in enumerate(names)}
        replications.update(
            {f"se_{name}": tuple(se[:, j]) for j, name in enumerate(names)}
        )
    return McReport(
        dgp=spec.describe(),
        estimator=config.method,
        n=spec.n,
        reps=reps,
        reps_used=len(rows),
        failures=failures,
        seed=seed,
        parameters=tuple(params),
        power=power,
        runtime_seconds=time.perf_counter() - t0,
        replications=replications,
    )
