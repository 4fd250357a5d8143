"""Exact Gaussian-process regression with an RBF kernel and arbitrary prior mean.

Everything here is dense, double-precision linear algebra: kernel matrices,
posterior mean/covariance via a Cholesky solve with escalating jitter, the
log marginal likelihood, and seeded sampling from a posterior.  The prior
mean is an evaluable function of the inputs rather than a vector, so a
mechanistic trajectory (or any other curve) can be plugged in directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

__all__ = [
    "RbfKernel",
    "GpModel",
    "PosteriorGaussian",
    "SingularKernelError",
    "kernel_matrix",
    "posterior",
    "log_marginal_likelihood",
    "sample",
    "fit_hyperparameters",
]

# Jitter escalation for near-singular solves: relative to mean diagonal.
_JITTER_START = 1e-10
_JITTER_MAX = 1e-4


class SingularKernelError(np.linalg.LinAlgError):
    """Raised when a kernel matrix stays non-factorizable past the jitter budget."""


def _zero_mean(x: np.ndarray) -> np.ndarray:
    return np.zeros(len(x))


@dataclass(frozen=True)
class RbfKernel:
    """Anisotropic squared-exponential kernel: one lengthscale per input dim."""

    lengthscales: np.ndarray
    signal_variance: float = 1.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if np.any(ls <= 0) or not np.all(np.isfinite(ls)):
            raise ValueError("lengthscales must be positive and finite")
        if not (self.signal_variance > 0 and math.isfinite(self.signal_variance)):
            raise ValueError("signal_variance must be positive and finite")


@dataclass
class GpModel:
    """Training data plus kernel, noise and prior mean; immutable by convention."""

    kernel: RbfKernel
    noise_variance: float = 0.0
    train_inputs: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    train_targets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    prior_mean: Callable[[np.ndarray], np.ndarray] = _zero_mean

    def __post_init__(self):
        self.train_inputs = _as_points(self.train_inputs)
        self.train_targets = np.asarray(self.train_targets, dtype=float).ravel()
        if self.train_inputs.shape[0] != self.train_targets.shape[0]:
            raise ValueError("train_inputs and train_targets must have equal length")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be >= 0")

    @property
    def n(self) -> int:
        return self.train_inputs.shape[0]


@dataclass(frozen=True)
class PosteriorGaussian:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).ravel())
        cov = np.asarray(self.covariance, dtype=float)
        # Symmetrize to kill round-off asymmetry from the Schur complement.
        cov = 0.5 * (cov + cov.T)
        object.__setattr__(self, "covariance", cov)

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.covariance)


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("inputs must be an (n, d) array")
    return x


def kernel_matrix(kernel: RbfKernel, a, b) -> np.ndarray:
    """k(a_i, b_j) = signal_variance * exp(-0.5 * sum_k ((a_ik - b_jk) / ls_k)^2)."""
    a, b = _as_points(a), _as_points(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimensionality mismatch: {a.shape[1]} vs {b.shape[1]}")
    ls = kernel.lengthscales
    if ls.size == 1 and a.shape[1] > 1:
        ls = np.full(a.shape[1], ls[0])
    if ls.size != a.shape[1]:
        raise ValueError(f"kernel has {ls.size} lengthscales for {a.shape[1]}-d input")
    sa = a / ls
    sb = b / ls
    sq = (
        np.sum(sa**2, axis=1)[:, None]
        + np.sum(sb**2, axis=1)[None, :]
        - 2.0 * sa @ sb.T
    )
    return kernel.signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0))


def _factor_with_jitter(mat: np.ndarray):
    """Cholesky with additive jitter escalation; returns (factor, jitter_used)."""
    n = mat.shape[0]
    scale = np.trace(mat) / n if n else 1.0
    if scale <= 0:
        scale = 1.0
    jitter = 0.0
    while True:
        try:
            return cho_factor(mat + jitter * np.eye(n), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter = _JITTER_START * scale if jitter == 0.0 else jitter * 10.0
            if jitter > _JITTER_MAX * scale:
                raise SingularKernelError(
                    f"kernel matrix not factorizable after jitter {jitter:.2e}"
                )


def posterior(model: GpModel, test_inputs) -> PosteriorGaussian:
    """Exact GP posterior at the test points.

    With no training data this is just the prior: mean m(X*), covariance K**.
    """
    xs = _as_points(test_inputs)
    k_ss = kernel_matrix(model.kernel, xs, xs)
    m_s = np.asarray(model.prior_mean(xs), dtype=float).ravel()
    if m_s.shape[0] != xs.shape[0]:
        raise ValueError("prior_mean returned a vector of the wrong length")
    if model.n == 0:
        return PosteriorGaussian(mean=m_s, covariance=k_ss)

    k_xx = kernel_matrix(model.kernel, model.train_inputs, model.train_inputs)
    k_xx[np.diag_indices_from(k_xx)] += model.noise_variance
    k_xs = kernel_matrix(model.kernel, model.train_inputs, xs)
    resid = model.train_targets - np.asarray(
        model.prior_mean(model.train_inputs), dtype=float
    ).ravel()

    factor, _ = _factor_with_jitter(k_xx)
    alpha = cho_solve(factor, resid)
    v = cho_solve(factor, k_xs)
    mean = m_s + k_xs.T @ alpha
    cov = k_ss - k_xs.T @ v
    return PosteriorGaussian(mean=mean, covariance=cov)


def log_marginal_likelihood(model: GpModel) -> float:
    """Gaussian log evidence of the residuals under K + noise_variance * I."""
    if model.n < 1:
        raise ValueError("log marginal likelihood needs at least one observation")
    k_xx = kernel_matrix(model.kernel, model.train_inputs, model.train_inputs)
    k_xx[np.diag_indices_from(k_xx)] += model.noise_variance
    resid = model.train_targets - np.asarray(
        model.prior_mean(model.train_inputs), dtype=float
    ).ravel()
    factor, jitter = _factor_with_jitter(k_xx)
    alpha = cho_solve(factor, resid)
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return float(
        -0.5 * resid @ alpha - 0.5 * logdet - 0.5 * model.n * math.log(2.0 * math.pi)
    )


def sample(
    post: PosteriorGaussian, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw `count` joint samples; deterministic for a fixed generator state."""
    if count < 1:
        raise ValueError("count must be >= 1")
    m = post.mean.shape[0]
    cov = post.covariance
    if m == 0:
        return np.zeros((count, 0))
    tr = np.trace(cov)
    if tr <= 0.0 and np.allclose(cov, 0.0):
        return np.tile(post.mean, (count, 1))
    try:
        factor, _ = _factor_with_jitter(cov)
    except SingularKernelError as exc:
        raise SingularKernelError(f"posterior covariance not PSD: {exc}") from exc
    lower = np.tril(factor[0])
    z = rng.standard_normal((count, m))
    return post.mean[None, :] + z @ lower.T


def fit_hyperparameters(
    train_inputs,
    train_targets,
    prior_mean: Callable[[np.ndarray], np.ndarray] = _zero_mean,
    n_restarts: int = 4,
    seed: int = 0,
    noise_floor: float = 1e-6,
    fixed_noise: Optional[float] = None,
) -> GpModel:
    """Fit lengthscales, signal variance and (optionally) noise by maximizing
    the log marginal likelihood in log-space with a few seeded restarts."""
    x = _as_points(train_inputs)
    y = np.asarray(train_targets, dtype=float).ravel()
    d = x.shape[1]
    resid = y - np.asarray(prior_mean(x), dtype=float).ravel()
    y_var = max(float(np.var(resid)), 1e-8)
    spans = np.maximum(x.max(axis=0) - x.min(axis=0), 1e-3)
    rng = np.random.default_rng(seed)

    def build(theta) -> GpModel:
        ls = np.exp(theta[:d])
        sv = math.exp(theta[d])
        nv = fixed_noise if fixed_noise is not None else math.exp(theta[d + 1])
        return GpModel(
            kernel=RbfKernel(lengthscales=ls, signal_variance=sv),
            noise_variance=max(nv, noise_floor) if fixed_noise is None else nv,
            train_inputs=x,
            train_targets=y,
            prior_mean=prior_mean,
        )

    def negloglik(theta):
        try:
            return -log_marginal_likelihood(build(theta))
        except (SingularKernelError, FloatingPointError, ValueError):
            return 1e12

    base = np.concatenate(
        [np.log(spans / 2.0), [math.log(y_var)]]
        + ([] if fixed_noise is not None else [[math.log(y_var / 10.0 + noise_floor)]])
    )
    best_theta, best_val = base, negloglik(base)
    for k in range(n_restarts):
        start = base + (rng.standard_normal(base.size) if k else 0.0)
        res = minimize(negloglik, start, method="L-BFGS-B")
        if res.fun < best_val:
            best_theta, best_val = res.x, res.fun
    return build(best_theta)
