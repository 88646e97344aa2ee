"""Full-covariance Bayesian aggregation, used as the ground-truth check for
the factorized per-entry update in the model.

A latent ``Z ~ N(mu, Lambda^-1)`` receives independent linear-Gaussian
observations ``R_n ~ N(A_n Z, L_n^-1)``. Conditioning is done with the exact
joint-precision algebra; the factorized model must agree with this whenever
the covariances are diagonal and each ``A_n`` is a scalar multiple of the
identity. Correctness over speed: everything here is tiny dense linear
algebra solved by Cholesky.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DiagGaussian, Tensor
from .model import gba_update


@dataclass
class FullGaussian:
    mean: np.ndarray  # (d,)
    precision: np.ndarray  # (d, d), symmetric positive-definite

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.precision = np.asarray(self.precision, dtype=np.float64)
        if self.precision.shape != (self.mean.size, self.mean.size):
            raise ValueError("precision must be d x d")
        if np.max(np.abs(self.precision - self.precision.T)) > 1e-10:
            raise ValueError("precision must be symmetric")
        np.linalg.cholesky(self.precision)  # raises if not positive-definite


def joint_precision(prior: FullGaussian, observations) -> np.ndarray:
    """Block precision of the joint (Z, R_1, .., R_N) distribution.

    ``observations`` is a list of ``(A_n, L_n)`` pairs of d x d matrices with
    ``L_n`` positive-definite. Layout: the top-left block is
    ``Lambda + sum A_n^T L_n A_n``, off-diagonal blocks ``-A_n^T L_n`` /
    ``-L_n A_n``, and each observation contributes its ``L_n`` diagonal block.
    """
    d = prior.mean.size
    n = len(observations)
    size = d * (n + 1)
    p = np.zeros((size, size))
    top = prior.precision.copy()
    for i, (a_i, l_i) in enumerate(observations):
        a_i = np.asarray(a_i, dtype=np.float64)
        l_i = np.asarray(l_i, dtype=np.float64)
        if a_i.shape != (d, d) or l_i.shape != (d, d):
            raise ValueError("observation matrices must be d x d")
        top += a_i.T @ l_i @ a_i
        r0 = d * (i + 1)
        p[0:d, r0:r0 + d] = -a_i.T @ l_i
        p[r0:r0 + d, 0:d] = -l_i @ a_i
        p[r0:r0 + d, r0:r0 + d] = l_i
    p[0:d, 0:d] = top
    return p


def condition_full(prior: FullGaussian, observations) -> FullGaussian:
    """Exact posterior of Z given observed values of every R_n.

    ``observations`` is a list of ``(A_n, L_n, R_n)`` triples. The posterior
    precision is ``Lambda + sum A_n^T L_n A_n`` and the mean solves
    ``precision @ mean = Lambda mu + sum A_n^T L_n R_n``.
    """
    d = prior.mean.size
    post_prec = prior.precision.copy()
    rhs = prior.precision @ prior.mean
    for a_i, l_i, r_i in observations:
        a_i = np.asarray(a_i, dtype=np.float64)
        l_i = np.asarray(l_i, dtype=np.float64)
        r_i = np.asarray(r_i, dtype=np.float64)
        if a_i.shape != (d, d) or l_i.shape != (d, d) or r_i.shape != (d,):
            raise ValueError("observation shapes must be (d,d), (d,d), (d,)")
        post_prec += a_i.T @ l_i @ a_i
        rhs += a_i.T @ l_i @ r_i
    chol = np.linalg.cholesky(post_prec)
    mean = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    return FullGaussian(mean=mean, precision=post_prec)


def check_factorized_vs_full(trials: int = 1000, max_dim: int = 4,
                             max_neighbors: int = 5, seed: int = 0) -> float:
    """Max entrywise |delta mu| / |delta sigma^2| between the factorized
    update and full-covariance conditioning over random diagonal instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(1, max_dim + 1))
        n = int(rng.integers(0, max_neighbors + 1))
        mu = rng.normal(size=d)
        sigma = rng.uniform(0.1, 2.0, size=d)
        weights = rng.uniform(0.0, 1.0, size=n)
        if n > 0 and rng.uniform() < 0.1:
            weights[:] = 0.0  # exercise the no-information limit
        obs_mean = rng.normal(size=(n, d))
        obs_sigma = rng.uniform(0.1, 2.0, size=(n, d))

        prior = DiagGaussian(Tensor(mu.reshape(1, d)), Tensor(sigma.reshape(1, d)))
        observations = [
            DiagGaussian(Tensor(obs_mean[i].reshape(1, d)),
                         Tensor(obs_sigma[i].reshape(1, d)))
            for i in range(n)
        ]
        post = gba_update(prior, observations, weights)
        mu_fact = post.mean.data.reshape(d)
        var_fact = post.std.data.reshape(d) ** 2

        full_prior = FullGaussian(mean=mu, precision=np.diag(1.0 / sigma**2))
        triples = [
            (weights[i] * np.eye(d), np.diag(1.0 / obs_sigma[i] ** 2), obs_mean[i])
            for i in range(n)
        ]
        full_post = condition_full(full_prior, triples)
        cov = np.linalg.inv(full_post.precision)
        dev = max(np.max(np.abs(full_post.mean - mu_fact)),
                  np.max(np.abs(np.diag(cov) - var_fact)))
        if dev > worst:
            worst = dev
    return worst
