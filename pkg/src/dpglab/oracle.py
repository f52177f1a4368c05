"""Closed-form ground truth for linear operators with Gaussian noise.

For a finite-atom prior the posterior given ``y`` is the same atom set with
reweighted masses, so the conditional score is just the marginal score of the
reweighted prior. For an isotropic Gaussian prior everything stays Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .operators import InverseProblem
from .prior import FiniteAtomPrior, GaussianPrior
from .schedule import NoiseSchedule

__all__ = [
    "PosteriorAtoms",
    "exact_posterior_atoms",
    "exact_conditional_score",
    "exact_guidance_score",
    "log_likelihood_given_state",
    "direction_accuracy",
    "posterior_tv_distance",
]


@dataclass(frozen=True)
class PosteriorAtoms:
    atoms: np.ndarray
    weights: np.ndarray
    log_weights: np.ndarray


def _require_exact(problem: InverseProblem) -> None:
    if not problem.operator.linear:
        raise TypeError("exact oracle requires a linear operator")
    if problem.noise.kind != "gaussian":
        raise TypeError("exact oracle requires Gaussian observation noise")


def _atom_log_lik(prior: FiniteAtomPrior, problem: InverseProblem) -> np.ndarray:
    res = problem.y - problem.operator.apply(prior.atoms)
    sq = np.sum(res.reshape(len(prior), -1) ** 2, axis=1)
    return -sq / (2.0 * problem.noise.sigma_y**2)


def exact_posterior_atoms(prior: FiniteAtomPrior, problem: InverseProblem) -> PosteriorAtoms:
    _require_exact(problem)
    if not isinstance(prior, FiniteAtomPrior):
        raise TypeError("posterior atoms need a finite-atom prior")
    logits = prior.log_weights + _atom_log_lik(prior, problem)
    log_w = logits - _logsumexp(logits)
    return PosteriorAtoms(prior.atoms, np.exp(log_w), log_w)


def _gaussian_guidance(prior: GaussianPrior, problem: InverseProblem, x, i, sched) -> np.ndarray:
    # y | x_i ~ N(A mu(x_i), sigma_y^2 I + tau^2 A A^T),  mu linear with gain g
    A = problem.operator.matrix()
    a = np.sqrt(sched.alpha_bar[i])
    v = 1.0 - sched.alpha_bar[i]
    c = a * a * prior.variance + v
    gain = a * prior.variance / c
    tau2 = prior.posterior_variance(i, sched)
    cov = problem.noise.sigma_y**2 * np.eye(A.shape[0]) + tau2 * A @ A.T
    x = np.asarray(x, dtype=np.float64)
    batch = x.shape[: x.ndim - len(prior.shape)]
    mu = prior.tweedie_mean(x, i, sched).reshape(batch + (-1,))
    res = problem.y.ravel() - mu @ A.T
    grad = gain * np.linalg.solve(cov, res.T).T @ A
    return (sched.sigma[i] * grad).reshape(x.shape)


def exact_guidance_score(prior, problem: InverseProblem, x, i: int, sched: NoiseSchedule) -> np.ndarray:
    """``sigma_i * grad_x log p_i(y | x_i)``."""
    _require_exact(problem)
    i = sched.check_step(i, allow_zero=False)
    if isinstance(prior, GaussianPrior):
        return _gaussian_guidance(prior, problem, x, i, sched)
    post = exact_posterior_atoms(prior, problem)
    # grad log p(y|x) = (a / v) (m_post - m_prior), m = responsibility-weighted atom mean
    a = np.sqrt(sched.alpha_bar[i])
    v = 1.0 - sched.alpha_bar[i]
    m_prior = prior.tweedie_mean(x, i, sched)
    m_post = prior.reweighted(post.log_weights).tweedie_mean(x, i, sched)
    return sched.sigma[i] * (a / v) * (m_post - m_prior)


def exact_conditional_score(prior, problem: InverseProblem, x, i: int, sched: NoiseSchedule) -> np.ndarray:
    """``grad_x log p_i(x_i | y)``."""
    _require_exact(problem)
    i = sched.check_step(i, allow_zero=False)
    if isinstance(prior, GaussianPrior):
        return prior.marginal_score(x, i, sched) + _gaussian_guidance(prior, problem, x, i, sched) / sched.sigma[i]
    post = exact_posterior_atoms(prior, problem)
    return prior.reweighted(post.log_weights).marginal_score(x, i, sched)


def log_likelihood_given_state(prior: FiniteAtomPrior, problem: InverseProblem, x, i: int, sched: NoiseSchedule) -> np.ndarray:
    """``log p_i(y | x_i)`` up to an x-independent constant (finite-atom prior)."""
    _require_exact(problem)
    xf, _ = prior._flat(x)
    logits = prior._logits(xf, i, sched)
    log_gamma = logits - _logsumexp(logits)
    return _logsumexp(log_gamma + _atom_log_lik(prior, problem))


def _logsumexp(a):
    m = np.max(a, axis=-1, keepdims=True)
    return np.squeeze(m, -1) + np.log(np.sum(np.exp(a - m), axis=-1))


def direction_accuracy(estimate, exact, batch_axes: int = 0) -> np.ndarray | float:
    """Cosine similarity; zero vs zero counts as 1, zero vs nonzero as 0."""
    a = np.asarray(estimate, dtype=np.float64)
    b = np.asarray(exact, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    axes = tuple(range(batch_axes, a.ndim))
    na = np.sqrt(np.sum(a * a, axis=axes))
    nb = np.sqrt(np.sum(b * b, axis=axes))
    d = np.sum(a * b, axis=axes)
    both_zero = (na == 0) & (nb == 0)
    one_zero = (na == 0) ^ (nb == 0)
    safe = np.where((na > 0) & (nb > 0), na * nb, 1.0)
    cos = np.where(both_zero, 1.0, np.where(one_zero, 0.0, d / safe))
    return float(cos) if np.ndim(cos) == 0 else cos


def nearest_atom(samples, atoms) -> np.ndarray:
    """Index of the closest atom for each sample; ties go to the lowest index."""
    s = np.asarray(samples, dtype=np.float64)
    atoms = np.asarray(atoms, dtype=np.float64)
    s = s.reshape(s.shape[0], -1)
    af = atoms.reshape(atoms.shape[0], -1)
    dist = np.sum((s[:, None, :] - af[None]) ** 2, axis=-1)
    return np.argmin(dist, axis=1)


def posterior_tv_distance(samples, exact: PosteriorAtoms) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] == 0:
        raise ValueError("need at least one sample")
    idx = nearest_atom(samples, exact.atoms)
    freq = np.bincount(idx, minlength=len(exact.weights)) / len(idx)
    return 0.5 * float(np.sum(np.abs(freq - exact.weights)))
