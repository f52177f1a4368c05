"""Analytic score models.

Both priors expose the same methods so the guidance and sampler code never
needs to know which one it holds. Every method accepts states with arbitrary
leading batch axes in front of ``prior.shape``.

Conventions: ``epsilon = -sigma_i * score`` and the Tweedie mean is
``(x_i + (1 - abar_i) * score) / sqrt(abar_i)`` which equals ``E[x0 | x_i]``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Protocol

import numpy as np

from .numerics import read_dpgt
from .schedule import NoiseSchedule

__all__ = [
    "ScoreModel",
    "FiniteAtomPrior",
    "GaussianPrior",
    "load_atom_prior",
    "fd_vjp",
]


def _coeffs(sched: NoiseSchedule, i: int) -> tuple[float, float]:
    i = sched.check_step(i)
    return float(np.sqrt(sched.alpha_bar[i])), float(1.0 - sched.alpha_bar[i])


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


class ScoreModel(Protocol):
    shape: tuple[int, ...]

    def marginal_score(self, x, i: int, sched: NoiseSchedule) -> np.ndarray: ...

    def epsilon(self, x, i: int, sched: NoiseSchedule) -> np.ndarray: ...

    def tweedie_mean(self, x, i: int, sched: NoiseSchedule) -> np.ndarray: ...

    def tweedie_vjp(self, x, i: int, sched: NoiseSchedule, v) -> np.ndarray: ...


class _ScoreMixin:
    shape: tuple[int, ...]

    def _flat(self, x) -> tuple[np.ndarray, tuple[int, ...]]:
        x = np.asarray(x, dtype=np.float64)
        n = len(self.shape)
        if x.shape[x.ndim - n :] != self.shape:
            raise ValueError(f"state shape {x.shape} does not end with {self.shape}")
        batch = x.shape[: x.ndim - n]
        return x.reshape(batch + (-1,)), batch

    def epsilon(self, x, i: int, sched: NoiseSchedule) -> np.ndarray:
        i = sched.check_step(i, allow_zero=False)
        return -sched.sigma[i] * self.marginal_score(x, i, sched)


class FiniteAtomPrior(_ScoreMixin):
    """Empirical prior: a weighted set of clean signals (atoms).

    The noisy marginal at step ``i`` is the Gaussian mixture
    ``sum_k w_k N(sqrt(abar_i) x_k, (1 - abar_i) I)``, so scores, posterior
    means and their Jacobians are all available in closed form.
    """

    def __init__(self, atoms, weights=None, *, log_weights=None):
        atoms = np.asarray(atoms, dtype=np.float64)
        if atoms.ndim < 2:
            raise ValueError("atoms must be stacked along a leading axis")
        k = atoms.shape[0]
        if log_weights is not None:
            log_w = np.asarray(log_weights, dtype=np.float64)
            if log_w.shape != (k,) or not np.all(np.isfinite(log_w)):
                raise ValueError("need one finite log-weight per atom")
            log_w = log_w - _logsumexp(log_w)
        else:
            if weights is None:
                weights = np.full(k, 1.0 / k)
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != (k,) or np.any(weights <= 0):
                raise ValueError("need one positive weight per atom")
            log_w = np.log(weights / weights.sum())
        self.atoms = atoms
        self.weights = np.exp(log_w)
        self.shape = atoms.shape[1:]
        self._flat_atoms = atoms.reshape(k, -1)
        self._log_w = log_w

    def __len__(self) -> int:
        return len(self.weights)

    def _logits(self, xf: np.ndarray, i: int, sched: NoiseSchedule) -> np.ndarray:
        a, v = _coeffs(sched, i)
        # ||x - a x_k||^2 expanded; the ||x||^2 term is common to all k and dropped
        cross = xf @ self._flat_atoms.T
        sq = np.sum(self._flat_atoms**2, axis=1)
        return self._log_w + (a * cross - 0.5 * a * a * sq) / v

    def responsibilities(self, x, i: int, sched: NoiseSchedule) -> np.ndarray:
        """Posterior probabilities of each atom given the noisy state."""
        xf, batch = self._flat(x)
        i = sched.check_step(i)
        if i == 0:
            dist = np.sum((xf[..., None, :] - self._flat_atoms) ** 2, axis=-1)
            hit = dist == 0.0
            if not np.all(hit.any(axis=-1)):
                raise ValueError("responsibilities at step 0 are undefined off the atoms")
            gamma = hit * np.exp(self._log_w - self._log_w.max())
            return gamma / gamma.sum(axis=-1, keepdims=True)
        return _softmax(self._logits(xf, i, sched))

    def _mean_flat(self, xf, i, sched):
        gamma = _softmax(self._logits(xf, i, sched))
        return gamma, gamma @ self._flat_atoms

    def log_density(self, x, i: int, sched: NoiseSchedule) -> np.ndarray:
        """log p_i(x) of the noisy marginal (used by finite-difference checks)."""
        xf, _ = self._flat(x)
        i = sched.check_step(i, allow_zero=False)
        a, v = _coeffs(sched, i)
        d = xf.shape[-1]
        sq = np.sum((xf[..., None, :] - a * self._flat_atoms) ** 2, axis=-1)
        return _logsumexp(self._log_w - sq / (2 * v)) - 0.5 * d * np.log(2 * np.pi * v)

    def marginal_score(self, x, i: int, sched: NoiseSchedule) -> np.ndarray:
        xf, batch = self._flat(x)
        i = sched.check_step(i, allow_zero=False)
        a, v = _coeffs(sched, i)
        _, m = self._mean_flat(xf, i, sched)
        return ((a * m - xf) / v).reshape(batch + self.shape)

    def tweedie_mean(self, x, i: int, sched: NoiseSchedule) -> np.ndarray:
        xf, batch = self._flat(x)
        i = sched.check_step(i, allow_zero=False)
        _, m = self._mean_flat(xf, i, sched)
        return m.reshape(batch + self.shape)

    def tweedie_vjp(self, x, i: int, sched: NoiseSchedule, v) -> np.ndarray:
        """``v^T dmu/dx`` using ``dmu/dx = sqrt(abar)/(1-abar) * Cov_gamma[x0]``."""
        xf, batch = self._flat(x)
        vf, _ = self._flat(np.broadcast_to(v, np.shape(x)))
        i = sched.check_step(i, allow_zero=False)
        a, var = _coeffs(sched, i)
        gamma, m = self._mean_flat(xf, i, sched)
        # Cov v = sum_k g_k (x_k - m) ((x_k - m) . v); the centred form avoids the
        # cancellation of X^T (g * X v) - m (m . v) when gamma is nearly one-hot
        diff = self._flat_atoms - m[..., None, :]
        proj = np.einsum("...kd,...d->...k", diff, vf)
        cov_v = np.einsum("...k,...kd->...d", gamma * proj, diff)
        return ((a / var) * cov_v).reshape(batch + self.shape)

    @property
    def log_weights(self) -> np.ndarray:
        return self._log_w

    def reweighted(self, log_weights) -> "FiniteAtomPrior":
        """Same atoms with new (unnormalised) log-masses."""
        return FiniteAtomPrior(self.atoms, log_weights=log_weights)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.atoms[idx], idx


class GaussianPrior(_ScoreMixin):
    """Isotropic Gaussian prior ``N(mean, variance I)``."""

    def __init__(self, mean, variance: float = 1.0):
        if variance <= 0:
            raise ValueError("variance must be positive")
        self.mean = np.asarray(mean, dtype=np.float64)
        self.variance = float(variance)
        self.shape = self.mean.shape

    def _gain(self, i, sched) -> tuple[float, float, float]:
        a, v = _coeffs(sched, i)
        c = a * a * self.variance + v
        return a, v, c

    def log_density(self, x, i: int, sched: NoiseSchedule) -> np.ndarray:
        xf, _ = self._flat(x)
        a, _, c = self._gain(sched.check_step(i), sched)
        d = xf.shape[-1]
        r = xf - a * self.mean.ravel()
        return -np.sum(r * r, axis=-1) / (2 * c) - 0.5 * d * np.log(2 * np.pi * c)

    def marginal_score(self, x, i: int, sched: NoiseSchedule) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._flat(x)
        a, _, c = self._gain(sched.check_step(i), sched)
        return -(x - a * self.mean) / c

    def tweedie_mean(self, x, i: int, sched: NoiseSchedule) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._flat(x)
        a, _, c = self._gain(sched.check_step(i), sched)
        return self.mean + (a * self.variance / c) * (x - a * self.mean)

    def posterior_variance(self, i: int, sched: NoiseSchedule) -> float:
        """Per-coordinate variance of ``x0 | x_i``."""
        a, v, c = self._gain(sched.check_step(i), sched)
        return self.variance * v / c

    def tweedie_vjp(self, x, i: int, sched: NoiseSchedule, v) -> np.ndarray:
        self._flat(x)
        a, _, c = self._gain(sched.check_step(i), sched)
        return (a * self.variance / c) * np.broadcast_to(np.asarray(v, dtype=np.float64), np.shape(x))


def fd_vjp(fn, x, v, h: float | None = None) -> np.ndarray:
    """Central finite-difference ``v^T d fn / dx`` for a single (unbatched) x.

    The default step scales with the state: ``h = 1e-4 * (1 + max|x|)``.
    """
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if h is None:
        h = 1e-4 * (1.0 + float(np.max(np.abs(x))) if x.size else 1.0)
    out = np.zeros(x.size)
    flat = x.ravel()
    for j in range(flat.size):
        e = np.zeros_like(flat)
        e[j] = h
        fp = np.asarray(fn((flat + e).reshape(x.shape)))
        fm = np.asarray(fn((flat - e).reshape(x.shape)))
        out[j] = np.sum(v * (fp - fm)) / (2 * h)
    return out.reshape(x.shape)


def load_atom_prior(directory) -> FiniteAtomPrior:
    """Load ``*.dpgt`` atoms (sorted by file name) plus an optional ``weights.txt``."""
    directory = Path(directory)
    files = sorted(directory.glob("*.dpgt"))
    if not files:
        raise FileNotFoundError(f"no .dpgt atoms in {directory}")
    atoms = np.stack([read_dpgt(f) for f in files])
    wfile = directory / "weights.txt"
    weights = None
    if wfile.exists():
        weights = [float(line) for line in wfile.read_text().split()]
    return FiniteAtomPrior(atoms, weights)
