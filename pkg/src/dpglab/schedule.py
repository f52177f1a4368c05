"""Discrete variance-preserving noise schedule and the forward noising map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RandomStream, draw_normal

__all__ = ["NoiseSchedule", "build_linear_schedule", "diffuse_sample"]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Coefficients for steps ``1..N``; index 0 of each array is step 0.

    ``beta[0]`` and ``alpha[0]`` are unused placeholders (0 and 1) so that
    every array can be indexed by the step number directly.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.beta) - 1

    def check_step(self, i: int, *, allow_zero: bool = True) -> int:
        i = int(i)
        lo = 0 if allow_zero else 1
        if not lo <= i <= self.n_steps:
            raise IndexError(f"step {i} outside [{lo}, {self.n_steps}]")
        return i


def build_linear_schedule(n_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if n_steps == 1:
        betas = np.array([beta_start])
    else:
        betas = np.linspace(beta_start, beta_end, n_steps)
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(1.0 - alpha_bar)
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def diffuse_sample(x0, i: int, sched: NoiseSchedule, stream: RandomStream) -> np.ndarray:
    """Draw ``x_i ~ N(sqrt(abar_i) x0, (1 - abar_i) I)``."""
    i = sched.check_step(i)
    x0 = np.asarray(x0, dtype=np.float64)
    if i == 0:
        return x0.copy()
    z = draw_normal(stream, x0.shape)
    return np.sqrt(sched.alpha_bar[i]) * x0 + sched.sigma[i] * z
