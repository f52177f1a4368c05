"""Guidance estimators for posterior sampling.

``dpg_score`` is the Monte Carlo policy-gradient estimate of the direction of
``grad_x log p_i(y | x_i)``: clean samples are drawn from a Gaussian surrogate
``N(mu_i, r_i^2 I)`` around the Tweedie mean, weighted by the observation
likelihood, centred with leave-one-out baselines and pulled back through the
Tweedie Jacobian. ``dps_score`` is the plug-in gradient of the reconstruction
loss at the Tweedie mean.

All functions accept a batch of states ``x`` with shape ``(B, *x_shape)`` or
a single unbatched state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .numerics import RandomStream
from .operators import InverseProblem
from .prior import ScoreModel
from .schedule import NoiseSchedule

__all__ = [
    "GuidanceConfig",
    "GuidanceStepState",
    "residual_std",
    "adaptive_z",
    "conditional_weights",
    "loo_baselines",
    "dpg_score",
    "dps_score",
    "rescale_and_combine",
]


class GuidanceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    estimator: Literal["dpg", "dps", "oracle"] = "dpg"
    n_mc: int = Field(500, ge=1)
    guidance_norm: float = Field(3.0, ge=0.0, description="B; calibrated at desk scale, not a published value")
    rescale_convention: Literal["unit_norm", "literal_sq_norm"] = "unit_norm"
    z_mode: Literal["sum", "per_pixel", "likelihood"] = "sum"
    r_floor: float = Field(1e-4, gt=0.0)
    r_override: float | None = Field(None, gt=0.0, description="force r_i (diagnostics only)")
    baseline: Literal["loo", "none"] = "loo"

    @model_validator(mode="after")
    def _check(self):
        if self.estimator == "dpg" and self.n_mc < 2:
            raise ValueError("dpg needs n_mc >= 2 for leave-one-out baselines")
        return self


@dataclass
class GuidanceStepState:
    """Per-step diagnostics; leading axis is the batch of chains."""

    mu: np.ndarray
    r: np.ndarray
    z: np.ndarray
    costs: np.ndarray
    baselines: np.ndarray
    s_tilde: np.ndarray
    s_combined: np.ndarray | None = None


def _batched(x, shape) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == tuple(shape):
        return x[None], True
    return x, False


def _sq_residual(problem: InverseProblem, mu: np.ndarray) -> np.ndarray:
    res = problem.y - problem.operator.apply(mu)
    return np.sum(res.reshape(res.shape[: res.ndim - problem.y.ndim] + (-1,)) ** 2, axis=-1)


def residual_std(problem: InverseProblem, mu, r_floor: float = 1e-4) -> np.ndarray | float:
    """``max(r_floor, sqrt(||y - A(mu)||^2 / (C*H*W)))``."""
    r = np.maximum(r_floor, np.sqrt(_sq_residual(problem, np.asarray(mu, float)) / problem.dim))
    return float(r) if np.ndim(r) == 0 else r


def adaptive_z(problem: InverseProblem, mu, z_mode: str = "sum", r_floor: float = 1e-4) -> np.ndarray | float:
    """Per-step likelihood temperature ``Z_i``."""
    mu = np.asarray(mu, float)
    if problem.noise.kind == "poisson":
        z = problem.noise.loss(problem.y, problem.operator.apply(mu))
    elif z_mode == "sum":
        z = _sq_residual(problem, mu)
    elif z_mode == "per_pixel":
        z = _sq_residual(problem, mu) / problem.dim
    elif z_mode == "likelihood":
        # the actual Gaussian observation likelihood, fixed across steps
        z = np.full(np.shape(_sq_residual(problem, mu)), 2.0 * problem.noise.sigma_y**2)
    else:
        raise ValueError(f"unknown z_mode {z_mode!r}")
    z = np.maximum(z, r_floor**2)
    return float(z) if np.ndim(z) == 0 else z


def conditional_weights(losses, z) -> np.ndarray:
    """``exp(-(l_m - min_j l_j) / Z)`` along the last axis."""
    losses = np.asarray(losses, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)[..., None]
    shifted = losses - losses.min(axis=-1, keepdims=True)
    return np.exp(-shifted / z)


def loo_baselines(costs) -> np.ndarray:
    costs = np.asarray(costs, dtype=np.float64)
    n = costs.shape[-1]
    if n < 2:
        raise ValueError("leave-one-out baselines need at least two samples")
    return (costs.sum(axis=-1, keepdims=True) - costs) / (n - 1)


def dpg_score(
    model: ScoreModel,
    problem: InverseProblem,
    x,
    i: int,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    stream: RandomStream,
) -> tuple[np.ndarray, GuidanceStepState]:
    """Policy-gradient guidance direction ``s_tilde`` at step ``i``.

    Uses one vector-Jacobian product on ``sum_m (c_m - b_m) xi_m``, which is
    the same quantity as averaging the per-sample gradients of
    ``||x0_m - mu||^2`` because that gradient is ``-2 r J^T xi_m``.
    Noise directions come from ``stream.child("mc", i)``.
    """
    xb, single = _batched(x, problem.x_shape)
    n_batch = xb.shape[0]
    n_mc = cfg.n_mc
    mu = model.tweedie_mean(xb, i, sched)
    if cfg.r_override is not None:
        r = np.full(n_batch, float(cfg.r_override))
    else:
        r = residual_std(problem, mu, cfg.r_floor)
        r = np.atleast_1d(r)
    z = np.atleast_1d(adaptive_z(problem, mu, cfg.z_mode, cfg.r_floor))

    xi = stream.child("mc", i).generator().standard_normal((n_batch, n_mc) + tuple(problem.x_shape))
    rb = r.reshape((n_batch, 1) + (1,) * len(problem.x_shape))
    samples = mu[:, None] + rb * xi
    losses = problem.loss(samples)
    costs = conditional_weights(losses, z)
    if not np.all(np.isfinite(costs)):
        b, m = np.argwhere(~np.isfinite(costs))[0]
        raise FloatingPointError(f"non-finite cost at chain {b}, sample {m}, step {i}")
    if cfg.baseline == "loo":
        baselines = loo_baselines(costs)
    else:
        baselines = np.zeros_like(costs)
    centred = costs - baselines
    # fixed-order reduction over samples keeps the result schedule independent
    direction = np.einsum("bm,bm...->b...", centred, xi)
    scale = 1.0 / (r * n_mc)
    s_tilde = scale.reshape((n_batch,) + (1,) * len(problem.x_shape)) * model.tweedie_vjp(xb, i, sched, direction)
    state = GuidanceStepState(mu=mu, r=r, z=z, costs=costs, baselines=baselines, s_tilde=s_tilde)
    if single:
        return s_tilde[0], state
    return s_tilde, state


def dps_score(model: ScoreModel, problem: InverseProblem, x, i: int, sched: NoiseSchedule) -> np.ndarray:
    """``-grad_x l_y(A(mu_i(x)))`` through the Tweedie mean."""
    x = np.asarray(x, dtype=np.float64)
    mu = model.tweedie_mean(x, i, sched)
    g_out = problem.noise.loss_grad(problem.y, problem.operator.apply(mu))
    g_mu = problem.operator.vjp(mu, g_out)
    return -model.tweedie_vjp(x, i, sched, g_mu)


def rescale_and_combine(base, s_tilde, cfg: GuidanceConfig) -> np.ndarray:
    """``base + B * s_tilde / ||s_tilde||`` (or ``/ ||s_tilde||^2`` for the literal convention).

    For a single state; a zero direction leaves ``base`` unchanged. Batches of
    chains go through :func:`rescale_batch`.
    """
    base = np.asarray(base, dtype=np.float64)
    s_tilde = np.asarray(s_tilde, dtype=np.float64)
    if base.shape != s_tilde.shape:
        raise ValueError(f"shape mismatch: {base.shape} vs {s_tilde.shape}")
    return base + cfg.guidance_norm * _normalise(s_tilde, cfg.rescale_convention)


def _normalise(s: np.ndarray, convention: str, batch_axes: int | None = None) -> np.ndarray:
    if batch_axes is None:
        batch_axes = 0
    axes = tuple(range(batch_axes, s.ndim))
    sq = np.sum(s * s, axis=axes, keepdims=True)
    denom = np.sqrt(sq) if convention == "unit_norm" else sq
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, s / safe, 0.0)


def rescale_batch(s_tilde: np.ndarray, cfg: GuidanceConfig) -> np.ndarray:
    """Per-chain ``B * s_tilde / ||s_tilde||`` for a ``(B, *x_shape)`` batch."""
    return cfg.guidance_norm * _normalise(np.asarray(s_tilde, float), cfg.rescale_convention, batch_axes=1)
