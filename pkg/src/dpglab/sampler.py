"""Guided DDPM / DDIM reverse processes.

Solver steps consume a noise prediction ``eps`` (``eps = -sigma_i * score``).
Guidance is formed in the score-scaled convention ``sigma_i * grad log p`` and
converted back, so the conditional prediction is ``eps - B * s_hat`` where
``s_hat`` points toward higher observation likelihood.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import oracle
from .guidance import GuidanceConfig, dpg_score, dps_score, rescale_batch
from .numerics import RandomStream
from .operators import InverseProblem
from .prior import ScoreModel
from .schedule import NoiseSchedule

__all__ = [
    "SamplerTrace",
    "ddpm_step",
    "ddim_step",
    "ddim_timesteps",
    "guided_epsilon",
    "solve_inverse",
    "TRACE_HEADER",
]

TRACE_HEADER = ("step", "i", "r_i", "recon_l2", "s_tilde_norm", "cos_oracle")


@dataclass
class SamplerTrace:
    """Per-visited-step diagnostics, averaged over chains when batched."""

    rows: list[tuple] = field(default_factory=list)
    x0: np.ndarray | None = None
    wall_time: float = 0.0
    recon_by_chain: dict[int, np.ndarray] = field(default_factory=dict)

    def record(self, i: int, r, recon, s_norm, cos=None) -> None:
        step = len(self.rows)
        if self.rows and i >= self.rows[-1][1]:
            raise ValueError("trace steps must strictly decrease")
        self.rows.append(
            (
                step,
                int(i),
                float(np.mean(r)),
                float(np.mean(recon)),
                float(np.mean(s_norm)),
                None if cos is None else float(np.mean(cos)),
            )
        )

    def column(self, name: str) -> np.ndarray:
        j = TRACE_HEADER.index(name)
        return np.array([np.nan if row[j] is None else row[j] for row in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for row in self.rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
        return buf.getvalue()


def ddpm_step(x, eps, i: int, sched: NoiseSchedule, stream: RandomStream | None = None) -> np.ndarray:
    """Ancestral step ``x_i -> x_{i-1}``; no noise is added at ``i = 1``."""
    i = sched.check_step(i, allow_zero=False)
    x = np.asarray(x, dtype=np.float64)
    mean = (x - (sched.beta[i] / sched.sigma[i]) * np.asarray(eps, float)) / np.sqrt(sched.alpha[i])
    if i == 1 or stream is None:
        return mean
    z = stream.child("ddpm", i).generator().standard_normal(x.shape)
    return mean + np.sqrt(sched.beta[i]) * z


def ddim_step(x, eps, i: int, i_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) jump from step ``i`` to ``i_prev < i``."""
    i = sched.check_step(i, allow_zero=False)
    i_prev = sched.check_step(i_prev)
    if not i_prev < i:
        raise ValueError(f"need i_prev < i, got {i_prev} >= {i}")
    ab, ab_prev = sched.alpha_bar[i], sched.alpha_bar[i_prev]
    coef = np.sqrt(ab_prev) * (np.sqrt((1 - ab_prev) / ab_prev) - np.sqrt((1 - ab) / ab))
    return np.sqrt(ab_prev / ab) * np.asarray(x, float) + coef * np.asarray(eps, float)


def ddim_timesteps(n_steps: int, n_visit: int) -> list[int]:
    """Uniform decreasing subsequence of ``1..n_steps`` with ``n_visit`` entries."""
    if not 1 <= n_visit <= n_steps:
        raise ValueError("need 1 <= n_visit <= n_steps")
    steps = np.round(np.linspace(n_steps, 1, n_visit)).astype(int)
    return sorted(set(steps.tolist()), reverse=True)


def _chain_norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a.reshape(a.shape[0], -1) ** 2, axis=1))


def guided_epsilon(
    model: ScoreModel,
    problem: InverseProblem,
    x: np.ndarray,
    i: int,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    stream: RandomStream,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Conditional noise prediction for a batch ``x``.

    Returns ``(eps_cond, s_tilde, r)``; ``r`` is the surrogate width for DPG
    and the residual std otherwise (diagnostics only).
    """
    eps = model.epsilon(x, i, sched)
    if cfg.estimator == "oracle":
        g = oracle.exact_guidance_score(model, problem, x, i, sched)
        mu = model.tweedie_mean(x, i, sched)
        r = np.sqrt(np.sum((problem.y - problem.forward(mu)).reshape(len(x), -1) ** 2, axis=1) / problem.dim)
        return eps - g, g, r
    if cfg.estimator == "dpg":
        s_tilde, state = dpg_score(model, problem, x, i, sched, cfg, stream)
        r = state.r
    else:
        s_tilde = dps_score(model, problem, x, i, sched)
        mu = model.tweedie_mean(x, i, sched)
        r = np.sqrt(np.sum((problem.y - problem.forward(mu)).reshape(len(x), -1) ** 2, axis=1) / problem.dim)
    # score-scaled combine: sigma*grad log p(x|y) ~ -eps + B * s_hat
    return eps - rescale_batch(s_tilde, cfg), s_tilde, r


def solve_inverse(
    model: ScoreModel,
    problem: InverseProblem,
    cfg: GuidanceConfig,
    sched: NoiseSchedule,
    *,
    solver: Literal["ddpm", "ddim"] = "ddpm",
    steps: int | Sequence[int] | None = None,
    seed: int = 0,
    n_chains: int = 1,
    with_oracle: bool = False,
) -> tuple[np.ndarray, SamplerTrace]:
    """Run guided posterior sampling for ``n_chains`` independent chains.

    The random path is keyed by ``(seed, step)``; all chains of one call draw
    their noise as one block, so results depend on ``seed`` and ``n_chains``
    only. Returns the final samples with shape ``(n_chains, *x_shape)``.
    """
    t0 = time.perf_counter()
    stream = RandomStream(seed)
    shape = (n_chains,) + tuple(problem.x_shape)
    N = sched.n_steps
    if solver == "ddpm":
        if steps is not None and steps != N:
            raise ValueError("ddpm visits every step; use ddim for subsequences")
        visit = list(range(N, 0, -1))
    elif solver == "ddim":
        if steps is None:
            steps = min(200, N)
        visit = ddim_timesteps(N, steps) if isinstance(steps, int) else sorted(set(int(s) for s in steps), reverse=True)
    else:
        raise ValueError(f"unknown solver {solver!r}")

    x = stream.child("init").generator().standard_normal(shape)
    trace = SamplerTrace()
    for k, i in enumerate(visit):
        eps_c, s_tilde, r = guided_epsilon(model, problem, x, i, sched, cfg, stream)
        mu = model.tweedie_mean(x, i, sched)
        recon = problem.residual_l2(mu)
        trace.recon_by_chain[i] = recon
        cos = None
        if with_oracle:
            exact = oracle.exact_guidance_score(model, problem, x, i, sched)
            cos = oracle.direction_accuracy(s_tilde, exact, batch_axes=1)
        trace.record(i, r, recon, _chain_norm(s_tilde), cos)
        if solver == "ddpm":
            x = ddpm_step(x, eps_c, i, sched, stream)
        else:
            i_prev = visit[k + 1] if k + 1 < len(visit) else 0
            x = ddim_step(x, eps_c, i, i_prev, sched)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state after step {i}")
    trace.x0 = x
    trace.wall_time = time.perf_counter() - t0
    return x, trace
