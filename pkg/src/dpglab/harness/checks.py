"""Invariant suite over the closed forms (``oracle-check``)."""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import oracle
from ..guidance import GuidanceConfig, conditional_weights, loo_baselines
from ..numerics import RandomStream, read_dpgt, write_dpgt
from ..operators import InverseProblem, NoiseModel, build_operator
from ..prior import FiniteAtomPrior, GaussianPrior, fd_vjp
from ..schedule import build_linear_schedule
from .config import ExperimentConfig, dump_config

__all__ = ["CheckResult", "run_checks"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tolerance)

    def as_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "tolerance": self.tolerance, "passed": self.passed}


def _rel(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def _adjoint_checks(g) -> list[CheckResult]:
    out = []
    specs = [
        {"kind": "identity"},
        {"kind": "inpaint", "keep_fraction": 0.5},
        {"kind": "avgpool", "factor": 2},
        {"kind": "gaussian_blur", "size": 5, "std": 1.2},
        {"kind": "motion_blur", "length": 5, "angle": 0.7},
    ]
    for spec in specs:
        op = build_operator(spec, (1, 8, 8), RandomStream(1).child("op"))
        x = g.standard_normal(op.in_shape)
        v = g.standard_normal(op.out_shape)
        lhs = float(np.sum(op.apply(x) * v))
        rhs = float(np.sum(x * op.adjoint(v)))
        out.append(CheckResult(f"adjoint/{spec['kind']}", abs(lhs - rhs) / max(1.0, abs(lhs)), 1e-10))
    return out


def _vjp_checks(g, sched) -> list[CheckResult]:
    out = []
    for spec in ({"kind": "nonlinear_blur", "size": 5, "std": 1.2, "gain": 0.5}, {"kind": "phase_retrieval"}):
        op = build_operator(spec, (1, 6, 6))
        x = g.standard_normal(op.in_shape)
        v = g.standard_normal(op.out_shape)
        out.append(CheckResult(f"vjp/{spec['kind']}", _rel(op.vjp(x, v), op.fd_vjp(x, v, h=1e-5)), 1e-5))
    prior = FiniteAtomPrior(g.standard_normal((5, 4)), g.uniform(0.5, 1.5, 5))
    x = g.standard_normal(4)
    v = g.standard_normal(4)
    i = 400
    fd = fd_vjp(lambda z: prior.tweedie_mean(z, i, sched), x, v, h=1e-5)
    out.append(CheckResult("vjp/tweedie_finite_atom", _rel(prior.tweedie_vjp(x, i, sched, v), fd), 1e-5))
    gp = GaussianPrior(g.standard_normal(4), 0.7)
    fd = fd_vjp(lambda z: gp.tweedie_mean(z, i, sched), x, v, h=1e-5)
    out.append(CheckResult("vjp/tweedie_gaussian", _rel(gp.tweedie_vjp(x, i, sched, v), fd), 1e-5))
    return out


def _tweedie_checks(g, sched) -> list[CheckResult]:
    out = []
    priors = {
        "finite_atom": FiniteAtomPrior(g.standard_normal((6, 3)), g.uniform(0.5, 1.5, 6)),
        "gaussian": GaussianPrior(g.standard_normal(3), 1.3),
    }
    for name, prior in priors.items():
        worst = 0.0
        for i in (1, 10, 250, 700, 1000):
            x = g.standard_normal((4, 3))
            ab = sched.alpha_bar[i]
            via_score = (x + (1 - ab) * prior.marginal_score(x, i, sched)) / np.sqrt(ab)
            worst = max(worst, _rel(prior.tweedie_mean(x, i, sched), via_score))
        out.append(CheckResult(f"tweedie_score/{name}", worst, 1e-10))
        x = g.standard_normal(3)
        fd = np.array([(prior.log_density(x + e, 300, sched) - prior.log_density(x - e, 300, sched)) / 2e-5 for e in 1e-5 * np.eye(3)])
        out.append(CheckResult(f"score_fd/{name}", _rel(prior.marginal_score(x, 300, sched), fd), 1e-6))
    return out


def _baseline_checks(g) -> list[CheckResult]:
    costs = conditional_weights(g.exponential(size=(3, 64)), np.array([0.5, 1.0, 2.0]))
    total = np.abs(np.sum(costs - loo_baselines(costs), axis=-1)).max()
    return [CheckResult("loo_baseline_sum", float(total), 1e-12)]


def _schedule_checks(sched) -> list[CheckResult]:
    ab = sched.alpha_bar[1:]
    viol = max(0.0, float(np.max(np.diff(ab)))) + max(0.0, float(np.max(-np.diff(sched.beta[1:]))))
    bounds = float(np.any((ab <= 0) | (ab >= 1)))
    return [CheckResult("schedule_monotone", viol + bounds, 0.0)]


def _oracle_checks(g, sched) -> list[CheckResult]:
    out = []
    prior = FiniteAtomPrior(g.standard_normal((6, 4)), g.uniform(0.5, 1.5, 6))
    op = build_operator({"kind": "inpaint", "keep": [0, 2]}, (4,))
    problem = InverseProblem(op, NoiseModel("gaussian", 0.4), g.standard_normal(2))
    worst = 0.0
    for i in (50, 300, 800):
        x = g.standard_normal((3, 4))
        lhs = oracle.exact_conditional_score(prior, problem, x, i, sched)
        rhs = prior.marginal_score(x, i, sched) + oracle.exact_guidance_score(prior, problem, x, i, sched) / sched.sigma[i]
        worst = max(worst, _rel(lhs, rhs))
    out.append(CheckResult("oracle_decomposition", worst, 1e-12))
    x = g.standard_normal(4)
    i = 300
    ll = lambda z: oracle.log_likelihood_given_state(prior, problem, z, i, sched)  # noqa: E731
    fd = np.array([(ll(x + e) - ll(x - e)) / 2e-5 for e in 1e-5 * np.eye(4)])
    out.append(CheckResult("oracle_guidance_fd", _rel(oracle.exact_guidance_score(prior, problem, x, i, sched), sched.sigma[i] * fd), 1e-6))
    post = oracle.exact_posterior_atoms(prior, problem)
    out.append(CheckResult("posterior_weights_normalised", abs(float(post.weights.sum()) - 1.0), 1e-12))
    return out


def _roundtrip_checks(g) -> list[CheckResult]:
    cfg = ExperimentConfig(seeds=[3, 1], guidance=GuidanceConfig(n_mc=64, z_mode="per_pixel"))
    text = dump_config(cfg)
    back = ExperimentConfig.model_validate_json(text)
    cfg_bad = float(back != cfg or dump_config(back) != text)
    x = g.standard_normal((2, 3, 5))
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "t.dpgt"
        write_dpgt(p, x)
        raw = p.read_bytes()
        y = read_dpgt(p)
        write_dpgt(p, y)
        tensor_bad = float(not np.array_equal(x, y) or p.read_bytes() != raw)
    return [CheckResult("config_roundtrip", cfg_bad, 0.0), CheckResult("tensor_roundtrip", tensor_bad, 0.0)]


def run_checks(seed: int = 0) -> list[CheckResult]:
    g = RandomStream(seed).child("checks").generator()
    sched = build_linear_schedule()
    results = []
    results += _adjoint_checks(g)
    results += _tweedie_checks(g, sched)
    results += _vjp_checks(g, sched)
    results += _baseline_checks(g)
    results += _schedule_checks(sched)
    results += _oracle_checks(g, sched)
    results += _roundtrip_checks(g)
    return results
