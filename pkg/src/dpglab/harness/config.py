"""Experiment configuration (one JSON document, schema via pydantic)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..guidance import GuidanceConfig
from ..numerics import RandomStream, read_dpgt
from ..operators import InverseProblem, NoiseModel, build_operator, synthesize_observation
from ..prior import FiniteAtomPrior, GaussianPrior, load_atom_prior
from ..schedule import NoiseSchedule, build_linear_schedule
from .corpus import toy_corpus

__all__ = [
    "ScheduleSpec",
    "PriorSpec",
    "OperatorSpec",
    "NoiseSpec",
    "ProblemSpec",
    "SolverSpec",
    "ExperimentConfig",
    "load_config",
    "dump_config",
    "config_schema",
]


class _Spec(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScheduleSpec(_Spec):
    n_steps: int = Field(1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return build_linear_schedule(self.n_steps, self.beta_start, self.beta_end)


class PriorSpec(_Spec):
    kind: Literal["toy_corpus", "atoms_dir", "explicit", "random_atoms", "gaussian"] = "toy_corpus"
    path: str | None = None
    n_atoms: int = Field(32, ge=1)
    image_size: int = Field(16, ge=2)
    dim: int = Field(16, ge=1)
    atoms: list[list[float]] | None = None
    weights: list[float] | None = None
    variance: float = Field(1.0, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "atoms_dir" and not self.path:
            raise ValueError("atoms_dir prior needs 'path'")
        if self.kind == "explicit" and not self.atoms:
            raise ValueError("explicit prior needs 'atoms'")
        return self

    def build(self):
        if self.kind == "toy_corpus":
            return FiniteAtomPrior(toy_corpus(self.n_atoms, self.image_size), self.weights)
        if self.kind == "atoms_dir":
            return load_atom_prior(self.path)
        if self.kind == "explicit":
            return FiniteAtomPrior(np.array(self.atoms, dtype=np.float64), self.weights)
        if self.kind == "random_atoms":
            g = RandomStream(self.seed).child("atoms").generator()
            return FiniteAtomPrior(g.standard_normal((self.n_atoms, self.dim)), self.weights)
        return GaussianPrior(np.zeros(self.dim), self.variance)


class OperatorSpec(_Spec):
    kind: Literal["identity", "inpaint", "avgpool", "gaussian_blur", "motion_blur", "nonlinear_blur", "phase_retrieval"] = "inpaint"
    keep_fraction: float = Field(0.5, gt=0, le=1)
    keep: list[int] | None = None
    factor: int = 2
    size: int = 7
    std: float = 1.5
    length: int = 9
    angle: float | None = None
    gain: float = 0.5


class NoiseSpec(_Spec):
    kind: Literal["gaussian", "poisson"] = "gaussian"
    sigma_y: float = Field(0.05, gt=0)
    lam: float = Field(1.0, gt=0)
    scale: float = Field(255.0, gt=0)

    def build(self) -> NoiseModel:
        return NoiseModel(self.kind, self.sigma_y, self.lam, self.scale)


class ProblemSpec(_Spec):
    """Where the ground truth and observation come from.

    ``path`` points at a directory written by ``make-problem``; otherwise the
    truth is prior atom ``truth_atom`` (or ``truth_path``) and ``y`` is either
    given explicitly or synthesised with stream ``seed``.
    """

    path: str | None = None
    truth_atom: int | None = 0
    truth_path: str | None = None
    y: list[float] | None = None
    seed: int = 0


class SolverSpec(_Spec):
    kind: Literal["ddpm", "ddim"] = "ddpm"
    steps: int | None = None


class ExperimentConfig(_Spec):
    schedule: ScheduleSpec = ScheduleSpec()
    prior: PriorSpec = PriorSpec()
    operator: OperatorSpec = OperatorSpec()
    noise: NoiseSpec = NoiseSpec()
    problem: ProblemSpec = ProblemSpec()
    guidance: GuidanceConfig = GuidanceConfig()
    solver: SolverSpec = SolverSpec()
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    n_chains: int = Field(1, ge=1)
    record_oracle: bool = False
    output_dir: str = "runs/out"

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if any(s < 0 for s in v):
            raise ValueError("seeds must be non-negative")
        return v

    @model_validator(mode="after")
    def _files_exist(self):
        for label, p in (
            ("prior.path", self.prior.path if self.prior.kind == "atoms_dir" else None),
            ("problem.path", self.problem.path),
            ("problem.truth_path", self.problem.truth_path),
        ):
            if p is not None and not Path(p).exists():
                raise ValueError(f"{label} does not exist: {p}")
        return self

    # -- construction helpers ------------------------------------------------

    def build_problem(self, prior) -> tuple[InverseProblem, np.ndarray | None]:
        """Return the inverse problem and (when known) the ground truth."""
        if self.problem.path:
            from .experiments import load_problem

            return load_problem(self.problem.path)
        stream = RandomStream(self.problem.seed)
        op_spec = self.operator.model_dump(exclude_none=True)
        op = build_operator(op_spec, prior.shape, stream.child("operator"))
        noise = self.noise.build()
        truth = None
        if self.problem.truth_path:
            truth = read_dpgt(self.problem.truth_path)
        elif self.problem.truth_atom is not None and isinstance(prior, FiniteAtomPrior):
            truth = prior.atoms[self.problem.truth_atom]
        elif isinstance(prior, GaussianPrior):
            truth = stream.child("truth").generator().standard_normal(prior.shape) * np.sqrt(prior.variance)
        if self.problem.y is not None:
            y = np.asarray(self.problem.y, dtype=np.float64).reshape(op.out_shape)
            return InverseProblem(op, noise, y), truth
        if truth is None:
            raise ValueError("cannot synthesise y without a ground truth")
        return synthesize_observation(op, noise, truth, stream.child("observation")), truth


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.model_validate_json(Path(path).read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()
