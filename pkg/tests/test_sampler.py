import numpy as np
import pytest

from dpglab import oracle
from dpglab.guidance import GuidanceConfig
from dpglab.numerics import RandomStream
from dpglab.operators import Identity, Inpaint, InverseProblem, NoiseModel, synthesize_observation
from dpglab.prior import FiniteAtomPrior, GaussianPrior
from dpglab.sampler import TRACE_HEADER, SamplerTrace, ddim_step, ddim_timesteps, ddpm_step, solve_inverse

from conftest import one_step_schedule

TWO_ATOMS = FiniteAtomPrior(np.array([[-1.0], [1.0]]), [0.7, 0.3])


def two_atom_problem():
    return InverseProblem(Identity((1,)), NoiseModel(sigma_y=0.5), np.array([0.2]))


def test_ddpm_pure_rescale():
    s = one_step_schedule(0.98)
    x = np.array([1.0, -2.0])
    out = ddpm_step(x, np.zeros(2), 1, s, RandomStream(0))
    assert np.allclose(out, x / np.sqrt(0.98), rtol=1e-15)
    assert out[0] == pytest.approx(1.01015, abs=1e-5)


def test_ddpm_noise_only(sched):
    stream = RandomStream(4)
    out = ddpm_step(np.zeros(3), np.zeros(3), 500, sched, stream)
    z = stream.child("ddpm", 500).generator().standard_normal(3)
    assert np.allclose(out, np.sqrt(sched.beta[500]) * z, rtol=1e-15)
    assert np.array_equal(out, ddpm_step(np.zeros(3), np.zeros(3), 500, sched, RandomStream(4)))


def test_ddpm_denoises_single_atom_exactly(sched):
    # with the exact epsilon of a one-atom prior, the last step lands on the atom
    prior = FiniteAtomPrior(np.array([[0.3, -0.7]]))
    x = np.array([0.1, 0.2])
    out = ddpm_step(x, prior.epsilon(x, 1, sched), 1, sched)
    assert np.allclose(out, prior.atoms[0], atol=1e-12)


def test_ddpm_step_range(sched):
    with pytest.raises(IndexError):
        ddpm_step(np.zeros(1), np.zeros(1), 0, sched)
    with pytest.raises(IndexError):
        ddpm_step(np.zeros(1), np.zeros(1), 1001, sched)


def test_ddim_examples(sched):
    x = np.array([0.5, -1.0])
    out = ddim_step(x, np.zeros(2), 700, 300, sched)
    assert np.allclose(out, np.sqrt(sched.alpha_bar[300] / sched.alpha_bar[700]) * x, rtol=1e-15)
    with pytest.raises(ValueError):
        ddim_step(x, np.zeros(2), 300, 300, sched)
    with pytest.raises(IndexError):
        ddim_step(x, np.zeros(2), 300, -1, sched)


def test_ddim_preserves_standard_normal(sched):
    prior = GaussianPrior(np.zeros(1), 1.0)
    x = RandomStream(0).generator().standard_normal((10**4, 1))
    visit = ddim_timesteps(1000, 200)
    assert len(visit) == 200 and visit[0] == 1000 and visit[-1] == 1
    for k, i in enumerate(visit):
        i_prev = visit[k + 1] if k + 1 < len(visit) else 0
        x = ddim_step(x, prior.epsilon(x, i, sched), i, i_prev, sched)
    assert abs(x.var() - 1) < 0.05


def test_ddim_timesteps_validation():
    with pytest.raises(ValueError):
        ddim_timesteps(10, 0)
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)
    assert ddim_timesteps(10, 10) == list(range(10, 0, -1))


def test_trace_structure():
    t = SamplerTrace()
    t.record(5, 0.1, 1.0, 2.0)
    with pytest.raises(ValueError):
        t.record(5, 0.1, 1.0, 2.0)
    t.record(3, [0.1, 0.3], [1.0, 2.0], [1.0, 1.0], [0.5, 1.0])
    assert t.to_csv().splitlines()[0] == ",".join(TRACE_HEADER)
    assert t.to_csv().splitlines()[1].endswith(",")
    assert t.column("cos_oracle")[1] == 0.75
    assert np.isnan(t.column("cos_oracle")[0])


def test_unconditional_ddpm_reproduces_prior(sched):
    prior = FiniteAtomPrior(np.array([[-1.0], [1.0]]), [0.7, 0.3])
    x = RandomStream(0).child("init").generator().standard_normal((2000, 1))
    stream = RandomStream(0)
    for i in range(1000, 0, -1):
        x = ddpm_step(x, prior.epsilon(x, i, sched), i, sched, stream)
    idx = oracle.nearest_atom(x, prior.atoms)
    assert abs(np.mean(idx == 0) - 0.7) <= 0.03


def test_guidance_off_samples_prior(sched):
    cfg = GuidanceConfig(estimator="dps", guidance_norm=0.0)
    x, trace = solve_inverse(TWO_ATOMS, two_atom_problem(), cfg, sched, seed=3, n_chains=2000)
    freq = np.mean(oracle.nearest_atom(x, TWO_ATOMS.atoms) == 0)
    assert abs(freq - 0.7) <= 0.03


def test_oracle_sampler_matches_bayes(sched):
    prob = two_atom_problem()
    x, trace = solve_inverse(TWO_ATOMS, prob, GuidanceConfig(estimator="oracle"), sched, seed=5, n_chains=2000)
    post = oracle.exact_posterior_atoms(TWO_ATOMS, prob)
    favoured = int(np.argmax(post.weights))
    freq = np.mean(oracle.nearest_atom(x, TWO_ATOMS.atoms) == favoured)
    assert abs(freq - post.weights[favoured]) <= 0.03


def test_trace_shape_and_determinism(sched):
    atoms = RandomStream(0).generator().standard_normal((4, 1, 4, 4))
    prior = FiniteAtomPrior(atoms)
    prob = synthesize_observation(Inpaint.keep_fraction((1, 4, 4), 0.5, RandomStream(1)), NoiseModel(), atoms[1], RandomStream(2))
    cfg = GuidanceConfig(n_mc=16)
    runs = [solve_inverse(prior, prob, cfg, sched, solver="ddim", steps=50, seed=7, n_chains=2, with_oracle=True) for _ in range(2)]
    (x1, t1), (x2, t2) = runs
    assert x1.shape == (2, 1, 4, 4)
    assert len(t1.rows) == 50
    assert np.all(t1.column("recon_l2") >= 0)
    assert np.all(np.diff(t1.column("i")) < 0)
    assert np.array_equal(x1, x2) and t1.to_csv() == t2.to_csv()
    assert np.all(np.abs(t1.column("cos_oracle")) <= 1)


def test_solver_validation(sched):
    prob = two_atom_problem()
    with pytest.raises(ValueError):
        solve_inverse(TWO_ATOMS, prob, GuidanceConfig(), sched, solver="ddpm", steps=10)
    with pytest.raises(ValueError):
        solve_inverse(TWO_ATOMS, prob, GuidanceConfig(), sched, solver="euler")


def test_ddim_explicit_subsequence(sched):
    _, trace = solve_inverse(TWO_ATOMS, two_atom_problem(), GuidanceConfig(estimator="dps"), sched, solver="ddim", steps=[1, 500, 1000, 250])
    assert trace.column("i").tolist() == [1000, 500, 250, 1]
