import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from pydantic import ValidationError

from dpglab import oracle
from dpglab.guidance import (
    GuidanceConfig,
    adaptive_z,
    conditional_weights,
    dpg_score,
    dps_score,
    loo_baselines,
    rescale_and_combine,
    rescale_batch,
    residual_std,
)
from dpglab.numerics import RandomStream
from dpglab.operators import Identity, Inpaint, InverseProblem, NoiseModel, build_operator, synthesize_observation
from dpglab.prior import FiniteAtomPrior, GaussianPrior, fd_vjp
from dpglab.schedule import diffuse_sample

from conftest import rel_err


def identity_problem(y, kind="gaussian", sigma_y=0.05):
    y = np.asarray(y, float)
    return InverseProblem(Identity(y.shape), NoiseModel(kind, sigma_y=sigma_y), y)


def test_config_validation():
    with pytest.raises(ValidationError):
        GuidanceConfig(n_mc=1)
    GuidanceConfig(estimator="dps", n_mc=1)
    with pytest.raises(ValidationError):
        GuidanceConfig(guidance_norm=-1.0)
    with pytest.raises(ValidationError):
        GuidanceConfig(z_mode="mean")
    with pytest.raises(ValidationError):
        GuidanceConfig(unknown=1)


def test_residual_std_examples():
    prob = identity_problem(np.full(6, 0.1))
    assert residual_std(prob, np.zeros(6)) == pytest.approx(0.1, rel=1e-14)
    assert residual_std(prob, prob.y, r_floor=1e-4) == 1e-4
    assert residual_std(identity_problem([3.0, 4.0]), np.zeros(2)) == pytest.approx(np.sqrt(12.5), rel=1e-14)


def test_residual_std_uses_x_dimension():
    op = build_operator({"kind": "inpaint", "keep": [0]}, (4,))
    prob = InverseProblem(op, NoiseModel(), np.array([2.0]))
    assert residual_std(prob, np.zeros(4)) == pytest.approx(1.0)


def test_adaptive_z_examples():
    assert adaptive_z(identity_problem([3.0, -4.0], "poisson"), np.zeros(2)) == 7.0
    g = identity_problem([3.0, 4.0])
    assert adaptive_z(g, np.zeros(2), "sum") == 25.0
    assert adaptive_z(g, np.zeros(2), "per_pixel") == 12.5
    assert adaptive_z(g, np.zeros(2), "likelihood") == pytest.approx(2 * 0.05**2)
    assert adaptive_z(g, g.y, "sum", r_floor=1e-3) == pytest.approx(1e-6)


def test_conditional_weights_examples():
    assert np.allclose(conditional_weights([10.0, 12.0, 10.0], 10.0), [1, np.exp(-0.2), 1], rtol=1e-15)
    assert np.all(conditional_weights([3.0, 3.0, 3.0], 0.1) == 1)
    assert np.allclose(conditional_weights([1.0, 50.0], 1e300), 1.0)


def test_conditional_weights_batched():
    c = conditional_weights([[1.0, 2.0], [5.0, 3.0]], [1.0, 2.0])
    assert np.allclose(c, [[1, np.exp(-1)], [np.exp(-1), 1]])


def test_loo_examples():
    assert np.allclose(loo_baselines([1.0, 2.0, 3.0]), [2.5, 2.0, 1.5])
    c = np.full(5, 0.3)
    assert np.allclose(c - loo_baselines(c), 0)
    with pytest.raises(ValueError):
        loo_baselines([1.0])


@given(arrays(np.float64, st.integers(2, 300), elements=st.floats(1e-300, 1.0)))
def test_centred_costs_sum_to_zero(costs):
    assert abs(np.sum(costs - loo_baselines(costs))) <= 1e-12


def test_rescale_examples():
    base = np.zeros(2)
    s = np.array([3.0, 4.0])
    assert np.allclose(rescale_and_combine(base, s, GuidanceConfig(guidance_norm=10.0)), [6.0, 8.0])
    lit = GuidanceConfig(guidance_norm=10.0, rescale_convention="literal_sq_norm")
    assert np.allclose(rescale_and_combine(base, s, lit), [1.2, 1.6])
    eps = np.array([0.5, -1.0])
    assert np.array_equal(rescale_and_combine(eps, np.zeros(2), GuidanceConfig()), eps)
    with pytest.raises(ValueError):
        rescale_and_combine(np.zeros(3), s, GuidanceConfig())


def test_rescale_batch_is_per_chain():
    s = np.array([[3.0, 4.0], [0.0, 0.0], [0.0, 2.0]])
    out = rescale_batch(s, GuidanceConfig(guidance_norm=2.0))
    assert np.allclose(out, [[1.2, 1.6], [0, 0], [0, 2]])


def test_dpg_single_atom_is_zero(sched):
    prior = FiniteAtomPrior(np.array([[0.3, -0.5, 1.0]]))
    prob = identity_problem([0.1, 0.2, 0.3])
    s, state = dpg_score(prior, prob, np.array([0.2, 0.1, -0.4]), 500, sched, GuidanceConfig(n_mc=64), RandomStream(0))
    assert np.all(s == 0)
    assert np.all(state.r >= 1e-4) and np.all(state.z > 0)


def test_dpg_flat_costs_give_zero(rng, sched):
    prior = FiniteAtomPrior(rng.standard_normal((4, 3)))
    prob = identity_problem(rng.standard_normal(3))
    cfg = GuidanceConfig(n_mc=64, z_mode="likelihood")
    huge = InverseProblem(prob.operator, NoiseModel(sigma_y=1e150), prob.y)
    s, state = dpg_score(prior, huge, rng.standard_normal(3), 300, sched, cfg, RandomStream(0))
    assert np.all(state.costs == 1.0)
    assert np.max(np.abs(s)) == 0.0


def test_dpg_state_invariants(rng, sched):
    prior = FiniteAtomPrior(rng.standard_normal((6, 4)))
    prob = identity_problem(rng.standard_normal(4))
    xs = rng.standard_normal((5, 4))
    s, st_ = dpg_score(prior, prob, xs, 700, sched, GuidanceConfig(n_mc=128), RandomStream(2))
    assert s.shape == xs.shape
    assert np.all((st_.costs > 0) & (st_.costs <= 1))
    assert np.all(st_.costs.max(axis=1) == 1.0)
    assert np.max(np.abs(np.sum(st_.costs - st_.baselines, axis=1))) <= 1e-12


def test_dpg_batch_matches_single(rng, sched):
    prior = FiniteAtomPrior(rng.standard_normal((6, 4)))
    prob = identity_problem(rng.standard_normal(4))
    x = rng.standard_normal(4)
    a, _ = dpg_score(prior, prob, x, 600, sched, GuidanceConfig(n_mc=32), RandomStream(5))
    b, _ = dpg_score(prior, prob, x[None], 600, sched, GuidanceConfig(n_mc=32), RandomStream(5))
    assert np.array_equal(a, b[0])


def test_dpg_equals_per_sample_gradient_form(rng, sched):
    # the aggregated VJP must equal -(1/(2 r^2 N)) sum (c-b) grad ||x0 - mu||^2
    prior = FiniteAtomPrior(rng.standard_normal((5, 3)), rng.uniform(0.3, 1, 5))
    prob = identity_problem(rng.standard_normal(3))
    x = rng.standard_normal(3)
    i, n = 400, 16
    s, state = dpg_score(prior, prob, x, i, sched, GuidanceConfig(n_mc=n), RandomStream(9))
    xi = RandomStream(9).child("mc", i).generator().standard_normal((1, n, 3))[0]
    mu, r = state.mu[0], state.r[0]
    x0 = mu + r * xi
    total = np.zeros(3)
    for m in range(n):
        grad = fd_vjp(lambda z: prior.tweedie_mean(z, i, sched), x, -2 * (x0[m] - mu), h=1e-6)
        total += (state.costs[0, m] - state.baselines[0, m]) * grad
    assert rel_err(s, -total / (2 * r * r * n)) <= 1e-5


def test_dpg_gaussian_prior_direction(sched):
    prior = GaussianPrior(np.zeros(4), 1.0)
    y = RandomStream(0).child("y").generator().standard_normal(4)
    prob = identity_problem(y, sigma_y=0.5)
    for k, i in enumerate((200, 500, 800)):
        x = RandomStream(1).child("x", k).generator().standard_normal(4)
        s, _ = dpg_score(prior, prob, x, i, sched, GuidanceConfig(n_mc=10**5), RandomStream(2))
        assert oracle.direction_accuracy(s, oracle.exact_guidance_score(prior, prob, x, i, sched)) >= 0.95


def test_cost_scaling_leaves_combined_direction(rng, sched):
    # multiplying every cost by a constant scales s_tilde but not the unit-norm combination
    prior = FiniteAtomPrior(rng.standard_normal((6, 4)))
    prob = identity_problem(rng.standard_normal(4))
    x = rng.standard_normal(4)
    s, st_ = dpg_score(prior, prob, x, 500, sched, GuidanceConfig(n_mc=64), RandomStream(1))
    xi = RandomStream(1).child("mc", 500).generator().standard_normal((1, 64, 4))[0]
    for factor in (1e-3, 7.0):
        c = factor * st_.costs[0]
        d = np.einsum("m,md->d", c - loo_baselines(c), xi)
        s2 = prior.tweedie_vjp(x, 500, sched, d) / (st_.r[0] * 64)
        eps = prior.epsilon(x, 500, sched)
        cfg = GuidanceConfig(guidance_norm=2.0)
        assert np.max(np.abs(rescale_and_combine(eps, s2, cfg) - rescale_and_combine(eps, s, cfg))) <= 1e-12


def test_dps_examples(sched):
    prior = GaussianPrior(np.zeros(3), 1.0)
    y = np.array([0.3, -0.2, 0.8])
    prob = identity_problem(y)
    i = 400
    a = np.sqrt(sched.alpha_bar[i])
    x = np.array([1.0, 0.5, -0.5])
    assert np.allclose(dps_score(prior, prob, x, i, sched), 2 * a * (y - a * x), atol=1e-14)
    assert np.allclose(dps_score(prior, prob, y / a, i, sched), 0, atol=1e-14)


@pytest.mark.parametrize("i", [50, 400, 900])
def test_dps_matches_fd(i, sched):
    prior = FiniteAtomPrior(np.array([[-1.0], [1.0]]), [0.3, 0.7])
    prob = identity_problem([0.4])
    x = np.array([0.3 * (1 - sched.alpha_bar[i])])
    loss = lambda z: prob.loss(prior.tweedie_mean(z, i, sched))  # noqa: E731
    h = 1e-4 * (1 - sched.alpha_bar[i])
    fd = (loss(x + h) - loss(x - h)) / (2 * h)
    assert rel_err(dps_score(prior, prob, x, i, sched), -fd) <= 1e-5


def test_dps_poisson_uses_sign(sched):
    prior = GaussianPrior(np.zeros(2), 1.0)
    prob = identity_problem([0.5, -0.5], kind="poisson")
    i = 300
    a = np.sqrt(sched.alpha_bar[i])
    assert np.allclose(dps_score(prior, prob, np.zeros(2), i, sched), a * np.array([1.0, -1.0]))


def test_dps_nonlinear_operator_chain_rule(rng, sched):
    prior = FiniteAtomPrior(rng.standard_normal((5, 1, 4, 4)))
    op = build_operator({"kind": "nonlinear_blur", "size": 3, "std": 1.0}, (1, 4, 4))
    prob = InverseProblem(op, NoiseModel(), rng.standard_normal((1, 4, 4)))
    x = 0.3 * rng.standard_normal((1, 4, 4))
    i = 800
    loss = lambda z: prob.loss(prior.tweedie_mean(z, i, sched))  # noqa: E731
    fd = fd_vjp(loss, x, np.array(1.0), h=1e-6)
    assert rel_err(dps_score(prior, prob, x, i, sched), -fd) <= 1e-5


def test_loo_reduces_variance(sched):
    atoms = RandomStream(0).child("atoms").generator().standard_normal((8, 16))
    prior = FiniteAtomPrior(atoms)
    prob = synthesize_observation(Inpaint(np.arange(16) % 2 == 0), NoiseModel(), atoms[0], RandomStream(1))
    x = diffuse_sample(atoms[0], 700, sched, RandomStream(2))
    xs = np.repeat(x[None], 200, axis=0)

    def estimates(baseline):
        cfg = GuidanceConfig(n_mc=64, baseline=baseline)
        # one batch of 200 identical states draws 200 independent noise sets
        s, _ = dpg_score(prior, prob, xs, 700, sched, cfg, RandomStream(3))
        return s

    assert np.mean(np.var(estimates("loo"), axis=0)) <= np.mean(np.var(estimates("none"), axis=0))


def test_estimator_consistency_in_n_mc(sched):
    atoms = RandomStream(5).child("atoms").generator().standard_normal((8, 16))
    prior = FiniteAtomPrior(atoms)
    prob = synthesize_observation(Inpaint(np.arange(16) % 2 == 0), NoiseModel(), atoms[0], RandomStream(1))
    xs = np.stack([diffuse_sample(atoms[0], 500, sched, RandomStream(5).child("st", k)) for k in range(20)])
    exact = oracle.exact_guidance_score(prior, prob, xs, 500, sched)
    cos = []
    for n in (10**2, 10**3, 10**4):
        s, _ = dpg_score(prior, prob, xs, 500, sched, GuidanceConfig(n_mc=n), RandomStream(3))
        cos.append(np.mean(oracle.direction_accuracy(s, exact, batch_axes=1)))
    assert cos[0] < cos[1] < cos[2]


def test_non_finite_cost_reported(rng, sched):
    prior = FiniteAtomPrior(rng.standard_normal((3, 2)))
    prob = identity_problem([np.inf, 0.0])
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError, match="sample"):
        dpg_score(prior, prob, np.zeros(2), 100, sched, GuidanceConfig(n_mc=4), RandomStream(0))
