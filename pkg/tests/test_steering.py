import numpy as np
import pytest

from vdc_lab.autodiff import ShapeError
from vdc_lab.diffusion import CountingDenoiser, ddim_coefficients, ddim_sample, ddim_step, forward_noise, make_schedule
from vdc_lab.generator import generate_condition, init_stack
from vdc_lab.steering import (
    SteeringConfig,
    SteeringGuidance,
    UnconditionalGuidance,
    guided_eps,
    posterior_score_check,
    steer_eps,
)
from vdc_lab.toy.codec import make_codec
from vdc_lab.toy.denoiser import DenoiserConfig, ToyDenoiser
from vdc_lab.toy.tasks import make_class_conditions, make_world, training_world
from vdc_lab.toy.world import AnalyticDenoiser

SCHED = make_schedule()


def _random_stack(seed=0, p=10):
    stack = init_stack("per-step-independent", p, 8, 8, seed=seed, hidden=16)
    r = np.random.default_rng(seed)
    for t in stack.parameters().values():
        t.data = t.data + 0.5 * r.standard_normal(t.shape)
    return stack


@pytest.fixture(scope="module")
def net():
    return ToyDenoiser(DenoiserConfig(hidden=32))


def test_steer_eps_examples(rng):
    c, u = rng.standard_normal(5), rng.standard_normal(5)
    assert np.array_equal(steer_eps(c, u, 1.0).data, u)
    assert np.array_equal(steer_eps(c, u, 0.0).data, c)
    w = SteeringConfig(7.0).w
    assert w == 8.0
    assert steer_eps([0.2], [0.1], w).data[0] == pytest.approx(-0.6, abs=1e-15)


def test_steer_eps_errors():
    with pytest.raises(ShapeError):
        steer_eps(np.zeros(3), np.zeros(4), 2.0)
    with pytest.raises(ValueError):
        steer_eps(np.zeros(3), np.zeros(3), float("nan"))


def test_config_validation_and_weights():
    assert SteeringConfig(0.0, "remove").w == 1.0 == SteeringConfig(0.0, "add").w
    assert SteeringConfig(3.0, "add").w == -2.0
    with pytest.raises(ValueError):
        SteeringConfig(-1.0)
    with pytest.raises(ValueError):
        SteeringConfig(1.0, "sideways")


def test_zero_stack_guidance_is_unconditional(net, rng):
    stack = init_stack("per-step-independent", 10, 8, 8, seed=0)
    z = rng.standard_normal((4, 8))
    u = net(z, 300, net.null_condition()).data
    for s in (0.0, 1.0, 7.0, 50.0):
        g = SteeringGuidance(net, stack, SteeringConfig(s), net.null_condition())
        assert np.abs(guided_eps(g, z, 300, 3).data - u).max() <= 1e-12


def test_zero_scale_ignores_stack(net, rng):
    z = rng.standard_normal((4, 8))
    g = SteeringGuidance(net, _random_stack(), SteeringConfig(0.0), net.null_condition())
    assert np.array_equal(guided_eps(g, z, 300, 5).data, net(z, 300, net.null_condition()).data)


def test_add_with_unit_scale_is_conditional(net, rng):
    stack = _random_stack()
    z = rng.standard_normal((4, 8))
    g = SteeringGuidance(net, stack, SteeringConfig(1.0, "add"), net.null_condition())
    cond = net(z, 300, generate_condition(stack, 2)).data
    np.testing.assert_allclose(guided_eps(g, z, 300, 2).data, cond, atol=1e-14)


def test_guided_eps_counts_two_calls(net, rng):
    g = SteeringGuidance(net, _random_stack(), SteeringConfig(7.0), net.null_condition())
    guided_eps(g, rng.standard_normal(8), 100, 1)
    guided_eps(g, rng.standard_normal(8), 100, 1)
    assert g.nfe == 4


def test_steering_doubles_calls_per_step(net, rng):
    z = rng.standard_normal((3, 8))
    counted = CountingDenoiser(net)
    plain = ddim_sample(z, 10, UnconditionalGuidance(counted, net.null_condition()), SCHED)
    n_plain = counted.calls
    steered = ddim_sample(z, 10, SteeringGuidance(counted, _random_stack(), SteeringConfig(7.0), net.null_condition()), SCHED)
    assert plain.nfe_count == n_plain == 10
    assert steered.nfe_count == counted.calls - n_plain == 20


def test_s_zero_trajectory_matches_unconditional(net, rng):
    z = rng.standard_normal((3, 8))
    a = ddim_sample(z, 10, UnconditionalGuidance(net, net.null_condition()), SCHED)
    b = ddim_sample(z, 10, SteeringGuidance(net, _random_stack(), SteeringConfig(0.0), net.null_condition()), SCHED)
    for (ta, za), (tb, zb) in zip(a.latents, b.latents):
        assert ta == tb and np.array_equal(za.data, zb.data)


def test_steered_step_is_unconditional_step_plus_residual(net, rng):
    stack, s = _random_stack(), 7.0
    z = rng.standard_normal((5, 8))
    t_from, t_to = SCHED.grid[4], SCHED.grid[3]
    u = net(z, t_from, net.null_condition()).data
    c = net(z, t_from, generate_condition(stack, 4)).data
    g = SteeringGuidance(net, stack, SteeringConfig(s), net.null_condition())
    steered = ddim_step(z, t_from, t_to, guided_eps(g, z, t_from, 4), SCHED).data
    _, c_eps = ddim_coefficients(SCHED.alpha_bars[t_from], SCHED.alpha_bars[t_to])
    expected = ddim_step(z, t_from, t_to, u, SCHED).data + c_eps * (-s * (c - u))
    np.testing.assert_allclose(steered, expected, atol=1e-12)


def test_posterior_identity_on_analytic_oracle(rng):
    world = make_world()
    cc = make_class_conditions(4, 8, 8, seed=0)
    den = AnalyticDenoiser(world, SCHED, cc)
    probes = rng.standard_normal((200, 8)) * 1.5
    rep = posterior_score_check(den, cc[1], 7.0, probes, 400, SCHED)
    assert rep.max_identity_deviation <= 1e-12 and rep.n_probes == 200
    zero = posterior_score_check(den, cc[1], 0.0, probes, 400, SCHED)
    assert zero.max_identity_deviation == 0.0


def test_removal_pushes_away_from_degraded_component():
    world, codec = make_world(), make_codec()
    tw = training_world(world, codec)
    cc = make_class_conditions(4, 8, 8, seed=0, n_kinds=3)
    den = AnalyticDenoiser(tw, SCHED, cc)
    k = 4 + 1  # the shift-degraded copy of clean component 1
    rng = np.random.default_rng(3)
    t = 300
    x0, _ = tw.restrict(k).sample(500, rng)
    probes = forward_noise(x0, t, rng.standard_normal(x0.shape), SCHED).data
    rep = posterior_score_check(den, cc[k], 7.0, probes, t, SCHED, away_from=tw.means[k])
    assert rep.fraction_pushed_away >= 0.9
