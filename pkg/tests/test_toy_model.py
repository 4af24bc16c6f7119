import math
from dataclasses import replace

import numpy as np
import pytest

from helpers import central_fd, rel_err
from vdc_lab.autodiff import NonFiniteError, ShapeError, Tape, Tensor, backward, squared_l2
from vdc_lab.calibration import load_calibration
from vdc_lab.diffusion import NoiseSchedule, make_schedule
from vdc_lab.toy.codec import ToyCodec, decode, encode, make_codec
from vdc_lab.toy.denoiser import DenoiserConfig, ToyDenoiser, oracle_mse, train_toy_denoiser
from vdc_lab.toy.tasks import (
    TASK_KINDS,
    make_class_conditions,
    make_edit_task,
    make_task,
    make_world,
    sample_pairs,
    training_world,
)
from vdc_lab.toy.world import (
    AnalyticDenoiser,
    DegenerateQueryError,
    GaussianMixtureWorld,
    analytic_eps,
    analytic_eps_jacobian,
    compose,
    posterior_mean,
)

SCHED = make_schedule()


# world ---------------------------------------------------------------------


def test_world_validation():
    with pytest.raises(ValueError, match="sum"):
        GaussianMixtureWorld.from_arrays([0.5, 0.4], np.zeros((2, 3)), 1.0)
    with pytest.raises(ValueError):
        GaussianMixtureWorld.from_arrays([1.0], np.zeros((1, 3)), -0.1)
    GaussianMixtureWorld.from_arrays([1.0], np.zeros((1, 3)), 0.0)  # point mass is fine


def test_world_moments_match_samples(rng):
    w = make_world()
    x, labels = w.sample(200_000, rng)
    assert np.bincount(labels, minlength=4) / len(labels) == pytest.approx(w.weights, abs=0.01)
    np.testing.assert_allclose(x.mean(0), w.mean(), atol=0.02)
    np.testing.assert_allclose(np.cov(x.T), w.covariance(), atol=0.05)


def test_compose_renormalises():
    a = GaussianMixtureWorld.from_arrays([1.0], [[0.0, 0.0]], 1.0)
    b = GaussianMixtureWorld.from_arrays([0.5, 0.5], [[1.0, 0.0], [0.0, 1.0]], 1.0)
    c = compose([a, b], [1.0, 1.0])
    np.testing.assert_allclose(c.weights, [0.5, 0.25, 0.25])


# oracle --------------------------------------------------------------------


def test_point_mass_eps(rng):
    mu = rng.standard_normal(4)
    w = GaussianMixtureWorld.from_arrays([1.0], [mu], 0.0)
    z = rng.standard_normal((6, 4))
    a = SCHED.alpha_bars[300]
    np.testing.assert_allclose(analytic_eps(z, 300, w, SCHED), (z - math.sqrt(a) * mu) / math.sqrt(1 - a), atol=1e-12)


@pytest.mark.parametrize("sigma", [0.0, 0.3, 2.0])
def test_eps_vanishes_at_marginal_mean(sigma, rng):
    mu = rng.standard_normal(4)
    w = GaussianMixtureWorld.from_arrays([1.0], [mu], sigma)
    for t in (1, 100, 1000):
        assert np.abs(analytic_eps(math.sqrt(SCHED.alpha_bars[t]) * mu, t, w, SCHED)).max() < 1e-12


def test_oracle_rejects_bad_queries():
    w = make_world()
    with pytest.raises(IndexError):
        analytic_eps(np.zeros(8), 0, w, SCHED)
    with pytest.raises(IndexError):
        analytic_eps(np.zeros(8), 1001, w, SCHED)
    flat = NoiseSchedule.from_betas([0.0, 0.1])
    with pytest.raises(DegenerateQueryError):
        analytic_eps(np.ones(8), 1, w, flat)


def test_two_component_eps_matches_monte_carlo():
    """Self-normalised importance sampling of E[eps | z_t] with the prior as proposal."""
    w = GaussianMixtureWorld.from_arrays([0.5, 0.5], [[1.0, -1.0], [-1.5, 0.5]], 0.4)
    rng = np.random.default_rng(5)
    n = 1_000_000
    for t in (200, 600):
        a = SCHED.alpha_bars[t]
        z = rng.standard_normal(2) * 0.8
        x0, _ = w.sample(n, rng)
        eps = (z - math.sqrt(a) * x0) / math.sqrt(1 - a)
        logw = -0.5 * (eps**2).sum(1)
        wt = np.exp(logw - logw.max())
        wt /= wt.sum()
        est = wt @ eps
        se = np.sqrt((wt[:, None] ** 2 * (eps - est) ** 2).sum(0))
        exact = analytic_eps(z, t, w, SCHED)
        assert np.all(np.abs(exact - est) <= 3 * se)


def test_eps_jacobian_matches_finite_differences(rng):
    w = make_world()
    z = rng.standard_normal((3, 8))
    for t in (50, 400, 900):
        jac = analytic_eps_jacobian(z, t, w, SCHED)
        for n in range(3):
            zn = z[n].copy()
            fd = np.stack(
                [
                    (analytic_eps(zn + h * e, t, w, SCHED) - analytic_eps(zn - h * e, t, w, SCHED)) / (2 * h)
                    for e, h in zip(np.eye(8), [1e-5] * 8)
                ],
                axis=1,
            )
            # relative to the Jacobian's scale; tiny off-diagonal entries carry FD rounding noise
            assert np.abs(jac[n] - fd).max() / np.abs(jac[n]).max() < 1e-6


def test_posterior_mean_is_component_mean_for_sharp_prior(rng):
    w = GaussianMixtureWorld.from_arrays([1.0], [rng.standard_normal(3)], 0.0)
    pm = posterior_mean(rng.standard_normal((4, 3)), 700, w, SCHED)
    np.testing.assert_allclose(pm, np.broadcast_to(w.means[0], (4, 3)), atol=1e-12)


def test_analytic_denoiser_class_selection(rng):
    w = make_world()
    cc = make_class_conditions(4, 8, 8, seed=1)
    den = AnalyticDenoiser(w, SCHED, cc)
    z = rng.standard_normal((5, 8))
    np.testing.assert_array_equal(den(z, 300).data, analytic_eps(z, 300, w, SCHED))
    np.testing.assert_array_equal(den(z, 300, cc[2]).data, analytic_eps(z, 300, w.restrict(2), SCHED))
    with pytest.raises(KeyError):
        den(z, 300, np.ones((8, 8)))


# codec ---------------------------------------------------------------------


def test_codec_rows_orthonormal():
    c = make_codec()
    np.testing.assert_allclose(c.A @ c.A.T, np.eye(8), atol=1e-10)
    assert c.null_basis().shape == (8, 16)
    np.testing.assert_allclose(c.A @ c.null_basis().T, 0.0, atol=1e-10)


def test_codec_reads_uniform_offsets():
    c = make_codec()
    ones = np.ones(16)
    alt = np.where(np.arange(16) % 2 == 0, 1.0, -1.0)
    for v in (ones, alt):
        assert np.linalg.norm(c.A @ v) == pytest.approx(np.linalg.norm(v), rel=1e-12)


def test_square_codec_round_trip(rng):
    for c in (make_codec(d_x=8, d_z=8, n_detail=4), ToyCodec.random(8, 8, seed=3)):
        x = rng.standard_normal((5, 8))
        np.testing.assert_allclose(decode(encode(x, c), c).data, x, atol=1e-12)


def test_encode_zero_and_projection_residual(rng):
    c = make_codec()
    assert np.all(encode(np.zeros(16), c).data == 0)
    x = rng.standard_normal((10, 16))
    back = decode(encode(x, c), c).data
    residual = x - x @ c.A.T @ c.A
    np.testing.assert_allclose(np.linalg.norm(back - x, axis=1), np.linalg.norm(residual, axis=1), atol=1e-12)


def test_encode_is_contraction_with_equality_on_row_span(rng):
    c = make_codec()
    x = rng.standard_normal((50, 16))
    assert np.all(np.linalg.norm(encode(x, c).data, axis=1) <= np.linalg.norm(x, axis=1) + 1e-12)
    inside = rng.standard_normal((5, 8)) @ c.A
    np.testing.assert_allclose(np.linalg.norm(encode(inside, c).data, axis=1), np.linalg.norm(inside, axis=1), rtol=1e-12)
    outside = inside + 0.1 * c.null_basis()[0]
    assert np.all(np.linalg.norm(encode(outside, c).data, axis=1) < np.linalg.norm(outside, axis=1))


def test_codec_dimension_errors():
    c = make_codec()
    with pytest.raises(ShapeError):
        encode(np.zeros(8), c)
    with pytest.raises(ShapeError):
        decode(np.zeros(16), c)
    with pytest.raises(ValueError):
        ToyCodec(np.ones((2, 4)))


# tasks ---------------------------------------------------------------------


def test_zero_shift_is_identity(rng):
    x = rng.standard_normal((3, 16))
    np.testing.assert_array_equal(make_task("shift", magnitude=0.0).degrade(x), x)


def test_pattern_round_trip(rng):
    task = make_task("pattern-add")
    x = rng.standard_normal((3, 16))
    np.testing.assert_allclose(task.restore(task.degrade(x)), x, atol=1e-15)
    assert not np.allclose(task.degrade(x), x)


def test_collapse_is_idempotent_projection(rng):
    task = make_task("subspace-collapse")
    x = rng.standard_normal((4, 16))
    once = task.degrade(x)
    np.testing.assert_allclose(task.degrade(once), once, atol=1e-14)
    np.testing.assert_allclose(once[:, ::2], once[:, 1::2], atol=1e-14)


def test_unknown_task_kind():
    with pytest.raises(ValueError, match="unknown task"):
        make_task("blur")


@pytest.mark.parametrize("kind", TASK_KINDS)
def test_degraded_world_means_follow_latent_map(kind):
    w, c = make_world(), make_codec()
    dw, task = make_edit_task(kind, w, c)
    expected = encode(task.degrade(w.means @ c.A), c).data
    np.testing.assert_allclose(dw.means, expected, atol=1e-12)


def test_pairs_target_is_clean_source(rng):
    w, c = make_world(), make_codec()
    task = make_task("shift")
    before, after = sample_pairs(task, w, c, 7, rng)
    np.testing.assert_allclose(task.restore(before), after, atol=1e-14)


def test_class_conditions_are_compositional():
    cc = make_class_conditions(4, 8, 8, seed=0, n_kinds=3)
    assert cc.shape == (16, 8, 8)
    # the same degradation token separates every clean/degraded pair of a block
    np.testing.assert_allclose(cc[4] - cc[0], cc[5] - cc[1], atol=1e-14)
    assert len(training_world(make_world(), make_codec())) == 16


# denoiser ------------------------------------------------------------------


SMALL = DenoiserConfig(hidden=16, steps=40, batch_size=32)


def test_zero_network_predicts_zero(rng):
    net = ToyDenoiser.zeros(SMALL)
    z = rng.standard_normal((5, 8))
    assert np.all(net(z, 300, net.null_condition()).data == 0)
    w = make_world()
    scores = oracle_mse(net, w, SCHED, None, n=2000, seed=3)
    assert scores["uncond"] == scores["zero_net"] > 0


def test_denoiser_rejects_bad_shapes():
    net = ToyDenoiser(SMALL)
    with pytest.raises(ValueError):
        net(np.zeros((2, 7)), 10)
    with pytest.raises(ValueError):
        net(np.zeros((2, 8)), 10, np.zeros((4, 8)))


def test_denoiser_differentiable_in_latent_and_condition(rng):
    net = ToyDenoiser(SMALL)
    z0 = rng.standard_normal((3, 8))
    c0 = rng.standard_normal((8, 8))
    z, c = Tensor(z0, requires_grad=True), Tensor(c0, requires_grad=True)
    with Tape() as tape:
        loss = squared_l2(net(z, 250, c))
    g = backward(loss, tape, {"z": z, "c": c})
    fd_z, fd_c = central_fd(lambda: squared_l2(net(Tensor(z0), 250, Tensor(c0))).item(), [z0, c0])
    assert rel_err(g["z"].data, fd_z, floor=1e-7).max() < 1e-5
    assert rel_err(g["c"].data, fd_c, floor=1e-7).max() < 1e-5
    assert np.abs(g["c"].data).max() > 0


def test_short_training_is_deterministic_and_reloadable(tmp_path, rng):
    w = make_world()
    cc = make_class_conditions(4, 8, 8)
    a, hist_a = train_toy_denoiser(w, SCHED, SMALL, cc)
    b, hist_b = train_toy_denoiser(w, SCHED, SMALL, cc)
    assert hist_a == hist_b
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    back, manifest = ToyDenoiser.load(a.save(tmp_path / "net", {"note": 1}))
    assert manifest["note"] == 1 and back.config == SMALL
    z = rng.standard_normal((4, 8))
    assert np.array_equal(back(z, 77, cc[1]).data, a(z, 77, cc[1]).data)


def test_training_reports_non_finite_step():
    class Poisoned:
        def __init__(self, world):
            self.world = world
            self.calls = 0

        def __len__(self):
            return len(self.world)

        def sample(self, n, rng):
            self.calls += 1
            x, labels = self.world.sample(n, rng)
            if self.calls == 3:
                x[0, 0] = np.nan
            return x, labels

    cfg = replace(SMALL, steps=10)
    with pytest.raises(NonFiniteError, match="step 2"):
        train_toy_denoiser(Poisoned(make_world()), SCHED, cfg, make_class_conditions(4, 8, 8))


def test_training_needs_one_condition_per_component():
    with pytest.raises(ValueError):
        train_toy_denoiser(make_world(), SCHED, SMALL, make_class_conditions(3, 8, 8))


@pytest.mark.slow
def test_trained_denoiser_within_calibrated_tolerance(trained_run):
    tau = load_calibration()["tau_model"]
    scores = trained_run["record"]["oracle_mse"]
    assert max(scores["uncond"], scores["cond"]) <= tau
    assert scores["zero_net"] > 10 * tau


@pytest.mark.slow
def test_conditional_prediction_differs_from_unconditional(trained_denoiser, default_config, rng):
    cc = default_config.class_conditions()
    z = rng.standard_normal((64, 8))
    null = trained_denoiser(z, 300, trained_denoiser.null_condition()).data
    for k in (0, 5, 15):
        cond = trained_denoiser(z, 300, cc[k]).data
        assert np.linalg.norm(cond - null) > 0.1


@pytest.mark.slow
def test_trained_denoiser_is_deterministic(trained_denoiser, rng):
    z = rng.standard_normal((8, 8))
    a = trained_denoiser(z, 123, trained_denoiser.null_condition()).data
    b = trained_denoiser(z.copy(), 123, trained_denoiser.null_condition()).data
    assert np.array_equal(a, b)
