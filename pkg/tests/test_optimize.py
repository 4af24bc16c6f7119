import csv
import io as _io
from dataclasses import replace

import numpy as np
import pytest

from vdc_lab.autodiff import NonFiniteError, ShapeError
from vdc_lab.calibration import CALIBRATION_SEEDS, load_calibration
from vdc_lab.diffusion import ddim_invert, ddim_sample, make_schedule
from vdc_lab.generator import init_stack
from vdc_lab.harness.experiment import build_env, evaluate, heldout_set, loss_ratio, optimize
from vdc_lab.optimize import (
    LOG_COLUMNS,
    AugmentationPolicy,
    ConfigMismatchError,
    ExamplePair,
    NonCommutingAugmentationError,
    OptimizerConfig,
    apply_augmentation,
    apply_edit,
    augment,
    combined_loss,
    default_policy,
    loss_terms,
    new_stack,
    optimize_steering_condition,
    validate_policy,
)
from vdc_lab.steering import UnconditionalGuidance
from vdc_lab.toy.codec import decode, encode, make_codec
from vdc_lab.toy.denoiser import DenoiserConfig, ToyDenoiser
from vdc_lab.toy.tasks import make_task, make_world, sample_pairs

SCHED = make_schedule()
CODEC = make_codec()
FAST = OptimizerConfig(iterations=3, generator_hidden=8)


@pytest.fixture(scope="module")
def net():
    return ToyDenoiser(DenoiserConfig(hidden=16))


@pytest.fixture
def pairs():
    before, after = sample_pairs(make_task("shift"), make_world(), CODEC, 2, np.random.default_rng(0))
    return [ExamplePair.from_pixels(b, a, CODEC) for b, a in zip(before, after)]


# loss ----------------------------------------------------------------------


def test_loss_zero_for_perfect_match(rng):
    z, x = rng.standard_normal((3, 8)), rng.standard_normal((3, 16))
    assert combined_loss(z, z, x, x).item() == 0.0


def test_loss_unit_latent_residual():
    z = np.zeros((1, 8))
    e = np.zeros((1, 8))
    e[0, 2] = 1.0
    assert combined_loss(z, e, np.zeros((1, 16)), np.ones((1, 16)), use_pixel=False).item() == 1.0


def test_loss_sees_pixel_detail_the_latent_misses(rng):
    R_A = rng.standard_normal(16)
    R_A2 = R_A + 0.3 * CODEC.null_basis()[0]
    Z = encode(R_A, CODEC).data
    np.testing.assert_allclose(Z, encode(R_A2, CODEC).data, atol=1e-14)
    decoded = decode(Z, CODEC).data
    latent, pixel, total = loss_terms(Z[None], encode(R_A2, CODEC).data[None], decoded[None], R_A2[None])
    assert latent.item() < 1e-26
    assert pixel.item() > 0 and total.item() > 0


def test_loss_is_batch_mean(rng):
    z, za = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
    x, xa = rng.standard_normal((4, 16)), rng.standard_normal((4, 16))
    expected = (((z - za) ** 2).sum() + ((x - xa) ** 2).sum()) / 4
    assert combined_loss(z, za, x, xa).item() == pytest.approx(expected, rel=1e-14)


def test_loss_shape_errors():
    with pytest.raises(ShapeError):
        combined_loss(np.zeros((2, 8)), np.zeros((2, 7)), np.zeros((2, 16)), np.zeros((2, 16)))
    with pytest.raises(ShapeError):
        combined_loss(np.zeros((2, 8)), np.zeros((2, 8)), np.zeros((2, 16)), np.zeros((3, 16)))


# augmentation --------------------------------------------------------------


def test_empty_policy_is_identity(pairs, rng):
    assert augment(pairs[0], AugmentationPolicy(), rng, CODEC) is pairs[0]


def test_unit_gain_is_identity(rng):
    x = rng.standard_normal(16)
    np.testing.assert_array_equal(apply_augmentation(x, (("gain-jitter", 1.0),)), x)


def test_augment_keeps_pair_valid(rng):
    task = make_task("pattern-add")
    before, after = sample_pairs(task, make_world(), CODEC, 1, rng)
    pair = ExamplePair.from_pixels(before[0], after[0], CODEC)
    policy = default_policy(task)
    for _ in range(10):
        aug = augment(pair, policy, rng, CODEC)
        np.testing.assert_allclose(task.degrade(aug.R_A), aug.R_B, atol=1e-12)
        np.testing.assert_allclose(aug.Z_B, encode(aug.R_B, CODEC).data, atol=1e-14)


def test_sign_flip_commutes_only_with_the_projection(rng):
    flip = AugmentationPolicy(("sign-flip",))
    validate_policy(flip, make_task("subspace-collapse"))
    collapse = make_task("subspace-collapse")
    x = rng.standard_normal((4, 16))
    np.testing.assert_array_equal(collapse.degrade(-x), -collapse.degrade(x))
    # -(x + h) != -x + h unless h = 0
    with pytest.raises(NonCommutingAugmentationError):
        validate_policy(flip, make_task("shift"))
    validate_policy(flip, make_task("shift", magnitude=0.0))


def test_default_policies():
    assert default_policy(make_task("shift")).ops == ("coordinate-permutation",)
    assert default_policy(make_task("pattern-add")).ops == ("coordinate-permutation",)
    assert default_policy(make_task("subspace-collapse")).ops == ("coordinate-permutation", "gain-jitter")


def test_non_commuting_policy_rejected_before_training(net, pairs):
    cfg = replace(FAST, augmentation=AugmentationPolicy(("gain-jitter",)))
    with pytest.raises(NonCommutingAugmentationError):
        optimize_steering_condition(pairs, net, CODEC, SCHED, cfg, make_task("shift"))


def test_unknown_augmentation_op():
    with pytest.raises(ValueError):
        AugmentationPolicy(("rotate",))


# optimisation --------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(batch_size=0)
    with pytest.raises(ValueError):
        OptimizerConfig(p_fraction=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(iterations=-1)


def test_zero_iterations_leave_stack_at_init(net, pairs, rng):
    cfg = replace(FAST, iterations=0)
    stack, log = optimize_steering_condition(pairs, net, CODEC, SCHED, cfg)
    assert log.rows == []
    assert all(np.all(t.data == 0) for k, t in stack.parameters().items() if k.endswith(("W3", "b3")))
    x = rng.standard_normal((5, 16))
    res = apply_edit(stack, x, net, CODEC, SCHED, cfg)
    inv = ddim_invert(encode(x, CODEC), 10, SCHED, net, net.null_condition())
    ref = ddim_sample(inv.final, 10, UnconditionalGuidance(net, net.null_condition()), SCHED)
    assert np.abs(res.output - decode(ref.final, CODEC).data).max() <= 1e-12


def test_backbone_stays_frozen(net, pairs):
    before = net.state_dict()
    optimize_steering_condition(pairs, net, CODEC, SCHED, FAST)
    after = net.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert not any(p.requires_grad for p in net.params.values())


def test_first_iteration_moves_the_generators(net, pairs):
    stack, _ = optimize_steering_condition(pairs, net, CODEC, SCHED, replace(FAST, iterations=1))
    fresh = new_stack(net, SCHED, FAST)
    moved = [k for k, t in stack.parameters().items() if not np.array_equal(t.data, fresh.parameters()[k].data)]
    assert moved


def test_optimisation_is_deterministic(net, pairs):
    a, log_a = optimize_steering_condition(pairs, net, CODEC, SCHED, FAST)
    b, log_b = optimize_steering_condition(pairs, net, CODEC, SCHED, FAST)
    assert log_a.to_csv() == log_b.to_csv()
    assert all(np.array_equal(a.snapshot()[k], b.snapshot()[k]) for k in a.snapshot())


def test_log_rows_are_finite_and_non_negative(net, pairs):
    _, log = optimize_steering_condition(pairs, net, CODEC, SCHED, replace(FAST, iterations=5))
    rows = list(csv.DictReader(_io.StringIO(log.to_csv())))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 5
    for r in rows:
        vals = [float(r[c]) for c in LOG_COLUMNS[1:]]
        assert all(np.isfinite(v) and v >= 0 for v in vals)
    assert float(rows[0]["lr"]) == 5e-3 and float(rows[-1]["lr"]) == pytest.approx(1e-3)


def test_pixel_loss_toggle(net, pairs):
    _, log = optimize_steering_condition(pairs, net, CODEC, SCHED, replace(FAST, use_pixel_loss=False))
    assert all(r["pixel_loss"] == 0.0 and r["total"] == r["latent_loss"] for r in log.rows)


def test_ablation_toggles_pick_the_right_parts(net, pairs):
    stack, _ = optimize_steering_condition(pairs, net, CODEC, SCHED, replace(FAST, use_generator=False))
    assert stack.setup == "per-step-tokens" and len(stack.generators) == 10
    cfg = replace(FAST, use_steering=False, iterations=0)
    stack, _ = optimize_steering_condition(pairs, net, CODEC, SCHED, cfg)
    assert apply_edit(stack, np.zeros((1, 16)), net, CODEC, SCHED, cfg).nfe_sampling == 10


def test_empty_pairs_and_non_finite_loss(net, pairs):
    with pytest.raises(ValueError):
        optimize_steering_condition([], net, CODEC, SCHED, FAST)
    bad = ExamplePair.from_pixels(pairs[0].R_B, np.full(16, np.nan), CODEC)
    with pytest.raises(NonFiniteError, match="iteration 0"):
        optimize_steering_condition([bad], net, CODEC, SCHED, FAST)


def test_default_edit_uses_thirty_calls(net, rng):
    stack = new_stack(net, SCHED, OptimizerConfig())
    res = apply_edit(stack, rng.standard_normal((3, 16)), net, CODEC, SCHED, OptimizerConfig())
    assert (res.nfe_inversion, res.nfe_correction, res.nfe_sampling, res.nfe_total) == (10, 0, 20, 30)


def test_edit_rejects_mismatched_stack(net):
    stack = init_stack("per-step-independent", 5, 8, 8, seed=0)
    with pytest.raises(ConfigMismatchError, match="path length 5 != 10"):
        apply_edit(stack, np.zeros((1, 16)), net, CODEC, SCHED, OptimizerConfig())
    wide = init_stack("per-step-independent", 10, 8, 4, seed=0)
    with pytest.raises(ConfigMismatchError, match="token width"):
        apply_edit(wide, np.zeros((1, 16)), net, CODEC, SCHED, OptimizerConfig())


# trained backbone ----------------------------------------------------------


@pytest.mark.slow
def test_one_shot_shift_loss_drops_to_calibrated_ratio(trained_env, default_config):
    bound = load_calibration()["one_shot_loss_ratio"]
    cfg = default_config.with_overrides(task="shift")
    env = build_env(cfg, trained_env.denoiser)
    for seed in CALIBRATION_SEEDS:
        _, log = optimize(cfg, env, seed)
        assert loss_ratio(log) <= bound, seed


@pytest.mark.slow
def test_eight_shots_beat_one_shot_per_input(trained_env, default_config):
    cfg = default_config.with_overrides(task="pattern-add")
    env = build_env(cfg, trained_env.denoiser)
    before, after = heldout_set(cfg, env)
    for seed in CALIBRATION_SEEDS:
        mse = {}
        for n in (1, 8):
            c = cfg.with_overrides(data={"n_examples": n})
            stack, _ = optimize(c, env, seed)
            mse[n] = evaluate(stack, before, after, env, c.optimizer_config(seed)).report.column("pixel_mse")
        assert np.mean(mse[8] < mse[1]) >= 0.7, seed
