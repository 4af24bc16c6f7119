"""Learning a steering condition from before/after example pairs, and applying it.

Each iteration inverts a batch of (augmented) "before" latents to the start of
the active path under the null condition, runs the steered sampler down to
the clean latent while recording a tape, scores the result against the
"after" example in latent and pixel space, and takes one Adam step on every
generator in the stack. The inverted latents are constants: no gradient
flows through the inversion pass.
"""

from __future__ import annotations

import csv
import io as _io
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, ShapeError, Tape, Tensor, as_tensor, backward, scale, squared_l2
from .diffusion import NoiseSchedule, Trajectory, ddim_invert, ddim_sample
from .generator import ConditionStack, init_stack
from .optim import AdamState, CosineSchedule, adam_step, cosine_lr
from .steering import ConditionalGuidance, SteeringConfig, SteeringGuidance
from .toy.codec import ToyCodec, decode, encode
from .toy.tasks import EditTask

log = logging.getLogger(__name__)

AUGMENTATIONS = ("sign-flip", "coordinate-permutation", "gain-jitter")
LOG_COLUMNS = ("iteration", "lr", "latent_loss", "pixel_loss", "total")


class NonCommutingAugmentationError(ValueError):
    """An augmentation would turn valid before/after pairs into invalid ones."""


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ExamplePair:
    R_B: np.ndarray
    R_A: np.ndarray
    Z_B: np.ndarray
    Z_A: np.ndarray

    @classmethod
    def from_pixels(cls, R_B, R_A, codec: ToyCodec) -> "ExamplePair":
        R_B = np.asarray(R_B, dtype=np.float64)
        R_A = np.asarray(R_A, dtype=np.float64)
        if R_B.shape != R_A.shape or R_B.shape[-1] != codec.d_x:
            raise ShapeError(f"example pair shapes {R_B.shape} / {R_A.shape} do not fit d_x={codec.d_x}")
        return cls(R_B, R_A, encode(R_B, codec).data, encode(R_A, codec).data)


@dataclass(frozen=True)
class AugmentationPolicy:
    ops: tuple[str, ...] = ()
    roll_period: int = 2
    gain_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        unknown = set(self.ops) - set(AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentation ops {sorted(unknown)}")


def draw_augmentation(policy: AugmentationPolicy, rng: np.random.Generator, d_x: int) -> tuple:
    """One random draw per op, as a hashable tuple of (op, parameter)."""
    draw = []
    for op in policy.ops:
        if op == "sign-flip":
            draw.append((op, float(rng.choice([-1.0, 1.0]))))
        elif op == "coordinate-permutation":
            draw.append((op, int(policy.roll_period * rng.integers(0, d_x // policy.roll_period))))
        else:
            draw.append((op, float(rng.uniform(*policy.gain_range))))
    return tuple(draw)


def apply_augmentation(x: np.ndarray, draw: tuple) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    for op, value in draw:
        if op == "coordinate-permutation":
            x = np.roll(x, value, axis=-1)
        else:
            x = value * x
    return x


def augment(pair: ExamplePair, policy: AugmentationPolicy, rng: np.random.Generator, codec: ToyCodec) -> ExamplePair:
    """Apply one random draw of ``policy`` to both halves of the pair."""
    draw = draw_augmentation(policy, rng, pair.R_B.shape[-1])
    if not draw:
        return pair
    return ExamplePair.from_pixels(apply_augmentation(pair.R_B, draw), apply_augmentation(pair.R_A, draw), codec)


def _op_draws(op: str, policy: AugmentationPolicy, d_x: int) -> list[tuple]:
    if op == "sign-flip":
        return [((op, -1.0),)]
    if op == "coordinate-permutation":
        return [((op, k),) for k in range(policy.roll_period, d_x, policy.roll_period)]
    return [((op, g),) for g in policy.gain_range]


def validate_policy(policy: AugmentationPolicy, task: EditTask, n_probes: int = 8, seed: int = 0) -> None:
    """Reject ops that do not commute with the task's degradation.

    Checks g(a(x)) == a(g(x)) numerically over probes for every extreme or
    discrete draw of each op.
    """
    probes = np.random.default_rng(seed).standard_normal((n_probes, task.d_x))
    for op in policy.ops:
        for draw in _op_draws(op, policy, task.d_x):
            lhs = task.degrade(apply_augmentation(probes, draw))
            rhs = apply_augmentation(task.degrade(probes), draw)
            if not np.allclose(lhs, rhs, atol=1e-12, rtol=0):
                raise NonCommutingAugmentationError(f"augmentation {op!r} does not commute with task {task.kind!r}")


def default_policy(task: EditTask) -> AugmentationPolicy:
    """Every op that commutes with ``task``, except sign-flip.

    Sign-flip commutes with the projection task but negates the mixture
    means, so flipped examples land far from the data and teach the
    condition to fix inputs it will never see. It stays available on request.
    """
    ops = []
    for op in AUGMENTATIONS:
        if op == "sign-flip":
            continue
        try:
            validate_policy(AugmentationPolicy((op,)), task)
        except NonCommutingAugmentationError:
            continue
        ops.append(op)
    return AugmentationPolicy(tuple(ops))


@dataclass(frozen=True)
class OptimizerConfig:
    iterations: int = 200
    batch_size: int = 4
    lr_max: float = 5e-3
    lr_min: float = 1e-3
    p_fraction: float = 0.10
    steering: SteeringConfig = field(default_factory=SteeringConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    use_augmentation: bool = True
    use_pixel_loss: bool = True
    use_steering: bool = True
    use_generator: bool = True
    setup: str = "per-step-independent"
    generator_hidden: int = 32
    n_freq: int = 6
    latent_weight: float = 1.0
    pixel_weight: float = 1.0
    seed: int = 17

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.p_fraction <= 1:
            raise ValueError("p_fraction must lie in (0, 1]")

    @property
    def lr_schedule(self) -> CosineSchedule:
        return CosineSchedule(self.lr_max, self.lr_min, max(self.iterations - 1, 1))

    def with_seed(self, seed: int) -> "OptimizerConfig":
        return replace(self, seed=seed)


def loss_terms(Z0, Z_A, decoded, R_A, use_pixel: bool = True, weights: tuple[float, float] = (1.0, 1.0)):
    """(latent, pixel, total) batch-averaged squared errors; pixel is None when off."""
    Z0, decoded = as_tensor(Z0), as_tensor(decoded)
    Z_A, R_A = np.asarray(getattr(Z_A, "data", Z_A)), np.asarray(getattr(R_A, "data", R_A))
    if Z0.shape != Z_A.shape:
        raise ShapeError(f"latent loss: {Z0.shape} vs {Z_A.shape}")
    if decoded.shape != R_A.shape:
        raise ShapeError(f"pixel loss: {decoded.shape} vs {R_A.shape}")
    n = Z0.shape[0] if Z0.ndim == 2 else 1
    latent = scale(squared_l2(Z0 - Z_A), 1.0 / n)
    total = scale(latent, weights[0])
    pixel = None
    if use_pixel:
        pixel = scale(squared_l2(decoded - R_A), 1.0 / n)
        total = total + scale(pixel, weights[1])
    return latent, pixel, total


def combined_loss(Z0, Z_A, decoded, R_A, use_pixel: bool = True) -> Tensor:
    """|Z0 - Z_A|^2 + |decoded - R_A|^2, averaged over the batch."""
    return loss_terms(Z0, Z_A, decoded, R_A, use_pixel)[2]


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    @property
    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.rows])

    def to_csv(self) -> str:
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in self.rows:
            writer.writerow([r["iteration"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()


def make_guidance(stack: ConditionStack, denoiser, config: OptimizerConfig):
    if config.use_steering:
        return SteeringGuidance(denoiser, stack, config.steering, denoiser.null_condition())
    return ConditionalGuidance(denoiser, stack)


def new_stack(denoiser, sched: NoiseSchedule, config: OptimizerConfig) -> ConditionStack:
    setup = config.setup if config.use_generator else "per-step-tokens"
    p = sched.path_index(config.p_fraction)
    return init_stack(setup, p, denoiser.config.N, denoiser.config.d_c, config.seed, config.generator_hidden, config.n_freq)


def optimize_steering_condition(
    pairs: Sequence[ExamplePair],
    denoiser,
    codec: ToyCodec,
    sched: NoiseSchedule,
    config: OptimizerConfig,
    task: EditTask | None = None,
) -> tuple[ConditionStack, TrainingLog]:
    """Fit a condition stack so the steered sampler maps each "before" to its "after"."""
    if not pairs:
        raise ValueError("need at least one example pair")
    policy = config.augmentation if config.use_augmentation else AugmentationPolicy()
    if task is not None:
        validate_policy(policy, task)
    stack = new_stack(denoiser, sched, config)
    p = stack.p
    params = stack.parameters()
    null = denoiser.null_condition()
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    lr_sched = config.lr_schedule
    inverted: dict[tuple, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    history = TrainingLog()
    d_x = codec.d_x

    for it in range(config.iterations):
        replace_ = len(pairs) < config.batch_size
        idx = rng.choice(len(pairs), size=config.batch_size, replace=replace_)
        zp, za, ra = [], [], []
        for k in idx:
            draw = draw_augmentation(policy, rng, d_x)
            key = (int(k), draw)
            if key not in inverted:
                pair = pairs[k]
                if draw:
                    pair = ExamplePair.from_pixels(
                        apply_augmentation(pair.R_B, draw), apply_augmentation(pair.R_A, draw), codec
                    )
                z_p = ddim_invert(pair.Z_B, p, sched, denoiser, null).final.data
                inverted[key] = (z_p, pair.Z_A, pair.R_A)
            z_p, z_a, r_a = inverted[key]
            zp.append(z_p)
            za.append(z_a)
            ra.append(r_a)
        zp, za, ra = np.stack(zp), np.stack(za), np.stack(ra)

        guidance = make_guidance(stack, denoiser, config)
        with Tape() as tape:
            z0 = ddim_sample(Tensor(zp), p, guidance, sched).final
            latent, pixel, total = loss_terms(
                z0, za, decode(z0, codec), ra, config.use_pixel_loss, (config.latent_weight, config.pixel_weight)
            )
        value = total.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"condition optimization loss is non-finite at iteration {it}")
        grads = backward(total, tape, params)
        lr = cosine_lr(it, lr_sched)
        adam_step(params, grads, state, lr)
        history.rows.append(
            {
                "iteration": it,
                "lr": lr,
                "latent_loss": latent.item(),
                "pixel_loss": pixel.item() if pixel is not None else 0.0,
                "total": value,
            }
        )
    return stack, history


@dataclass
class EditResult:
    output: np.ndarray
    trajectory: Trajectory
    z_p: np.ndarray
    nfe_inversion: int
    nfe_correction: int
    nfe_sampling: int

    @property
    def nfe_total(self) -> int:
        return self.nfe_inversion + self.nfe_correction + self.nfe_sampling


def check_compatible(stack: ConditionStack, denoiser, sched: NoiseSchedule, config: OptimizerConfig) -> int:
    p = sched.path_index(config.p_fraction)
    problems = []
    if stack.p != p:
        problems.append(f"path length {stack.p} != {p}")
    if stack.N != denoiser.config.N:
        problems.append(f"token count {stack.N} != {denoiser.config.N}")
    if stack.d_c != denoiser.config.d_c:
        problems.append(f"token width {stack.d_c} != {denoiser.config.d_c}")
    if problems:
        raise ConfigMismatchError("stack does not fit this run: " + "; ".join(problems))
    return p


def apply_edit(
    stack: ConditionStack,
    x_input,
    denoiser,
    codec: ToyCodec,
    sched: NoiseSchedule,
    config: OptimizerConfig,
    correction=None,
) -> EditResult:
    """encode -> invert to the path start -> steered sampling -> decode.

    ``correction`` is an optional ``CorrectionConfig``; when given, the naive
    inversion is refined before sampling.
    """
    p = check_compatible(stack, denoiser, sched, config)
    z = encode(np.asarray(getattr(x_input, "data", x_input), dtype=np.float64), codec)
    null = denoiser.null_condition()
    inv = ddim_invert(z, p, sched, denoiser, null)
    z_p, nfe_corr = inv.final, 0
    if correction is not None:
        from .correction import correct_inversion

        result = correct_inversion(z.data, p, denoiser, null, sched, correction, initial=inv.final.data)
        z_p, nfe_corr = Tensor(result.z_p), result.nfe_correction
    traj = ddim_sample(z_p, p, make_guidance(stack, denoiser, config), sched)
    out = decode(traj.final, codec).data
    return EditResult(out, traj, z_p.data, inv.nfe_count, nfe_corr, traj.nfe_count)
