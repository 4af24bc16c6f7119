"""Building blocks shared by the CLI commands, calibration and the test suite."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..correction import CorrectionConfig
from ..diffusion import NoiseSchedule
from ..generator import ConditionStack
from ..optimize import (
    ConfigMismatchError,
    ExamplePair,
    OptimizerConfig,
    TrainingLog,
    apply_edit,
    new_stack,
    optimize_steering_condition,
)
from ..toy.codec import ToyCodec, encode
from ..toy.denoiser import ToyDenoiser, oracle_mse, train_toy_denoiser
from ..toy.tasks import EditTask, sample_pairs
from ..toy.world import GaussianMixtureWorld
from .config import RunConfig
from .metrics import MetricsReport


@dataclass
class ToyEnv:
    config: RunConfig
    sched: NoiseSchedule
    codec: ToyCodec
    world: GaussianMixtureWorld
    task: EditTask
    denoiser: ToyDenoiser


def build_env(cfg: RunConfig, denoiser: ToyDenoiser) -> ToyEnv:
    check_denoiser(cfg, denoiser)
    return ToyEnv(cfg, cfg.schedule(), cfg.codec(), cfg.world(), cfg.task(), denoiser)


def check_denoiser(cfg: RunConfig, denoiser: ToyDenoiser) -> None:
    want = cfg.denoiser_config()
    got = denoiser.config
    bad = [f"{k}: bundle {getattr(got, k)} vs config {getattr(want, k)}" for k in ("d_z", "N", "d_c") if getattr(got, k) != getattr(want, k)]
    if bad:
        raise ConfigMismatchError("denoiser does not fit the run config: " + "; ".join(bad))


def train_denoiser(cfg: RunConfig) -> tuple[ToyDenoiser, list[float], dict[str, float]]:
    """Train on the clean world plus its degraded copies and score against the oracle."""
    tw = cfg.training_world()
    cc = cfg.class_conditions()
    sched = cfg.schedule()
    net, history = train_toy_denoiser(tw, sched, cfg.denoiser_config(), cc)
    dn = cfg.doc["denoiser"]
    scores = oracle_mse(net, tw, sched, cc, n=dn["n_eval"], seed=dn["seed"] + 1000)
    return net, history, scores


def load_denoiser(path: str | os.PathLike) -> ToyDenoiser:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(f"no denoiser bundle at {path}")
    net, _ = ToyDenoiser.load(path)
    return net


def example_pairs(cfg: RunConfig, env: ToyEnv, seed: int, n: int | None = None) -> list[ExamplePair]:
    """The ``n_examples`` training pairs for ``seed``, drawn from the task generator."""
    d = cfg.doc["data"]
    n = d["n_examples"] if n is None else n
    rng = np.random.default_rng(seed + d["example_seed_offset"])
    before, after = sample_pairs(env.task, env.world, env.codec, n, rng, cfg.doc["world"]["detail_sigma"])
    return [ExamplePair.from_pixels(before[i], after[i], env.codec) for i in range(n)]


def heldout_set(cfg: RunConfig, env: ToyEnv, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    d = cfg.doc["data"]
    n = d["n_heldout"] if n is None else n
    rng = np.random.default_rng(d["heldout_seed"])
    return sample_pairs(env.task, env.world, env.codec, n, rng, cfg.doc["world"]["detail_sigma"])


def optimize(cfg: RunConfig, env: ToyEnv, seed: int, pairs: list[ExamplePair] | None = None) -> tuple[ConditionStack, TrainingLog]:
    pairs = example_pairs(cfg, env, seed) if pairs is None else pairs
    return optimize_steering_condition(pairs, env.denoiser, env.codec, env.sched, cfg.optimizer_config(seed), env.task)


def expected_nfe(opt: OptimizerConfig, sched: NoiseSchedule, correction: CorrectionConfig | None) -> int:
    """Model calls for one edit: inversion, optional correction, then sampling."""
    p = sched.path_index(opt.p_fraction)
    calls = 2 if opt.use_steering else 1
    return p + (correction.iterations * p if correction else 0) + calls * p


@dataclass
class EditOutcome:
    report: MetricsReport
    output: np.ndarray


def evaluate(
    stack: ConditionStack | None,
    before: np.ndarray,
    after: np.ndarray,
    env: ToyEnv,
    opt: OptimizerConfig,
    correction: CorrectionConfig | None = None,
    label: str = "edit",
) -> EditOutcome:
    """Edit every row of ``before`` in one batched pass and score it against ``after``.

    ``stack=None`` means the zero-initialised stack, which reproduces the
    plain reconstruction baseline.
    """
    cfg = env.config
    stack = new_stack(env.denoiser, env.sched, opt) if stack is None else stack
    before = np.asarray(before, dtype=np.float64).reshape(-1, env.codec.d_x)
    after = np.asarray(after, dtype=np.float64).reshape(-1, env.codec.d_x)
    if len(before) != len(after):
        raise ValueError(f"{len(before)} inputs but {len(after)} targets")
    t0 = time.perf_counter()
    if len(before) == 0:
        out = np.zeros((0, env.codec.d_x))
        nfe = expected_nfe(opt, env.sched, correction)
        z_out = z_tgt = np.zeros((0, env.codec.d_z))
    else:
        res = apply_edit(stack, before, env.denoiser, env.codec, env.sched, opt, correction)
        out, nfe = res.output, res.nfe_total
        z_out, z_tgt = res.trajectory.final.data, encode(after, env.codec).data
    report = MetricsReport.from_arrays(out, after, z_out, z_tgt, nfe, cfg.pixel_peak, label)
    report.wall_clock = time.perf_counter() - t0
    return EditOutcome(report, out)


def loss_ratio(log: TrainingLog, tail: int = 10) -> float:
    """Mean total loss over the last ``tail`` iterations relative to iteration 0."""
    totals = log.totals
    if totals.size == 0 or totals[0] == 0:
        return float("nan")
    return float(totals[-tail:].mean() / totals[0])
