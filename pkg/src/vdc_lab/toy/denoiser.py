"""Small conditional noise-prediction network and its training loop."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import io
from ..autodiff import NonFiniteError, Tape, Tensor, as_tensor, backward, matmul, mean, scale, squared_l2, tanh
from ..diffusion import NoiseSchedule
from ..optim import AdamState, adam_step
from .world import GaussianMixtureWorld, analytic_eps

log = logging.getLogger(__name__)


def time_embedding(t, width: int = 16) -> np.ndarray:
    """Sinusoidal embedding of raw training timesteps; shape (..., width)."""
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


@dataclass(frozen=True)
class DenoiserConfig:
    d_z: int = 8
    N: int = 8
    d_c: int = 8
    hidden: int = 128
    depth: int = 3
    time_dim: int = 16
    d_pool: int = 16
    steps: int = 20000
    batch_size: int = 256
    lr: float = 1e-3
    cond_dropout: float = 0.5
    t_low_fraction: float = 0.5
    t_low_max: int = 200
    seed: int = 17


class ToyDenoiser:
    """eps(z, t, C): MLP over the latent, a time embedding and mean-pooled condition tokens.

    The first layer is a sum of three matmuls, which is the same as one
    matmul over the concatenated inputs. The all-zero condition pools to
    zero and acts as the null condition.
    """

    def __init__(self, config: DenoiserConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params(config)

    @staticmethod
    def _init_params(cfg: DenoiserConfig) -> dict[str, Tensor]:
        rng = np.random.default_rng(cfg.seed)

        def dense(n_in, n_out, gain=1.0):
            return Tensor(gain * rng.standard_normal((n_in, n_out)) / math.sqrt(n_in))

        p = {
            "pool": dense(cfg.d_c, cfg.d_pool),
            "in_z": dense(cfg.d_z, cfg.hidden),
            "in_t": dense(cfg.time_dim, cfg.hidden),
            "in_c": dense(cfg.d_pool, cfg.hidden),
            "b0": Tensor(np.zeros(cfg.hidden)),
        }
        for i in range(1, cfg.depth):
            p[f"W{i}"] = dense(cfg.hidden, cfg.hidden)
            p[f"b{i}"] = Tensor(np.zeros(cfg.hidden))
        p["out"] = dense(cfg.hidden, cfg.d_z, gain=0.1)
        p["b_out"] = Tensor(np.zeros(cfg.d_z))
        return p

    @classmethod
    def zeros(cls, config: DenoiserConfig) -> "ToyDenoiser":
        net = cls(config)
        for p in net.params.values():
            p.data = np.zeros_like(p.data)
        return net

    def null_condition(self) -> Tensor:
        return Tensor(np.zeros((self.config.N, self.config.d_c)))

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def _trunk(self, z: Tensor, temb, cond_mean) -> Tensor:
        p = self.params
        h = matmul(z, p["in_z"]) + matmul(temb, p["in_t"])
        h = h + matmul(matmul(cond_mean, p["pool"]), p["in_c"])
        h = tanh(h + p["b0"])
        for i in range(1, self.config.depth):
            h = tanh(matmul(h, p[f"W{i}"]) + p[f"b{i}"])
        return matmul(h, p["out"]) + p["b_out"]

    def __call__(self, z, t: int, condition=None) -> Tensor:
        z = as_tensor(z)
        if z.shape[-1] != self.config.d_z:
            raise ValueError(f"latent has trailing extent {z.shape[-1]}, expected {self.config.d_z}")
        temb = time_embedding(t, self.config.time_dim)
        if condition is None:
            cond_mean = np.zeros(self.config.d_c)
        else:
            condition = as_tensor(condition)
            if condition.shape != (self.config.N, self.config.d_c):
                raise ValueError(f"condition shape {condition.shape} != {(self.config.N, self.config.d_c)}")
            cond_mean = mean(condition, axis=0)
        return self._trunk(z, temb, cond_mean)

    def forward_batch(self, z, t: np.ndarray, cond_mean: np.ndarray) -> Tensor:
        """Per-sample timesteps ``t`` (n,) and token-mean conditions (n, d_c)."""
        return self._trunk(as_tensor(z), time_embedding(t, self.config.time_dim), cond_mean)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def save(self, directory: str | os.PathLike, extra: dict | None = None) -> Path:
        return io.save_bundle(directory, self.state_dict(), {"kind": "toy-denoiser", "config": asdict(self.config), **(extra or {})})

    @classmethod
    def load(cls, directory: str | os.PathLike) -> tuple["ToyDenoiser", dict]:
        tensors, manifest = io.load_bundle(directory)
        config = DenoiserConfig(**manifest["config"])
        params = {k: Tensor(tensors[k]) for k in cls._init_params(config)}
        return cls(config, params), manifest


def _sample_timesteps(cfg: DenoiserConfig, n: int, T: int, rng: np.random.Generator) -> np.ndarray:
    t = rng.integers(1, T + 1, size=n)
    low = rng.random(n) < cfg.t_low_fraction
    t[low] = rng.integers(1, min(cfg.t_low_max, T) + 1, size=int(low.sum()))
    return t


def train_toy_denoiser(
    world: GaussianMixtureWorld,
    sched: NoiseSchedule,
    config: DenoiserConfig,
    class_conditions: np.ndarray,
    log_every: int = 0,
) -> tuple[ToyDenoiser, list[float]]:
    """Denoising score matching on world samples with condition dropout.

    Each sample is conditioned on its component's class tokens, replaced by
    the all-zero null condition with probability ``cond_dropout``. Returns the
    network (frozen) and the per-step loss history.
    """
    if len(class_conditions) != len(world):
        raise ValueError("need exactly one class condition per world component")
    rng = np.random.default_rng(config.seed + 1)
    net = ToyDenoiser(config)
    net.set_trainable(True)
    class_means = class_conditions.mean(axis=1)
    sqrt_ab = np.sqrt(sched.alpha_bars)
    sqrt_1m = np.sqrt(1.0 - sched.alpha_bars)
    state = AdamState()
    history = []
    n = config.batch_size
    for step in range(config.steps):
        x0, labels = world.sample(n, rng)
        t = _sample_timesteps(config, n, sched.T_train, rng)
        eps = rng.standard_normal(x0.shape)
        zt = sqrt_ab[t, None] * x0 + sqrt_1m[t, None] * eps
        keep = rng.random(n) >= config.cond_dropout
        cond = np.where(keep[:, None], class_means[labels], 0.0)
        with Tape() as tape:
            pred = net.forward_batch(zt, t, cond)
            loss = scale(squared_l2(pred - eps), 1.0 / eps.size)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"denoiser training loss is non-finite at step {step}")
        history.append(value)
        grads = backward(loss, tape, net.params)
        adam_step(net.params, grads, state, config.lr)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, value)
    net.set_trainable(False)
    return net, history


def oracle_mse(
    net: ToyDenoiser,
    world: GaussianMixtureWorld,
    sched: NoiseSchedule,
    class_conditions: np.ndarray | None,
    n: int = 10_000,
    seed: int = 12345,
    t_max: int | None = None,
) -> dict[str, float]:
    """Mean squared gap between the network and the analytic oracle on held-out (z, t).

    Reports the unconditional gap, the class-conditional gap (when class
    conditions are given) and the zero-network reference E|eps*|^2, all as
    per-coordinate means.
    """
    rng = np.random.default_rng(seed)
    x0, labels = world.sample(n, rng)
    t = rng.integers(1, (t_max or sched.T_train) + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    zt = np.sqrt(sched.alpha_bars[t, None]) * x0 + np.sqrt(1.0 - sched.alpha_bars[t, None]) * eps
    out = {"uncond": 0.0, "cond": 0.0, "zero_net": 0.0}
    for tt in np.unique(t):
        idx = np.flatnonzero(t == tt)
        target = analytic_eps(zt[idx], int(tt), world, sched)
        pred = net.forward_batch(zt[idx], np.full(len(idx), tt), np.zeros((len(idx), net.config.d_c))).data
        out["uncond"] += ((pred - target) ** 2).sum()
        out["zero_net"] += (target**2).sum()
        if class_conditions is not None:
            for k in np.unique(labels[idx]):
                sub = idx[labels[idx] == k]
                target_k = analytic_eps(zt[sub], int(tt), world.restrict(int(k)), sched)
                cm = np.broadcast_to(class_conditions[k].mean(axis=0), (len(sub), net.config.d_c))
                pred_k = net.forward_batch(zt[sub], np.full(len(sub), tt), cm).data
                out["cond"] += ((pred_k - target_k) ** 2).sum()
    denom = x0.size
    if class_conditions is None:
        del out["cond"]
    return {k: float(v / denom) for k, v in out.items()}
