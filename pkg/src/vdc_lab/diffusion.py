"""Noise schedules, forward noising, deterministic DDIM stepping and inversion.

Timesteps are raw training indices in ``[0, T_train]``; ``alpha_bars[0] == 1``.
Paths are addressed by a *path index* into the grid ``(0, *sample_steps)``:
index 0 is the clean latent, index ``K`` the last training step.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import io
from .autodiff import ShapeError, Tensor, as_tensor

Denoiser = Callable[[Tensor, int, "Tensor | None"], Tensor]


class StepError(ValueError):
    """Invalid pair of timesteps for a DDIM move."""


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray
    sample_steps: tuple[int, ...]

    @property
    def T_train(self) -> int:
        return len(self.betas)

    @property
    def K(self) -> int:
        return len(self.sample_steps)

    @property
    def grid(self) -> tuple[int, ...]:
        return (0, *self.sample_steps)

    def timestep(self, path_index: int) -> int:
        if not 0 <= path_index <= self.K:
            raise IndexError(f"path index {path_index} outside [0, {self.K}]")
        return self.grid[path_index]

    def path_index(self, fraction: float) -> int:
        """Number of trailing sampling steps covering ``fraction`` of the path."""
        return max(1, int(round(fraction * self.K)))

    @classmethod
    def from_betas(cls, betas, K: int | None = None) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        T = len(betas)
        if T < 1 or np.any(betas < 0) or np.any(betas >= 1):
            raise ValueError("betas must be non-empty and lie in [0, 1)")
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        K = T if K is None else K
        if not 1 <= K <= T:
            raise ValueError(f"K={K} must lie in [1, {T}]")
        steps = tuple(int(round(i * T / K)) for i in range(1, K + 1))
        return cls(betas, alpha_bars, steps)


def make_schedule(T_train: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2, K: int = 100) -> NoiseSchedule:
    """Linear betas over ``T_train`` steps and ``K`` evenly spaced sampling steps."""
    if T_train < 1:
        raise ValueError("T_train must be positive")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 <= K <= T_train:
        raise ValueError(f"K={K} must lie in [1, {T_train}]")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T_train), K)


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 0 <= t <= sched.T_train:
        raise IndexError(f"timestep {t} outside [0, {sched.T_train}]")


def forward_noise(z0, t: int, eps, sched: NoiseSchedule) -> Tensor:
    """sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    z0, eps = as_tensor(z0), as_tensor(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"forward_noise: z0 {z0.shape} vs eps {eps.shape}")
    _check_t(t, sched)
    a = sched.alpha_bars[t]
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps


def ddim_coefficients(a_from: float, a_to: float) -> tuple[float, float]:
    """(c_z, c_eps) with z_to = c_z * z_from + c_eps * eps for an eta=0 DDIM move."""
    c_z = math.sqrt(a_to / a_from)
    return c_z, math.sqrt(1.0 - a_to) - c_z * math.sqrt(1.0 - a_from)


def ddim_update(z, eps, a_from: float, a_to: float) -> Tensor:
    c_z, c_eps = ddim_coefficients(a_from, a_to)
    return c_z * as_tensor(z) + c_eps * as_tensor(eps)


def _check_move(t_high: int, t_low: int, sched: NoiseSchedule, skip: bool) -> None:
    grid = sched.grid
    if t_high not in grid or t_low not in grid:
        raise StepError(f"timesteps ({t_high}, {t_low}) must lie on the sampling grid")
    if t_low >= t_high:
        raise StepError(f"expected t_low < t_high, got {t_low} >= {t_high}")
    if not skip and grid.index(t_high) - grid.index(t_low) != 1:
        raise StepError(f"{t_high} -> {t_low} skips grid points; pass skip=True to allow it")


def ddim_step(z_t, t_from: int, t_to: int, eps_hat, sched: NoiseSchedule, skip: bool = False) -> Tensor:
    """Deterministic move from ``t_from`` down to ``t_to`` given the noise estimate."""
    _check_move(t_from, t_to, sched, skip)
    z_t, eps_hat = as_tensor(z_t), as_tensor(eps_hat)
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"ddim_step: z {z_t.shape} vs eps {eps_hat.shape}")
    return ddim_update(z_t, eps_hat, sched.alpha_bars[t_from], sched.alpha_bars[t_to])


def ddim_invert_step(
    z_low,
    t_from: int,
    t_to: int,
    eps_provider: Denoiser,
    condition,
    sched: NoiseSchedule,
    skip: bool = False,
) -> Tensor:
    """Move up from ``t_from`` to ``t_to`` by solving the DDIM step for the upper latent.

    The noise is predicted from the lower latent at the upper timestep,
    i.e. the upper latent is assumed close enough to the lower one to share
    its prediction. For noise predictions that do not depend on the latent,
    ``ddim_step`` undoes this move exactly.
    """
    _check_move(t_to, t_from, sched, skip)
    z_low = as_tensor(z_low)
    eps = eps_provider(z_low, t_to, condition)
    c_z, c_eps = ddim_coefficients(sched.alpha_bars[t_to], sched.alpha_bars[t_from])
    return (z_low - c_eps * eps) / c_z


class Guidance(Protocol):
    """Noise estimate used by the sampler; ``nfe`` counts denoiser calls so far."""

    nfe: int

    def __call__(self, z: Tensor, t: int, step_in_path: int) -> Tensor: ...


@dataclass
class Trajectory:
    latents: list[tuple[int, Tensor]] = field(default_factory=list)
    nfe_count: int = 0

    @property
    def timesteps(self) -> list[int]:
        return [t for t, _ in self.latents]

    @property
    def final(self) -> Tensor:
        return self.latents[-1][1]

    def save(self, directory: str | os.PathLike) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, (_, z) in enumerate(self.latents):
            io.write_tensor(directory / f"latent_{i:04d}.vdct", z.data)
        io.write_json(directory / "trajectory.json", {"timesteps": self.timesteps, "nfe_count": self.nfe_count})
        return directory

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "Trajectory":
        directory = Path(directory)
        meta = json.loads((directory / "trajectory.json").read_text())
        latents = [
            (t, Tensor(io.read_tensor(directory / f"latent_{i:04d}.vdct"))) for i, t in enumerate(meta["timesteps"])
        ]
        return cls(latents, meta["nfe_count"])


def ddim_sample(z_p, p_index: int, guidance: Guidance, sched: NoiseSchedule) -> Trajectory:
    """Run the sampler from grid point ``p_index`` down to the clean latent.

    ``step_in_path`` handed to the guidance runs p_index, ..., 1.
    """
    z = as_tensor(z_p)
    t = sched.timestep(p_index)
    traj = Trajectory([(t, z)])
    start = guidance.nfe
    for i in range(p_index, 0, -1):
        t_from, t_to = sched.grid[i], sched.grid[i - 1]
        eps = guidance(z, t_from, i)
        z = ddim_step(z, t_from, t_to, eps, sched)
        traj.latents.append((t_to, z))
    traj.nfe_count = guidance.nfe - start
    return traj


def ddim_invert(z0, p_index: int, sched: NoiseSchedule, denoiser: Denoiser, null_condition) -> Trajectory:
    """Naive DDIM inversion of ``z0`` up to grid point ``p_index`` under the null condition."""
    sched.timestep(p_index)
    calls = 0

    def counted(z, t, c):
        nonlocal calls
        calls += 1
        return denoiser(z, t, c)

    z = as_tensor(z0)
    traj = Trajectory([(0, z)])
    for i in range(p_index):
        t_from, t_to = sched.grid[i], sched.grid[i + 1]
        z = ddim_invert_step(z, t_from, t_to, counted, null_condition, sched)
        traj.latents.append((t_to, z))
    traj.nfe_count = calls
    return traj


class CountingDenoiser:
    """Wraps a denoiser and counts its invocations."""

    def __init__(self, denoiser: Denoiser):
        self.denoiser = denoiser
        self.calls = 0

    def __call__(self, z, t, condition=None):
        self.calls += 1
        return self.denoiser(z, t, condition)

    def __getattr__(self, name):
        return getattr(self.denoiser, name)
