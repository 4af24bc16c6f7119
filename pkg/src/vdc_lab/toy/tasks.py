"""Toy editing tasks: pixel-space degradations with known clean targets.

* ``shift``: x + h * 1, a constant offset ("haze").
* ``pattern-add``: x + a * (+1, -1, +1, ...), a fixed high-frequency overlay ("rain").
* ``subspace-collapse``: replace every pixel pair by its average, an
  information-losing projection ("grayscale").
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codec import ToyCodec, pair_bases
from .world import Component, GaussianMixtureWorld, compose

TASK_KINDS = ("shift", "pattern-add", "subspace-collapse")
DEFAULT_MAGNITUDE = {"shift": 0.5, "pattern-add": 0.5, "subspace-collapse": 0.0}


@dataclass(frozen=True, eq=False)
class EditTask:
    kind: str
    d_x: int
    magnitude: float = 0.0
    offset: np.ndarray = field(default=None)  # additive tasks
    projection: np.ndarray = field(default=None)  # collapse task

    def degrade(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.projection is not None:
            return x @ self.projection  # symmetric
        return x + self.offset

    def restore(self, x: np.ndarray) -> np.ndarray:
        """Inverse of ``degrade`` on its range (identity for the projection)."""
        x = np.asarray(x, dtype=np.float64)
        if self.projection is not None:
            return x.copy()
        return x - self.offset

    def latent_map(self, codec: ToyCodec):
        """The degradation seen through the codec, acting on latent row vectors."""
        if self.projection is not None:
            m = codec.A @ self.projection @ codec.A.T
            return lambda z: np.asarray(z) @ m.T
        shift = codec.A @ self.offset
        return lambda z: np.asarray(z) + shift


def make_task(kind: str, d_x: int = 16, magnitude: float | None = None) -> EditTask:
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    mag = DEFAULT_MAGNITUDE[kind] if magnitude is None else float(magnitude)
    if kind == "shift":
        return EditTask(kind, d_x, mag, offset=np.full(d_x, mag))
    if kind == "pattern-add":
        return EditTask(kind, d_x, mag, offset=mag * np.where(np.arange(d_x) % 2 == 0, 1.0, -1.0))
    avg, _ = pair_bases(d_x)
    return EditTask(kind, d_x, mag, projection=avg.T @ avg)


def make_edit_task(
    kind: str, world: GaussianMixtureWorld, codec: ToyCodec, magnitude: float | None = None
) -> tuple[GaussianMixtureWorld, EditTask]:
    """Degraded counterpart of ``world`` plus the task that produced it.

    Component means are pushed through the latent view of the degradation;
    sigmas are kept, which is exact for the offsets and an isotropic
    stand-in for the projection.
    """
    task = make_task(kind, codec.d_x, magnitude)
    fmap = task.latent_map(codec)
    comps = tuple(Component(c.weight, fmap(c.mean[None])[0], c.sigma) for c in world.components)
    return GaussianMixtureWorld(comps), task


def make_world(
    weights: Sequence[float] = (0.25, 0.25, 0.25, 0.25),
    d_z: int = 8,
    n_detail: int = 3,
    sigma: float = 0.3,
    mean_scale: float = 1.5,
    detail_scale: float = 1.5,
    seed: int = 0,
) -> GaussianMixtureWorld:
    """Clean world: coarse latents spread per component, detail latents shared.

    All components share one texture: mean ``detail_scale`` on the first
    detail latent (the alternating image under ``make_codec``) and zero on
    the others. The information removed by pair averaging is then
    predictable from the data prior and unchanged by even rolls.
    """
    rng = np.random.default_rng(seed)
    k = len(weights)
    means = np.empty((k, d_z))
    means[:, : d_z - n_detail] = mean_scale * rng.standard_normal((k, d_z - n_detail))
    means[:, d_z - n_detail :] = 0.0
    if n_detail:
        means[:, d_z - n_detail] = detail_scale
    return GaussianMixtureWorld.from_arrays(weights, means, sigma)


def training_world(world: GaussianMixtureWorld, codec: ToyCodec, kinds: Sequence[str] = TASK_KINDS) -> GaussianMixtureWorld:
    """Clean world plus one degraded copy per task, equally weighted."""
    worlds = [world] + [make_edit_task(kind, world, codec)[0] for kind in kinds]
    return compose(worlds, [1.0] * len(worlds))


def make_class_conditions(n_content: int, N: int, d_c: int, seed: int = 0, n_kinds: int = 0) -> np.ndarray:
    """Token matrices for the components of ``training_world``, shape (n_content * (1 + n_kinds), N, d_c).

    Each condition is a content token matrix plus a degradation token matrix;
    clean components use a zero degradation token. Ordering follows
    ``training_world``: all clean components first, then one block per kind.
    """
    rng = np.random.default_rng(seed)
    content = rng.standard_normal((n_content, N, d_c))
    kinds = np.concatenate([np.zeros((1, N, d_c)), rng.standard_normal((n_kinds, N, d_c))])
    return (kinds[:, None] + content[None]).reshape(-1, N, d_c)


def sample_pixels(world: GaussianMixtureWorld, codec: ToyCodec, n: int, rng: np.random.Generator, detail_sigma: float = 0.05):
    """Clean pixel images: decoded world samples plus small detail the codec cannot see."""
    z, labels = world.sample(n, rng)
    null = codec.null_basis()
    x = z @ codec.A + detail_sigma * rng.standard_normal((n, null.shape[0])) @ null
    return x, labels


def sample_pairs(task: EditTask, world: GaussianMixtureWorld, codec: ToyCodec, n: int, rng: np.random.Generator, detail_sigma: float = 0.05):
    """(degraded, clean) pixel arrays of shape (n, d_x)."""
    clean, _ = sample_pixels(world, codec, n, rng, detail_sigma)
    return task.degrade(clean), clean
