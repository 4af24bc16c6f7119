"""Isotropic Gaussian-mixture data worlds with closed-form denoising oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from ..autodiff import Tensor
from ..diffusion import NoiseSchedule


class DegenerateQueryError(ValueError):
    """The oracle was asked about a noise level where the posterior is undefined."""


@dataclass(frozen=True, eq=False)
class Component:
    weight: float
    mean: np.ndarray
    sigma: float


@dataclass(frozen=True, eq=False)
class GaussianMixtureWorld:
    components: tuple[Component, ...]

    def __post_init__(self):
        if not self.components:
            raise ValueError("a world needs at least one component")
        dims = {c.mean.shape for c in self.components}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ValueError(f"component means must be vectors of one common length, got {dims}")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"component weights sum to {total!r}, not 1")
        for c in self.components:
            if not 0 < c.weight <= 1:
                raise ValueError(f"component weight {c.weight} outside (0, 1]")
            if c.sigma < 0:
                raise ValueError(f"negative sigma {c.sigma}")

    @classmethod
    def from_arrays(cls, weights: Sequence[float], means, sigmas) -> "GaussianMixtureWorld":
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (len(means),))
        return cls(tuple(Component(float(w), m.copy(), float(s)) for w, m, s in zip(weights, means, sigmas)))

    @property
    def dim(self) -> int:
        return self.components[0].mean.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([c.sigma for c in self.components])

    def __len__(self) -> int:
        return len(self.components)

    def restrict(self, k: int) -> "GaussianMixtureWorld":
        c = self.components[k]
        return GaussianMixtureWorld((Component(1.0, c.mean, c.sigma),))

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        w, mu, s = self.weights, self.means, self.sigmas
        centered = mu - self.mean()
        return (w[:, None] * centered).T @ centered + np.eye(self.dim) * float(w @ s**2)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` points; returns (samples, component labels)."""
        labels = rng.choice(len(self), size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[labels] + self.sigmas[labels, None] * noise, labels


def compose(worlds: Sequence[GaussianMixtureWorld], weights: Sequence[float]) -> GaussianMixtureWorld:
    """Mixture of worlds; component order follows ``worlds``."""
    comps = []
    for world, w in zip(worlds, weights):
        comps.extend(Component(w * c.weight, c.mean, c.sigma) for c in world.components)
    total = sum(c.weight for c in comps)
    return GaussianMixtureWorld(tuple(Component(c.weight / total, c.mean, c.sigma) for c in comps))


def _posterior_terms(z: np.ndarray, t: int, world: GaussianMixtureWorld, sched: NoiseSchedule):
    if not 1 <= t <= sched.T_train:
        raise IndexError(f"timestep {t} outside [1, {sched.T_train}]")
    a = sched.alpha_bars[t]
    if 1.0 - a <= 0.0:
        raise DegenerateQueryError(f"alpha_bar at t={t} equals 1; the noise prediction is undefined")
    sa = math.sqrt(a)
    mu, sig2 = world.means, world.sigmas**2
    var = a * sig2 + (1.0 - a)  # (k,)
    diff = z[:, None, :] - sa * mu[None]  # (n, k, d)
    log_r = np.log(world.weights) - 0.5 * (diff**2).sum(-1) / var - 0.5 * world.dim * np.log(2 * np.pi * var)
    r = np.exp(log_r - logsumexp(log_r, axis=1, keepdims=True))
    gain = sa * sig2 / var
    post_means = mu[None] + gain[None, :, None] * diff
    return a, r, diff, var, gain, post_means


def posterior_mean(z, t: int, world: GaussianMixtureWorld, sched: NoiseSchedule) -> np.ndarray:
    """E[x0 | z_t = z] under the mixture."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    flat = np.atleast_2d(z)
    _, r, _, _, _, pm = _posterior_terms(flat, t, world, sched)
    return np.einsum("nk,nkd->nd", r, pm).reshape(z.shape)


def analytic_eps(z, t: int, world: GaussianMixtureWorld, sched: NoiseSchedule) -> np.ndarray:
    """Exact E[eps | z_t = z] for the forward process z_t = sqrt(a) x0 + sqrt(1-a) eps."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    x0 = posterior_mean(z, t, world, sched)
    a = sched.alpha_bars[t]
    return (z - math.sqrt(a) * x0) / math.sqrt(1.0 - a)


def analytic_eps_jacobian(z, t: int, world: GaussianMixtureWorld, sched: NoiseSchedule) -> np.ndarray:
    """d analytic_eps / dz, shape (n, d, d) for a batch of n latents (or (d, d))."""
    z = np.asarray(z, dtype=np.float64)
    flat = np.atleast_2d(z)
    a, r, diff, var, gain, pm = _posterior_terms(flat, t, world, sched)
    score = -diff / var[None, :, None]  # d log N_k / dz
    centered = score - np.einsum("nk,nkd->nd", r, score)[:, None, :]
    d = world.dim
    jac_x0 = np.einsum("nk,k->n", r, gain)[:, None, None] * np.eye(d)
    jac_x0 = jac_x0 + np.einsum("nk,nki,nkj->nij", r, pm, centered)
    jac = (np.eye(d) - math.sqrt(a) * jac_x0) / math.sqrt(1.0 - a)
    return jac if z.ndim == 2 else jac[0]


class AnalyticDenoiser:
    """Denoiser interface backed by the closed-form oracle.

    ``class_conditions[k]`` selects component ``k``; ``None`` or an all-zero
    condition means the full mixture.
    """

    def __init__(self, world: GaussianMixtureWorld, sched: NoiseSchedule, class_conditions=None):
        self.world = world
        self.sched = sched
        self.class_conditions = None if class_conditions is None else np.asarray(class_conditions)

    def __call__(self, z, t: int, condition=None) -> Tensor:
        world = self.world
        if condition is not None:
            c = condition.data if isinstance(condition, Tensor) else np.asarray(condition)
            if np.any(c != 0):
                matches = [k for k, cc in enumerate(self.class_conditions) if np.array_equal(cc, c)]
                if not matches:
                    raise KeyError("condition does not match any class of this world")
                world = world.restrict(matches[0])
        return Tensor(analytic_eps(z, t, world, self.sched))
