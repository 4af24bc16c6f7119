"""Condition generators: small MLPs over Fourier-embedded token indices.

A generator maps the normalised index ``n / N`` of every token to that
token's ``d_c``-dimensional vector, so a whole ``N x d_c`` condition comes out
of one coordinate network and tokens share parameters.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .autodiff import Tensor, matmul, tanh

SETUPS = ("per-step-independent", "single-shared", "single-step-conditioned", "per-step-tokens", "per-step-text-init")


class UnsupportedSetupError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FourierFeatureMap:
    frequencies: np.ndarray  # (n_freq,)

    @classmethod
    def log_spaced(cls, n_freq: int = 6) -> "FourierFeatureMap":
        if n_freq < 1:
            raise ValueError("n_freq must be positive")
        return cls(2.0 ** np.arange(n_freq))

    @property
    def n_freq(self) -> int:
        return len(self.frequencies)

    @property
    def out_dim(self) -> int:
        return 2 * self.n_freq

    def __call__(self, x) -> np.ndarray:
        """[sin(2 pi B x), cos(2 pi B x)] for scalar or array ``x``; shape (..., 2 n_freq)."""
        arg = 2 * np.pi * np.asarray(x, dtype=np.float64)[..., None] * self.frequencies
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def fourier_embed(index: int, N: int, fmap: FourierFeatureMap) -> np.ndarray:
    if not 1 <= index <= N:
        raise IndexError(f"token index {index} outside [1, {N}]")
    return fmap(index / N)


class ConditionGenerator:
    """Three fully connected layers (tanh, tanh, linear); the last starts at zero."""

    def __init__(self, in_dim: int, hidden: int, d_c: int, rng: np.random.Generator):
        self.params = {
            "W1": Tensor(rng.standard_normal((in_dim, hidden)) / math.sqrt(in_dim), requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "W2": Tensor(rng.standard_normal((hidden, hidden)) / math.sqrt(hidden), requires_grad=True),
            "b2": Tensor(np.zeros(hidden), requires_grad=True),
            "W3": Tensor(np.zeros((hidden, d_c)), requires_grad=True),
            "b3": Tensor(np.zeros(d_c), requires_grad=True),
        }

    def __call__(self, inputs: np.ndarray) -> Tensor:
        p = self.params
        h = tanh(matmul(inputs, p["W1"]) + p["b1"])
        h = tanh(matmul(h, p["W2"]) + p["b2"])
        return matmul(h, p["W3"]) + p["b3"]

    @property
    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())


class TokenTable:
    """Free ``N x d_c`` token matrix, used when the generator is switched off."""

    def __init__(self, N: int, d_c: int):
        self.params = {"tokens": Tensor(np.zeros((N, d_c)), requires_grad=True)}

    def __call__(self, inputs) -> Tensor:
        return self.params["tokens"]

    @property
    def n_params(self) -> int:
        return self.params["tokens"].data.size


@dataclass(eq=False)
class ConditionStack:
    setup: str
    p: int
    N: int
    d_c: int
    hidden: int
    fmap: FourierFeatureMap
    seed: int
    generators: list = field(default_factory=list)

    def parameters(self) -> dict[str, Tensor]:
        return {f"g{i}.{name}": t for i, g in enumerate(self.generators) for name, t in g.params.items()}

    @property
    def n_params(self) -> int:
        return sum(g.n_params for g in self.generators)

    def manifest(self) -> dict:
        return {
            "kind": "condition-stack",
            "setup": self.setup,
            "p": self.p,
            "N": self.N,
            "d_c": self.d_c,
            "hidden": self.hidden,
            "seed": self.seed,
            "frequencies": self.fmap.frequencies.tolist(),
            "n_params_total": self.n_params,
            "n_params_per_generator": self.generators[0].n_params,
        }

    def save(self, directory: str | os.PathLike) -> Path:
        tensors = {name: t.data for name, t in self.parameters().items()}
        return io.save_bundle(directory, tensors, self.manifest())

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "ConditionStack":
        tensors, m = io.load_bundle(directory)
        stack = init_stack(m["setup"], m["p"], m["N"], m["d_c"], m["seed"], hidden=m["hidden"], n_freq=len(m["frequencies"]))
        for name, t in stack.parameters().items():
            t.data = tensors[name].copy()
        return stack

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}


def init_stack(setup: str, p: int, N: int, d_c: int, seed: int, hidden: int = 32, n_freq: int = 6) -> ConditionStack:
    """Seeded stack whose every emitted condition starts as the all-zero null condition."""
    if setup == "per-step-text-init":
        raise UnsupportedSetupError("setup 'per-step-text-init' is unsupported: it needs a text encoder")
    if setup not in SETUPS:
        raise ValueError(f"unknown setup {setup!r}; expected one of {SETUPS}")
    if p < 1 or N < 1 or d_c < 1:
        raise ValueError("p, N and d_c must be positive")
    fmap = FourierFeatureMap.log_spaced(n_freq)
    stack = ConditionStack(setup, p, N, d_c, hidden, fmap, seed)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(p)]
    if setup == "per-step-independent":
        stack.generators = [ConditionGenerator(fmap.out_dim, hidden, d_c, rng) for rng in rngs]
    elif setup == "per-step-tokens":
        stack.generators = [TokenTable(N, d_c) for _ in range(p)]
    else:
        in_dim = fmap.out_dim * (2 if setup == "single-step-conditioned" else 1)
        stack.generators = [ConditionGenerator(in_dim, hidden, d_c, rngs[0])]
    return stack


def _token_inputs(stack: ConditionStack, t: int) -> np.ndarray:
    idx = np.arange(1, stack.N + 1) / stack.N
    feats = stack.fmap(idx)
    if stack.setup == "single-step-conditioned":
        step = np.broadcast_to(stack.fmap(t / stack.p), feats.shape)
        feats = np.concatenate([feats, step], axis=1)
    return feats


def generate_condition(stack: ConditionStack, t: int) -> Tensor:
    """Condition for step ``t`` of the active path (1 is the last step before the clean latent)."""
    if not 1 <= t <= stack.p:
        raise IndexError(f"path step {t} outside [1, {stack.p}]")
    if stack.setup in ("per-step-independent", "per-step-tokens"):
        gen = stack.generators[t - 1]
    else:
        gen = stack.generators[0]
    return gen(_token_inputs(stack, t))


def dump_conditions(stack: ConditionStack, directory: str | os.PathLike) -> list[Path]:
    """Write every step's condition as ``step_XX.vdct`` plus a small manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(stack.p)))
    paths = []
    for t in range(1, stack.p + 1):
        paths.append(io.write_tensor(directory / f"step_{t:0{width}d}.vdct", generate_condition(stack, t).data))
    io.write_json(
        directory / "conditions.json",
        {"setup": stack.setup, "p": stack.p, "N": stack.N, "d_c": stack.d_c, "files": [p.name for p in paths]},
    )
    return paths
