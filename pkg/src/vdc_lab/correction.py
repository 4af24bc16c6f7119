"""Refining a DDIM-inverted latent so that its forward rollout reproduces the input.

Starting from the naive inversion ``z_p`` of ``z0``, each iteration runs the
unconditional sampler from ``z_p`` back to a clean latent, measures the
squared reconstruction error against ``z0`` and takes an Adam step on
``z_p`` itself. Rows of a batch are optimized independently.
"""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor, backward, squared_l2
from .diffusion import NoiseSchedule, ddim_invert, ddim_sample
from .optim import AdamState, adam_step
from .steering import UnconditionalGuidance


@dataclass(frozen=True)
class CorrectionConfig:
    iterations: int = 200
    lr: float = 1e-2
    optimizer: str = "adam"
    keep_best: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class CorrectionResult:
    z_p: np.ndarray
    z_naive: np.ndarray
    initial_mse: np.ndarray  # per row; nan when no iteration ran
    final_mse: np.ndarray  # per row, of the returned iterate; nan when it was never rolled out
    mse_log: list[np.ndarray] = field(default_factory=list)  # per iteration, per row
    nfe_inversion: int = 0
    nfe_correction: int = 0

    def log_csv(self) -> str:
        """iteration, mean mse across rows, running NFE total (inversion included)."""
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("iteration", "mse", "nfe_running_total"))
        p = self.nfe_inversion
        per_iter = self.nfe_correction // max(len(self.mse_log), 1)
        for i, mse in enumerate(self.mse_log):
            w.writerow((i, repr(float(np.mean(mse))), p + (i + 1) * per_iter))
        return buf.getvalue()


def correct_inversion(
    z0,
    p_index: int,
    denoiser,
    null_condition,
    sched: NoiseSchedule,
    config: CorrectionConfig,
    initial: np.ndarray | None = None,
) -> CorrectionResult:
    """Refine the naive inversion of a latent, or of a batch of latents (rows).

    ``initial`` may carry an already computed naive inversion, which then
    does not count towards the NFE total.
    """
    z0 = np.asarray(getattr(z0, "data", z0), dtype=np.float64)
    nfe_inv = 0
    if initial is None:
        inv = ddim_invert(z0, p_index, sched, denoiser, null_condition)
        initial, nfe_inv = inv.final.data, inv.nfe_count
    z_naive = np.array(initial, dtype=np.float64)
    param = {"z_p": Tensor(z_naive.copy(), requires_grad=True)}
    state = AdamState()
    best = z_naive.copy()
    best_mse = np.full(np.atleast_1d(z_naive[..., 0]).shape, np.inf)
    mse_log = []
    nfe = 0
    initial_mse = None
    for it in range(config.iterations):
        guidance = UnconditionalGuidance(denoiser, null_condition)
        with Tape() as tape:
            z_hat = ddim_sample(param["z_p"], p_index, guidance, sched).final
            loss = squared_l2(z_hat - z0)
        nfe += guidance.nfe
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"inversion correction loss is non-finite at iteration {it}")
        mse = np.atleast_1d(((z_hat.data - z0) ** 2).mean(axis=-1))
        if initial_mse is None:
            initial_mse = mse.copy()
        mse_log.append(mse)
        improved = mse < best_mse
        best_mse = np.where(improved, mse, best_mse)
        cur = param["z_p"].data
        best = np.where(improved[:, None], cur, best) if cur.ndim == 2 else (cur.copy() if improved[0] else best)
        grads = backward(loss, tape, param)
        adam_step(param, grads, state, config.lr)

    if initial_mse is None:
        unknown = np.full(best_mse.shape, np.nan)
        return CorrectionResult(z_naive, z_naive, unknown, unknown, [], nfe_inv, 0)
    if config.keep_best:
        z_out, final = best, best_mse
    else:
        z_out, final = param["z_p"].data.copy(), np.full_like(best_mse, np.nan)
    return CorrectionResult(z_out, z_naive, initial_mse, final, mse_log, nfe_inv, nfe)
