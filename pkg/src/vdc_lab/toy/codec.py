"""Linear encoder/decoder pair with orthonormal rows.

``encode(x) = A x`` and ``decode(z) = A^T z``; with fewer latent than pixel
dimensions the round trip is the orthogonal projection onto the row span.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space

from ..autodiff import ShapeError, Tensor, as_tensor, matmul


@dataclass(frozen=True, eq=False)
class ToyCodec:
    A: np.ndarray  # (d_z, d_x)

    def __post_init__(self):
        if self.A.ndim != 2 or self.A.shape[0] > self.A.shape[1]:
            raise ValueError(f"codec matrix must be d_z x d_x with d_z <= d_x, got {self.A.shape}")
        if not np.allclose(self.A @ self.A.T, np.eye(self.A.shape[0]), atol=1e-10):
            raise ValueError("codec rows are not orthonormal")

    @property
    def d_z(self) -> int:
        return self.A.shape[0]

    @property
    def d_x(self) -> int:
        return self.A.shape[1]

    def null_basis(self) -> np.ndarray:
        """Orthonormal rows spanning the pixel directions the encoder discards."""
        return null_space(self.A).T

    @classmethod
    def random(cls, d_x: int, d_z: int, seed: int = 0) -> "ToyCodec":
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((d_x, d_z)))
        return cls(q.T.copy())


def pair_bases(d_x: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal bases of pair averages and pair differences over (2i, 2i+1)."""
    if d_x % 2:
        raise ValueError("pixel dimension must be even")
    half = d_x // 2
    avg = np.zeros((half, d_x))
    dif = np.zeros((half, d_x))
    for i in range(half):
        avg[i, 2 * i] = avg[i, 2 * i + 1] = 1 / np.sqrt(2)
        dif[i, 2 * i], dif[i, 2 * i + 1] = 1 / np.sqrt(2), -1 / np.sqrt(2)
    return avg, dif


def make_codec(d_x: int = 16, d_z: int = 8, n_detail: int = 3, seed: int = 0) -> ToyCodec:
    """Codec whose first ``d_z - n_detail`` latents read pair averages and the
    last ``n_detail`` read pair differences.

    Keeping the two pixel subspaces separate lets the pair-averaging
    degradation act on the latent as a coordinate projection. The first row
    of each block is the block's uniform direction (the constant image and
    the alternating +/- image), so global offsets of either kind survive
    encoding; the remaining rows are random.
    """
    half = d_x // 2
    n_coarse = d_z - n_detail
    if not (0 <= n_detail <= half and 0 <= n_coarse <= half):
        raise ValueError(f"cannot split d_z={d_z} into {n_coarse} coarse + {n_detail} detail rows for d_x={d_x}")
    avg, dif = pair_bases(d_x)
    rng = np.random.default_rng(seed)
    rows = []
    for basis, n in ((avg, n_coarse), (dif, n_detail)):
        if n:
            seed_cols = rng.standard_normal((half, n))
            seed_cols[:, 0] = 1.0
            q, _ = np.linalg.qr(seed_cols)
            q[:, 0] = np.abs(q[:, 0])
            rows.append(q.T @ basis)
    return ToyCodec(np.vstack(rows))


def encode(x, codec: ToyCodec) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != codec.d_x:
        raise ShapeError(f"encode: expected trailing extent {codec.d_x}, got shape {x.shape}")
    return matmul(x, codec.A.T)


def decode(z, codec: ToyCodec) -> Tensor:
    z = as_tensor(z)
    if z.shape[-1] != codec.d_z:
        raise ShapeError(f"decode: expected trailing extent {codec.d_z}, got shape {z.shape}")
    return matmul(z, codec.A)
