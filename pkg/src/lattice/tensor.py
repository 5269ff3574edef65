"""Minimal dense array substrate: shape-checked vectors, matrices, rank-3 tensors.

All heavy lifting is delegated to numpy; this module pins the handful of
contraction patterns the recurrences need and turns silent broadcasting
mistakes into hard errors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

__all__ = [
    "Vec",
    "Mat",
    "Tensor3",
    "matmul",
    "contract_vec_tensor",
    "hadamard_broadcast_row",
    "hadamard_broadcast_col",
]


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ShapeError("non-finite entries")
    return arr


@dataclass(frozen=True)
class Vec:
    """Dense float64 vector, length > 0, all entries finite."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_f64(self.data))
        if self.data.ndim != 1 or self.data.shape[0] == 0:
            raise ShapeError(f"expected nonempty 1-d vector, got shape {self.data.shape}")

    def __len__(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class Mat:
    """Dense row-major float64 matrix with positive dimensions."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_f64(self.data))
        if self.data.ndim != 2 or 0 in self.data.shape:
            raise ShapeError(f"expected nonempty 2-d matrix, got shape {self.data.shape}")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Tensor3:
    """Dense rank-3 float64 tensor with positive dimensions."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_f64(self.data))
        if self.data.ndim != 3 or 0 in self.data.shape:
            raise ShapeError(f"expected nonempty 3-d tensor, got shape {self.data.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


def matmul(a: Mat, b: Mat) -> Mat:
    """Standard matrix product; never aliases its inputs."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ ({a.cols} vs {b.rows})")
    return Mat(a.data @ b.data)


def contract_vec_tensor(e: Vec, p: Tensor3) -> Mat:
    """out[a, i] = sum_b e[b] * p[b, a, i].

    The contraction pairs e with the leading axis of the stacked-Jacobian
    tensor; both leading axes of p must match len(e).
    """
    n1, n2, _ = p.dims
    if len(e) != n1 or n1 != n2:
        raise ShapeError(f"contract_vec_tensor: need e.len == dims[0] == dims[1], got {len(e)}, {p.dims}")
    return Mat(np.einsum("b,bai->ai", e.data, p.data))


def hadamard_broadcast_row(m: Mat, row: Vec) -> Mat:
    """out[a, i] = m[a, i] * row[i]; row length must equal m.cols."""
    if len(row) != m.cols:
        raise ShapeError(f"hadamard_broadcast_row: row len {len(row)} != cols {m.cols}")
    return Mat(m.data * row.data[None, :])


def hadamard_broadcast_col(m: Mat, col: Vec) -> Mat:
    """out[a, i] = m[a, i] * col[a]; col length must equal m.rows."""
    if len(col) != m.rows:
        raise ShapeError(f"hadamard_broadcast_col: col len {len(col)} != rows {m.rows}")
    return Mat(m.data * col.data[:, None])
