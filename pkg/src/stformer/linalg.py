"""Pseudoinverse of the landmark kernel.

:func:`iterative_pinv` is the hot-path routine: a fixed number of steps of
the third-order iteration

    Z <- 1/4 Z (13 I - A Z (15 I - A Z (7 I - A Z)))

written entirely in tensor ops so gradients flow through the unrolled steps.
:func:`svd_pinv_oracle` is an independent reference used by the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, NumericError, Tensor, as_tensor

__all__ = [
    "PinvConfig",
    "PinvDivergenceError",
    "iterative_pinv",
    "initial_guess",
    "svd_pinv_oracle",
    "pinv_residual",
]

ORACLE_MAX_SIZE = 64
ORACLE_RCOND = 1e-10


class PinvDivergenceError(NumericError):
    def __init__(self, iteration: int) -> None:
        super().__init__(f"pseudoinverse iteration produced non-finite values at step {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class PinvConfig:
    """``iterations`` unrolled steps starting from ``A^T / (||A||_1 ||A||_inf)``."""

    iterations: int = 6

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


def initial_guess(a: Tensor) -> Tensor:
    """``A^T / (||A||_1 ||A||_inf)``, computed per matrix over leading axes."""
    absa = a.abs()
    norm_1 = absa.sum(axis=-2).max(axis=-1, keepdims=True)  # max column sum
    norm_inf = absa.sum(axis=-1).max(axis=-1, keepdims=True)  # max row sum
    scale = (norm_1 * norm_inf).reshape(*a.shape[:-2], 1, 1)
    return a.T / scale


def iterative_pinv(a, cfg: PinvConfig = PinvConfig()):
    """Approximate Moore-Penrose inverse of square ``a`` (..., m, m).

    Accepts an ndarray (returns an ndarray) or a :class:`Tensor` (returns a
    differentiable Tensor).
    """
    plain = not isinstance(a, Tensor)
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"iterative_pinv needs square matrices, got shape {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise PinvDivergenceError(0)
    eye = np.eye(a.shape[-1])
    z = initial_guess(a)
    for j in range(1, cfg.iterations + 1):
        az = a @ z
        inner = 7.0 * eye - az
        inner = 15.0 * eye - az @ inner
        inner = 13.0 * eye - az @ inner
        z = (z @ inner) * 0.25
        if not np.all(np.isfinite(z.data)):
            raise PinvDivergenceError(j)
    return z.data if plain else z


def svd_pinv_oracle(a: np.ndarray) -> np.ndarray:
    """Reference pseudoinverse via SVD; test-scale matrices only."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"svd_pinv_oracle needs a square matrix, got shape {a.shape}")
    if a.shape[0] > ORACLE_MAX_SIZE:
        raise ValueError(
            f"svd_pinv_oracle is a test oracle limited to m <= {ORACLE_MAX_SIZE}, got {a.shape[0]}"
        )
    u, s, vt = np.linalg.svd(a)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros_like(a.T)
    keep = s > ORACLE_RCOND * s[0]
    return (vt[keep].T / s[keep]) @ u[:, keep].T


def pinv_residual(a: np.ndarray, z: np.ndarray) -> float:
    """Relative Penrose residual ``||a z a - a||_F / ||a||_F``."""
    a = np.asarray(a, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if a.ndim != 2 or z.shape != (a.shape[1], a.shape[0]):
        raise DimensionError(f"pinv_residual shape mismatch: a {a.shape}, z {z.shape}")
    return float(np.linalg.norm(a @ z @ a - a) / max(np.linalg.norm(a), 1e-30))
