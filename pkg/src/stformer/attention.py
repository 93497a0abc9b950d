"""Exact and Nystrom multi-head self-attention over ST-token sequences.

Both kernels take per-head ``Q, K, V`` of shape ``(..., n, d)`` and return
``(..., n, d)``. :func:`multi_head` projects, splits heads, applies the kernel
chosen by ``AttentionConfig.variant`` and recombines through ``w_out``; this
is the only place the two model variants differ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .landmarks import STCS, STRATEGIES, ClusterMap, LandmarkSet, make_landmark_set
from .linalg import PinvConfig, iterative_pinv
from .tensor import DimensionError, Tensor, as_tensor, softmax_rows

__all__ = [
    "AttentionConfig",
    "ProjectionWeights",
    "project_qkv",
    "split_heads",
    "merge_heads",
    "exact_attention",
    "nystrom_attention",
    "multi_head",
]

EXACT = "exact"
NYSTROM = "nystrom"


@dataclass(frozen=True)
class AttentionConfig:
    d_h: int
    heads: int = 1
    variant: str = EXACT
    landmark_strategy: str = "segment-means"
    m: int | None = None
    time_steps: int | None = None
    sampling_iterations: int = 8
    pinv: PinvConfig = field(default_factory=PinvConfig)

    def __post_init__(self) -> None:
        if self.heads < 1 or self.d_h % self.heads:
            raise ValueError(f"d_h={self.d_h} is not divisible by heads={self.heads}")
        if self.variant not in (EXACT, NYSTROM):
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.variant == NYSTROM:
            if self.landmark_strategy not in STRATEGIES:
                raise ValueError(f"unknown landmark strategy {self.landmark_strategy!r}")
            if self.m is None or self.m < 1:
                raise ValueError("nystrom attention needs a landmark count m >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_h // self.heads


@dataclass
class ProjectionWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor

    def __post_init__(self) -> None:
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_out"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(
                    f"{name} has shape {getattr(self, name).shape}, expected ({d}, {d})"
                )

    @property
    def d_h(self) -> int:
        return self.w_q.shape[0]


def project_qkv(x: Tensor, w: ProjectionWeights) -> tuple[Tensor, Tensor, Tensor]:
    x = as_tensor(x)
    if x.shape[-1] != w.d_h:
        raise DimensionError(f"token width {x.shape[-1]} does not match projections ({w.d_h})")
    return x @ w.w_q, x @ w.w_k, x @ w.w_v


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, d_h) -> (..., heads, n, d_h / heads)."""
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`."""
    *lead, heads, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, heads * dh)


def _scores(a: Tensor, b: Tensor) -> Tensor:
    return softmax_rows((a @ b.T) / math.sqrt(a.shape[-1]))


def exact_attention(q, k, v) -> Tensor:
    """``softmax(Q K^T / sqrt(d)) V``; materializes the full n x n scores."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention shape mismatch: Q {q.shape}, K {k.shape}, V {v.shape}")
    return _scores(q, k) @ v


def nystrom_attention(q, k, v, landmarks: LandmarkSet, pinv: PinvConfig = PinvConfig()) -> Tensor:
    """Nystrom approximation ``(F Z) (B V)`` of exact attention.

    ``F = softmax(Q K~^T)``, ``B = softmax(Q~ K^T)`` and ``Z`` approximates the
    pseudoinverse of ``softmax(Q~ K~^T)``. Nothing larger than ``n x m`` is formed.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    n = q.shape[-2]
    m = landmarks.m
    if m > n:
        raise DimensionError(f"landmark count m={m} exceeds sequence length n={n}")
    q_lm, k_lm = landmarks.q_landmarks, landmarks.k_landmarks
    f = _scores(q, k_lm)
    b = _scores(q_lm, k)
    z = iterative_pinv(_scores(q_lm, k_lm), pinv)
    return (f @ z) @ (b @ v)


def multi_head(
    x: Tensor,
    cfg: AttentionConfig,
    w: ProjectionWeights,
    landmarks: LandmarkSet | None = None,
    *,
    clusters: ClusterMap | None = None,
    rng: np.random.Generator | int | None = None,
) -> Tensor:
    """Multi-head self-attention of tokens ``x`` (..., n, d_h).

    For the Nystrom variant, landmarks are computed per head from that head's
    Q/K slices unless a precomputed ``landmarks`` set (with a heads axis) is given.
    """
    if x.shape[-1] != cfg.d_h:
        raise DimensionError(f"token width {x.shape[-1]} does not match d_h={cfg.d_h}")
    q, k, v = (split_heads(t, cfg.heads) for t in project_qkv(x, w))
    if cfg.variant == EXACT:
        out = exact_attention(q, k, v)
    else:
        if landmarks is None:
            if cfg.landmark_strategy == STCS and clusters is None:
                raise ValueError("stcs landmarks require a cluster map")
            landmarks = make_landmark_set(q, k, cfg, clusters=clusters, rng=rng)
        out = nystrom_attention(q, k, v, landmarks, cfg.pinv)
    return merge_heads(out) @ w.w_out
