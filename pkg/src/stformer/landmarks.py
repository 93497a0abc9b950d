"""Landmark selection for Nystrom attention.

Two strategies produce the ``m x d`` landmark matrices for queries and keys:

* segment-means: average contiguous blocks of ``n / m`` rows (differentiable);
* STCS (spatial-temporal cluster sampling): nodes are clustered once by road
  distance; then for every time step and cluster the landmark is the average
  of ``p`` draws from a per-dimension Gaussian fitted to that cluster's rows.
  STCS landmarks are treated as constants by the gradient tape.

Tokens are always ordered time-major: all nodes of step 1, then step 2, ...
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, concat

if TYPE_CHECKING:
    from .attention import AttentionConfig

__all__ = [
    "NodeGeometry",
    "ClusterMap",
    "LandmarkSet",
    "segment_means",
    "pad_rows",
    "agglomerative_cluster",
    "stcs_landmarks",
    "make_landmark_set",
]

SEGMENT_MEANS = "segment-means"
STCS = "stcs"
STRATEGIES = (SEGMENT_MEANS, STCS)


@dataclass(frozen=True)
class NodeGeometry:
    distances: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.distances, dtype=np.float64)
        object.__setattr__(self, "distances", d)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError(f"distance matrix must be square, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("distance matrix has non-finite entries")
        if np.any(d < 0):
            raise ValueError("distance matrix has negative entries")
        if not np.allclose(d, d.T, rtol=1e-12, atol=1e-12):
            raise ValueError("distance matrix is not symmetric")
        if np.any(np.diag(d) != 0):
            raise ValueError("distance matrix diagonal must be zero")

    @property
    def n_nodes(self) -> int:
        return self.distances.shape[0]

    @classmethod
    def from_coordinates(cls, coords: np.ndarray) -> NodeGeometry:
        coords = np.asarray(coords, dtype=np.float64)
        diff = coords[:, None, :] - coords[None, :, :]
        d = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(d, 0.0)
        return cls((d + d.T) / 2)


@dataclass(frozen=True)
class ClusterMap:
    """``assignment[i]`` is the cluster id (1..s) of node ``i``."""

    assignment: np.ndarray
    s: int

    def __post_init__(self) -> None:
        a = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", a)
        if a.ndim != 1:
            raise ValueError("assignment must be one-dimensional")
        if a.size and (a.min() < 1 or a.max() > self.s):
            raise ValueError(f"cluster ids must lie in [1, {self.s}]")
        if len(np.unique(a)) != self.s:
            raise ValueError("every cluster must be non-empty")

    @property
    def n_nodes(self) -> int:
        return self.assignment.size

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cluster_id)

    def partition(self) -> set[frozenset[int]]:
        return {frozenset(self.members(c).tolist()) for c in range(1, self.s + 1)}

    def averaging_matrix(self) -> np.ndarray:
        """(s, N) matrix whose rows average the members of each cluster."""
        w = np.zeros((self.s, self.n_nodes))
        w[self.assignment - 1, np.arange(self.n_nodes)] = 1.0
        return w / w.sum(axis=1, keepdims=True)


@dataclass
class LandmarkSet:
    q_landmarks: Tensor
    k_landmarks: Tensor
    strategy: str
    clusters: ClusterMap | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.q_landmarks.shape[-2] != self.k_landmarks.shape[-2]:
            raise ValueError(
                f"query/key landmark counts differ: {self.q_landmarks.shape[-2]} vs "
                f"{self.k_landmarks.shape[-2]}"
            )

    @property
    def m(self) -> int:
        return self.q_landmarks.shape[-2]


def pad_rows(x: Tensor, multiple: int) -> Tensor:
    """Append zero rows so the row count (axis -2) is a multiple of ``multiple``."""
    n = x.shape[-2]
    extra = (-n) % multiple
    if extra == 0:
        return x
    zeros = np.zeros(x.shape[:-2] + (extra, x.shape[-1]))
    return concat([x, Tensor(zeros)], axis=-2)


def segment_means(rows, m: int):
    """Mean of each of the ``m`` contiguous blocks of ``n / m`` rows.

    Works on ndarrays or Tensors with arbitrary leading axes.
    """
    plain = not isinstance(rows, Tensor)
    x = as_tensor(rows)
    n = x.shape[-2]
    if m < 1:
        raise ValueError(f"landmark count must be >= 1, got {m}")
    if n % m:
        raise DimensionError(f"row count {n} is not divisible by landmark count {m}; pad first")
    out = x.reshape(*x.shape[:-2], m, n // m, x.shape[-1]).mean(axis=-2)
    return out.data if plain else out


def agglomerative_cluster(geom: NodeGeometry, s: int) -> ClusterMap:
    """Average-linkage agglomerative clustering down to ``s`` clusters.

    Each cluster is tracked under its smallest node index; among equally close
    pairs the lexicographically smallest index pair is merged first. Final ids
    are assigned 1..s in order of each cluster's smallest node.
    """
    n = geom.n_nodes
    if not 1 <= s <= n:
        raise ValueError(f"cluster count must be in [1, {n}], got {s}")
    dist = geom.distances.copy()
    np.fill_diagonal(dist, np.inf)
    dist[np.tril_indices(n)] = np.inf
    full = geom.distances.copy()
    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    owner = np.arange(n)
    for _ in range(n - s):
        flat = int(np.argmin(dist))
        i, j = divmod(flat, n)  # i < j by construction of the upper triangle
        # average linkage (Lance-Williams) update of row/column i
        merged = (sizes[i] * full[i] + sizes[j] * full[j]) / (sizes[i] + sizes[j])
        full[i, :] = merged
        full[:, i] = merged
        sizes[i] += sizes[j]
        active[j] = False
        owner[owner == j] = i
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        rows = np.flatnonzero(active)
        lo = rows[rows < i]
        hi = rows[rows > i]
        dist[lo, i] = merged[lo]
        dist[i, hi] = merged[hi]
    reps = np.flatnonzero(active)
    ids = np.empty(n, dtype=np.int64)
    for cid, rep in enumerate(reps, start=1):
        ids[owner == rep] = cid
    return ClusterMap(ids, s)


def stcs_landmarks(
    x: np.ndarray,
    clusters: ClusterMap,
    time_steps: int,
    p: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Spatial-temporal cluster sampling over time-major rows ``(..., T*N, d)``.

    Returns ``(..., T*s, d)`` landmarks ordered by (time step, cluster).
    """
    if p < 1:
        raise ValueError(f"sampling iterations must be >= 1, got {p}")
    x = np.asarray(x, dtype=np.float64)
    n_nodes = clusters.n_nodes
    if x.shape[-2] != time_steps * n_nodes:
        raise DimensionError(
            f"expected {time_steps} x {n_nodes} = {time_steps * n_nodes} rows, got {x.shape[-2]}"
        )
    grid = x.reshape(*x.shape[:-2], time_steps, n_nodes, x.shape[-1])
    avg = clusters.averaging_matrix()
    mu = avg @ grid  # (..., T, s, d)
    centered = grid - mu[..., clusters.assignment - 1, :]
    sigma = np.sqrt(avg @ centered**2)  # population std per dimension
    draws = rng.standard_normal(mu.shape[:-1] + (p,) + mu.shape[-1:])
    # mean of p draws mu + sigma*z_i, written so sigma == 0 returns mu exactly
    landmarks = mu + sigma * draws.mean(axis=-2)
    return landmarks.reshape(*x.shape[:-2], time_steps * clusters.s, x.shape[-1])


def make_landmark_set(
    q: Tensor,
    k: Tensor,
    cfg: AttentionConfig,
    clusters: ClusterMap | None = None,
    rng: np.random.Generator | int | None = None,
) -> LandmarkSet:
    """Landmarks for queries and keys under ``cfg.landmark_strategy``.

    Segment-means pads the rows with zeros up to a multiple of ``cfg.m``.
    STCS needs ``clusters`` and ``cfg.time_steps``; queries and keys get
    independent draws from ``rng``.
    """
    q, k = as_tensor(q), as_tensor(k)
    if cfg.landmark_strategy == SEGMENT_MEANS:
        m = cfg.m
        return LandmarkSet(
            segment_means(pad_rows(q, m), m),
            segment_means(pad_rows(k, m), m),
            SEGMENT_MEANS,
        )
    if cfg.landmark_strategy == STCS:
        if clusters is None:
            raise ValueError("stcs landmarks require a cluster map")
        if cfg.time_steps is None:
            raise ValueError("stcs landmarks require time_steps")
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        p = cfg.sampling_iterations
        q_lm = stcs_landmarks(q.data, clusters, cfg.time_steps, p, gen)
        k_lm = stcs_landmarks(k.data, clusters, cfg.time_steps, p, gen)
        return LandmarkSet(Tensor(q_lm), Tensor(k_lm), STCS, clusters)
    raise ValueError(f"unknown landmark strategy {cfg.landmark_strategy!r}")
