"""Approximation-quality report and attention scaling benchmark.

Both produce flat records written as CSV with stable headers.
"""

from __future__ import annotations

import csv
import logging
import math
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from .attention import AttentionConfig, ProjectionWeights, exact_attention, multi_head, nystrom_attention
from .landmarks import SEGMENT_MEANS, STCS, NodeGeometry, agglomerative_cluster, make_landmark_set
from .linalg import PinvConfig
from .tensor import Tensor

logger = logging.getLogger(__name__)

R = TypeVar("R")

MAX_EXACT_N = 4096
DEFAULT_BENCH_NS = (768, 1536, 3072, 6144)
EXACT_BENCH_CAP = 3072
MEMORY_BUDGET = 4 * 2**30


# ----------------------------------------------------------------------- CSV I/O
def write_records(path: str | Path, records: Sequence) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cls = type(records[0])
    names = [f.name for f in fields(cls)]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for rec in records:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(rec).items()})
    return path


def read_records(path: str | Path, cls: type[R]) -> list[R]:
    types = {f.name: f.type for f in fields(cls)}
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            values = {}
            for k, v in row.items():
                t = types[k]
                values[k] = int(v) if t == "int" else float(v) if t == "float" else v
            out.append(cls(**values))
    return out


# ---------------------------------------------------------------- approximation
@dataclass(frozen=True)
class ApproxRecord:
    strategy: str
    n: int
    m: int
    trials: int
    mean_abs_error: float
    max_abs_error: float


def structured_tokens(
    n_nodes: int, time_steps: int, d: int, rng: np.random.Generator
) -> tuple[np.ndarray, NodeGeometry]:
    """Time-major tokens where nearby nodes carry similar features.

    Node features are a random smooth function of planted 2-D coordinates; a
    per-step temporal signal and small noise are added on top.
    """
    coords = rng.uniform(0.0, 10.0, size=(n_nodes, 2))
    freq = rng.normal(scale=0.3, size=(2, d))
    node = np.sin(coords @ freq + rng.uniform(0, 2 * np.pi, size=d))
    step = np.sin(np.arange(time_steps)[:, None] * rng.normal(scale=0.5, size=d))
    x = node[None, :, :] + 0.5 * step[:, None, :]
    x = x + 0.1 * rng.standard_normal(x.shape)
    return x.reshape(time_steps * n_nodes, d), NodeGeometry.from_coordinates(coords)


def approx_report(
    n: int,
    seed: int = 0,
    *,
    time_steps: int = 12,
    d: int = 32,
    trials: int = 10,
    pinv_iterations: int = 6,
    strategies: Sequence[str] = (SEGMENT_MEANS, STCS),
    sampling_iterations: int = 8,
) -> list[ApproxRecord]:
    """Nystrom vs exact attention error for m in {n/16, n/8, n/4, n/2, n}.

    ``n`` must equal ``N * time_steps`` with ``N`` divisible by 16 so that every
    landmark count is reachable by both strategies.
    """
    if n > MAX_EXACT_N:
        raise ValueError(f"n={n} too large to materialize exact attention (limit {MAX_EXACT_N})")
    if trials < 1:
        raise ValueError("need at least one trial")
    if n % time_steps or (n // time_steps) % 16:
        raise ValueError(f"n={n} must be T * N with T={time_steps} and N divisible by 16")
    n_nodes = n // time_steps
    ms = [n // 16, n // 8, n // 4, n // 2, n]
    errors = {(s, m): [] for s in strategies for m in ms}
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        x, geom = structured_tokens(n_nodes, time_steps, d, rng)
        wq, wk, wv = (rng.normal(scale=1.0 / math.sqrt(d), size=(d, d)) for _ in range(3))
        q, k, v = x @ wq * 2.0, x @ wk * 2.0, x @ wv
        exact = exact_attention(q, k, v).data
        for m in ms:
            s_clusters = m // time_steps
            clusters = agglomerative_cluster(geom, s_clusters) if STCS in strategies else None
            for strategy in strategies:
                cfg = AttentionConfig(
                    d_h=d,
                    variant="nystrom",
                    landmark_strategy=strategy,
                    m=m,
                    time_steps=time_steps,
                    sampling_iterations=sampling_iterations,
                    pinv=PinvConfig(pinv_iterations),
                )
                lm = make_landmark_set(q, k, cfg, clusters=clusters, rng=rng)
                approx = nystrom_attention(q, k, v, lm, cfg.pinv).data
                err = np.abs(approx - exact)
                errors[strategy, m].append((float(err.mean()), float(err.max())))
    return [
        ApproxRecord(
            strategy=s,
            n=n,
            m=m,
            trials=trials,
            mean_abs_error=float(np.mean([e[0] for e in errors[s, m]])),
            max_abs_error=float(np.max([e[1] for e in errors[s, m]])),
        )
        for s in strategies
        for m in ms
    ]


# ---------------------------------------------------------------------- scaling
@dataclass(frozen=True)
class BenchRecord:
    variant: str
    n: int
    m: int
    median_seconds: float
    trials: int
    peak_bytes: int
    full_model_seconds: float = math.nan


def time_call(
    fn: Callable[[], object],
    min_trials: int = 9,
    max_trials: int = 101,
    warmup: int = 2,
    max_spread: float = 0.25,
) -> tuple[float, int]:
    """Median wall time of ``fn`` after ``warmup`` discarded runs.

    Starts with ``min_trials`` timed runs and keeps adding runs (up to
    ``max_trials``) while the timings are too coarse or too noisy: the median
    is within 1000 clock ticks, or the interquartile range exceeds
    ``max_spread`` of the median.
    """
    if min_trials < 9:
        raise ValueError("at least 9 timed trials are required")
    tick = time.get_clock_info("perf_counter").resolution
    for _ in range(warmup):
        fn()
    times: list[float] = []
    target = min_trials
    while True:
        while len(times) < target:
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        med = statistics.median(times)
        q1, _, q3 = statistics.quantiles(times, n=4)
        coarse = med < 1000 * tick
        noisy = (q3 - q1) > max_spread * med
        if not (coarse or noisy) or len(times) >= max_trials:
            return med, len(times)
        target = min(max_trials, 2 * len(times) + 1)


def peak_allocation(fn: Callable[[], object]) -> int:
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def exact_fits(n: int, heads: int, budget: int) -> bool:
    # scores, exponentials and probabilities for every head, float64
    return 3 * heads * n * n * 8 <= budget


def bench_scaling(
    ns: Iterable[int] = DEFAULT_BENCH_NS,
    *,
    m: int = 72,
    d_h: int = 152,
    heads: int = 4,
    time_steps: int = 12,
    strategy: str = SEGMENT_MEANS,
    variants: Sequence[str] = ("nystrom", "exact"),
    exact_cap: int = EXACT_BENCH_CAP,
    memory_budget: int = MEMORY_BUDGET,
    min_trials: int = 9,
    rounds: int = 3,
    seed: int = 0,
    full_model: bool = False,
) -> list[BenchRecord]:
    """Time one multi-head attention sublayer forward for each ``n`` and variant.

    The sweep is repeated ``rounds`` times and each point keeps its lowest
    median, so a burst of background load cannot bend the slope.
    Run single-threaded (see :func:`single_threaded`) for meaningful slopes.
    STCS uses ``m / time_steps`` clusters over ``n / time_steps`` random nodes.
    """
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    rng = np.random.default_rng(seed)
    w = ProjectionWeights(
        *(Tensor(rng.normal(scale=1.0 / math.sqrt(d_h), size=(d_h, d_h))) for _ in range(4))
    )
    cases = []
    for n in ns:
        x = Tensor(rng.standard_normal((n, d_h)))
        clusters = None
        if strategy == STCS:
            if n % time_steps or m % time_steps:
                raise ValueError("STCS benchmarking needs n and m divisible by time_steps")
            coords = rng.uniform(0, 10, size=(n // time_steps, 2))
            clusters = agglomerative_cluster(NodeGeometry.from_coordinates(coords), m // time_steps)
        for variant in variants:
            if variant == "exact" and (n > exact_cap or not exact_fits(n, heads, memory_budget)):
                logger.info("skipping exact attention at n=%d (size cap or memory budget)", n)
                continue
            cfg = AttentionConfig(
                d_h=d_h, heads=heads, variant=variant, landmark_strategy=strategy,
                m=m, time_steps=time_steps,
            )

            def run(cfg=cfg, x=x, clusters=clusters):
                return multi_head(x, cfg, w, clusters=clusters, rng=seed)

            cases.append((variant, n, run))

    best: dict[int, tuple[float, int]] = {}
    for _ in range(rounds):
        for i, (variant, n, run) in enumerate(cases):
            median, trials = time_call(run, min_trials=min_trials)
            if i not in best or median < best[i][0]:
                best[i] = (median, trials)
            logger.info("%s n=%d median=%.4fs trials=%d", variant, n, median, trials)

    records = []
    for i, (variant, n, run) in enumerate(cases):
        median, trials = best[i]
        full = _full_model_time(n, time_steps, variant, strategy, m, seed) if full_model else math.nan
        records.append(
            BenchRecord(variant, n, m if variant == "nystrom" else n, median, trials,
                        peak_allocation(run), full)
        )
    return records


def _full_model_time(n: int, time_steps: int, variant: str, strategy: str, m: int, seed: int) -> float:
    from .landmarks import ClusterMap
    from .model import ModelConfig, forward, init_params

    n_nodes = n // time_steps
    cfg = ModelConfig(
        n_nodes=n_nodes, T=time_steps, T_out=time_steps, variant=variant,
        landmark_strategy=strategy, n_landmarks=m, n_clusters=max(1, m // time_steps),
    )
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    shape = (time_steps, n_nodes)
    x = np.stack([rng.standard_normal(shape), np.ones(shape), np.ones(shape)], axis=-1)
    clusters = None
    if variant == "nystrom" and strategy == STCS:
        clusters = ClusterMap(np.arange(n_nodes) % cfg.n_clusters + 1, cfg.n_clusters)
    median, _ = time_call(lambda: forward(x, params, cfg, clusters=clusters, rng=seed), min_trials=9)
    return median


def loglog_slope(records: Iterable[BenchRecord], variant: str) -> float:
    pts = [(r.n, r.median_seconds) for r in records if r.variant == variant]
    if len(pts) < 2:
        return math.nan
    ns, ts = zip(*pts)
    return float(np.polyfit(np.log(ns), np.log(ts), 1)[0])


def single_threaded():
    """Context manager limiting BLAS/OpenMP pools to one thread."""
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)
