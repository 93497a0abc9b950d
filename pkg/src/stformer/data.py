"""Traffic datasets: bundle files, synthetic data, windows and normalization.

A bundle is a directory with three files::

    series.csv      timestamp,node_0,...,node_{N-1}   (empty cell = null)
    distances.csv   N x N comma-separated node distances
    metadata.txt    key: value lines (name, frequency_minutes, units)

Nulls are kept as an explicit boolean mask (values hold NaN there), never as
zeros. Day-of-week (1..7, Monday = 1) and time-of-day (1..steps per day)
flags are derived from the timestamps.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .landmarks import NodeGeometry

logger = logging.getLogger(__name__)

SERIES_FILE = "series.csv"
DISTANCES_FILE = "distances.csv"
METADATA_FILE = "metadata.txt"
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
SYNTHETIC_START = datetime(2012, 3, 1)


class BundleError(ValueError):
    """A dataset bundle is missing, malformed or inconsistent."""


class WindowError(ValueError):
    """A split cannot provide the requested windows."""


@dataclass
class TrafficFlow:
    values: np.ndarray  # (L, N), NaN where null
    null: np.ndarray  # (L, N) bool
    day_of_week: np.ndarray  # (L,) in [1, 7]
    time_of_day: np.ndarray  # (L,) in [1, steps_per_day]
    timestamps: list[datetime] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.null = np.asarray(self.null, dtype=bool)
        self.day_of_week = np.asarray(self.day_of_week, dtype=np.int64)
        self.time_of_day = np.asarray(self.time_of_day, dtype=np.int64)
        if self.values.ndim != 2 or self.null.shape != self.values.shape:
            raise BundleError("values and null mask must share an (L, N) shape")
        if self.day_of_week.shape != (self.length,) or self.time_of_day.shape != (self.length,):
            raise BundleError("time flags must have one entry per time step")
        self.values = np.where(self.null, np.nan, self.values)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]


@dataclass
class DatasetBundle:
    flow: TrafficFlow
    geometry: NodeGeometry
    metadata: dict[str, str]

    def __post_init__(self) -> None:
        if self.geometry.n_nodes != self.flow.n_nodes:
            raise BundleError(
                f"distance matrix covers {self.geometry.n_nodes} nodes but the series has "
                f"{self.flow.n_nodes}"
            )

    @property
    def frequency_minutes(self) -> int:
        return int(self.metadata.get("frequency_minutes", 5))


def time_flags(timestamps: Sequence[datetime], frequency_minutes: int) -> tuple[np.ndarray, np.ndarray]:
    dow = np.array([ts.weekday() + 1 for ts in timestamps], dtype=np.int64)
    tod = np.array(
        [(ts.hour * 60 + ts.minute) // frequency_minutes + 1 for ts in timestamps], dtype=np.int64
    )
    return dow, tod


# --------------------------------------------------------------------------- I/O
def _read_metadata(path: Path) -> dict[str, str]:
    meta = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise BundleError(f"{path}:{lineno}: expected 'key: value'")
        meta[key.strip()] = value.strip()
    return meta


def _parse_float(cell: str, path: Path, lineno: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise BundleError(f"{path}:{lineno}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(value):
        raise BundleError(f"{path}:{lineno}: non-finite value {cell!r}")
    return value


def _read_series(path: Path) -> tuple[list[datetime], np.ndarray, np.ndarray]:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise BundleError(f"{path}: empty series file")
        if header[0].strip() != "timestamp" or len(header) < 2:
            raise BundleError(f"{path}:1: header must be 'timestamp,node_0,...'")
        n = len(header) - 1
        stamps, rows, nulls = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n + 1:
                raise BundleError(f"{path}:{lineno}: expected {n + 1} fields, got {len(row)}")
            try:
                stamps.append(datetime.strptime(row[0].strip(), TIMESTAMP_FORMAT))
            except ValueError:
                raise BundleError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from None
            miss = [not c.strip() for c in row[1:]]
            rows.append([np.nan if m else _parse_float(c, path, lineno) for c, m in zip(row[1:], miss)])
            nulls.append(miss)
    if not rows:
        raise BundleError(f"{path}: series file has no data rows")
    return stamps, np.array(rows, dtype=np.float64), np.array(nulls, dtype=bool)


def _read_distances(path: Path) -> np.ndarray:
    rows = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            rows.append([_parse_float(c, path, lineno) for c in row])
    if not rows or any(len(r) != len(rows) for r in rows):
        raise BundleError(f"{path}: distance matrix must be square and non-empty")
    return np.array(rows, dtype=np.float64)


def load_bundle(path: str | Path) -> DatasetBundle:
    root = Path(path)
    for name in (SERIES_FILE, DISTANCES_FILE, METADATA_FILE):
        if not (root / name).is_file():
            raise BundleError(f"bundle {root} is missing {name}")
    meta = _read_metadata(root / METADATA_FILE)
    freq = int(meta.get("frequency_minutes", 5))
    stamps, values, null = _read_series(root / SERIES_FILE)
    steps = np.diff(np.array(stamps, dtype="datetime64[m]")).astype(np.int64)
    if steps.size and np.any(steps != freq):
        bad = int(np.flatnonzero(steps != freq)[0])
        raise BundleError(
            f"{root / SERIES_FILE}:{bad + 3}: timestamp step is not {freq} minutes"
        )
    try:
        geometry = NodeGeometry(_read_distances(root / DISTANCES_FILE))
    except ValueError as exc:
        raise BundleError(f"{root / DISTANCES_FILE}: {exc}") from None
    dow, tod = time_flags(stamps, freq)
    flow = TrafficFlow(values, null, dow, tod, stamps)
    return DatasetBundle(flow, geometry, meta)


def write_bundle(bundle: DatasetBundle, path: str | Path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    flow = bundle.flow
    with (root / SERIES_FILE).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp"] + [f"node_{i}" for i in range(flow.n_nodes)])
        for ts, row, miss in zip(flow.timestamps, flow.values, flow.null):
            cells = ["" if m else repr(float(v)) for v, m in zip(row, miss)]
            writer.writerow([ts.strftime(TIMESTAMP_FORMAT)] + cells)
    with (root / DISTANCES_FILE).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in bundle.geometry.distances:
            writer.writerow([repr(float(v)) for v in row])
    (root / METADATA_FILE).write_text("".join(f"{k}: {v}\n" for k, v in bundle.metadata.items()))
    return root


# --------------------------------------------------------------------- synthetic
def planted_groups(n_nodes: int, n_groups: int = 2) -> np.ndarray:
    """Group index of each synthetic node: contiguous blocks of node ids."""
    return np.arange(n_nodes) * n_groups // n_nodes


def generate_synthetic(
    n_nodes: int,
    length: int,
    seed: int = 0,
    n_groups: int = 2,
    null_fraction: float = 0.01,
    noise: float = 1.0,
) -> DatasetBundle:
    """Daily sinusoids with coordinate-derived phases plus Gaussian noise.

    Nodes are planted around ``n_groups`` well separated centers; the distance
    matrix is Euclidean over those coordinates.
    """
    if n_nodes < 2:
        raise ValueError("need at least 2 nodes")
    if length < 48:
        raise ValueError("need at least 48 time steps")
    rng = np.random.default_rng(seed)
    groups = planted_groups(n_nodes, n_groups)
    angles = 2 * np.pi * groups / n_groups
    centers = 20.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    coords = centers + rng.normal(scale=1.0, size=(n_nodes, 2))

    stamps = [SYNTHETIC_START + timedelta(minutes=5 * i) for i in range(length)]
    dow, tod = time_flags(stamps, 5)
    phase = 0.05 * coords[:, 0] + 0.03 * coords[:, 1]
    base = 55.0 + 3.0 * groups
    day = 2 * np.pi * (tod[:, None] - 1) / 288
    weekend = (dow[:, None] >= 6).astype(np.float64)
    values = base + 12.0 * np.sin(day + phase) + 4.0 * weekend
    values = values + rng.normal(scale=noise, size=values.shape)
    null = rng.random(values.shape) < null_fraction

    flow = TrafficFlow(values, null, dow, tod, stamps)
    meta = {"name": "synthetic", "frequency_minutes": "5", "units": "mph"}
    return DatasetBundle(flow, NodeGeometry.from_coordinates(coords), meta)


# ------------------------------------------------------------------ normalization
@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


def normalize(values: np.ndarray, stats: NormStats | None = None, name: str = "values"):
    """Z-score ``values`` using ``stats`` (computed over non-null entries if absent)."""
    values = np.asarray(values, dtype=np.float64)
    if stats is None:
        observed = values[~np.isnan(values)]
        if observed.size == 0:
            raise ValueError(f"series {name!r} has no observed values")
        std = float(observed.std())
        if std == 0.0:
            raise ValueError(f"series {name!r} is constant; cannot normalize")
        stats = NormStats(float(observed.mean()), std)
    return (values - stats.mean) / stats.std, stats


def denormalize(values, stats: NormStats):
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean


# ----------------------------------------------------------------------- windows
@dataclass
class ForecastBatch:
    inputs: np.ndarray  # (B, T, N, 3): value, day-of-week, time-of-day
    targets: np.ndarray  # (B, T', N, 1) original units, NaN at nulls
    target_mask: np.ndarray  # (B, T', N, 1) True where the target is observed
    starts: np.ndarray  # (B,) window start indices into the series

    def __post_init__(self) -> None:
        if not self.target_mask.any():
            raise WindowError("every target in the batch is null")

    @property
    def masked_fraction(self) -> float:
        return float(1.0 - self.target_mask.mean())

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class WindowStream:
    """Stride-1 windows whose inputs and targets lie inside ``[lo, hi)``."""

    flow: TrafficFlow
    lo: int
    hi: int
    T: int
    T_out: int

    @property
    def starts(self) -> np.ndarray:
        return np.arange(self.lo, self.hi - self.T - self.T_out + 1)

    def __len__(self) -> int:
        return len(self.starts)

    def batch(self, starts: np.ndarray, stats: NormStats | None = None) -> ForecastBatch:
        f = self.flow
        starts = np.asarray(starts, dtype=np.int64)
        idx_in = starts[:, None] + np.arange(self.T)
        idx_out = starts[:, None] + self.T + np.arange(self.T_out)
        vals = f.values[idx_in]
        if stats is not None:
            vals, _ = normalize(vals, stats)
        vals = np.where(np.isnan(vals), 0.0, vals)
        shape = vals.shape
        inputs = np.stack(
            [
                vals,
                np.broadcast_to(f.day_of_week[idx_in][..., None], shape),
                np.broadcast_to(f.time_of_day[idx_in][..., None], shape),
            ],
            axis=-1,
        )
        targets = f.values[idx_out][..., None]
        mask = ~f.null[idx_out][..., None]
        return ForecastBatch(inputs, targets, mask, starts)

    def batches(
        self,
        batch_size: int,
        stats: NormStats | None = None,
        rng: np.random.Generator | None = None,
    ) -> Iterator[ForecastBatch]:
        """Yield batches in chronological order, or shuffled when ``rng`` is given.

        Batches whose targets are all null are skipped with a warning.
        """
        starts = self.starts
        if rng is not None:
            starts = rng.permutation(starts)
        for i in range(0, len(starts), batch_size):
            try:
                yield self.batch(starts[i : i + batch_size], stats)
            except WindowError:
                logger.warning("skipping all-null batch at window %d", int(starts[i]))


def split_boundaries(length: int, ratios: Sequence[float]) -> list[int]:
    ratios = [float(r) for r in ratios]
    if not ratios or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be positive and sum to 1, got {ratios}")
    cum = np.cumsum(ratios)
    bounds = [int(round(length * c)) for c in cum[:-1]] + [length]
    return [0] + bounds


def make_windows(
    bundle: DatasetBundle | TrafficFlow,
    T: int,
    T_out: int,
    split_ratios: Sequence[float] = (0.7, 0.1, 0.2),
) -> list[WindowStream]:
    """Chronological splits, each windowed with stride 1 (no window crosses a split)."""
    flow = bundle.flow if isinstance(bundle, DatasetBundle) else bundle
    if T < 1 or T_out < 1:
        raise ValueError("T and T' must be >= 1")
    bounds = split_boundaries(flow.length, split_ratios)
    streams = []
    for k, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        if hi - lo < T + T_out:
            raise WindowError(
                f"split {k} spans {hi - lo} steps, fewer than T + T' = {T + T_out}"
            )
        streams.append(WindowStream(flow, lo, hi, T, T_out))
    return streams


def train_stats(stream: WindowStream) -> NormStats:
    """Normalization statistics from the raw values of a (training) split."""
    _, stats = normalize(stream.flow.values[stream.lo : stream.hi])
    return stats
