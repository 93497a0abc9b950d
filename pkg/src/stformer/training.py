"""Masked-MAE training with Adam, forecast metrics, and gradient checking."""

from __future__ import annotations

import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .data import DatasetBundle, NormStats, WindowStream, make_windows, train_stats
from .landmarks import STCS, ClusterMap, agglomerative_cluster
from .model import ModelConfig, ModelParams, forward, init_params
from .tensor import GradTape, Tensor, as_tensor, backward

logger = logging.getLogger(__name__)

HORIZONS = (3, 6, 12)
MAPE_MIN_TARGET = 1e-6


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float) -> None:
        super().__init__(f"loss became {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


# -------------------------------------------------------------------------- loss
def masked_mae(pred, target, mask) -> Tensor:
    """Mean of ``|pred - target|`` over positions where ``mask`` is True."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or mask.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("masked_mae needs at least one unmasked position")
    clean = np.where(mask, target, 0.0)
    return ((pred - clean).abs() * mask.astype(np.float64)).sum() / float(count)


# ---------------------------------------------------------------------- optimizer
@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hyper) -> OptimizerState:
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(
    params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState
) -> tuple[Mapping[str, Tensor], OptimizerState]:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if name not in state.m:
            raise KeyError(f"optimizer state has no moments for {name!r}")
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ------------------------------------------------------------------------ metrics
@dataclass(frozen=True)
class HorizonMetrics:
    mae: float
    rmse: float
    mape: float  # percent
    count: int
    mape_count: int


@dataclass
class MetricReport:
    horizons: dict[int, HorizonMetrics]

    def to_text(self) -> str:
        lines = ["format_version: 1"]
        for h, m in sorted(self.horizons.items()):
            for key in ("mae", "rmse", "mape", "count", "mape_count"):
                lines.append(f"horizon_{h}.{key}: {getattr(m, key)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> MetricReport:
        fields: dict[int, dict[str, str]] = {}
        for line in text.splitlines():
            key, sep, value = line.partition(":")
            if not sep or not key.startswith("horizon_"):
                continue
            head, _, name = key.strip().partition(".")
            fields.setdefault(int(head[len("horizon_") :]), {})[name] = value.strip()
        horizons = {
            h: HorizonMetrics(
                mae=float(f["mae"]),
                rmse=float(f["rmse"]),
                mape=float(f["mape"]),
                count=int(f["count"]),
                mape_count=int(f["mape_count"]),
            )
            for h, f in fields.items()
        }
        return cls(horizons)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def read(cls, path: str | Path) -> MetricReport:
        return cls.from_text(Path(path).read_text())


class MetricAccumulator:
    """Streaming per-horizon error sums in original units."""

    def __init__(self, horizons: Sequence[int]) -> None:
        self.horizons = tuple(horizons)
        self._sums = {h: np.zeros(5) for h in self.horizons}

    def update(self, pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> None:
        """``pred``/``target``/``mask`` shaped (B, T', N, 1); horizon h is step h (1-based)."""
        for h in self.horizons:
            p, t, k = pred[:, h - 1], target[:, h - 1], mask[:, h - 1] & ~np.isnan(target[:, h - 1])
            err = np.abs(p[k] - t[k])
            tk = np.abs(t[k])
            ok = tk >= MAPE_MIN_TARGET
            self._sums[h] += [err.sum(), (err**2).sum(), err.size, (err[ok] / tk[ok]).sum(), ok.sum()]

    def report(self) -> MetricReport:
        out = {}
        for h, (abs_sum, sq_sum, n, ape_sum, n_ape) in self._sums.items():
            n, n_ape = int(n), int(n_ape)
            abs_sum, sq_sum, ape_sum = float(abs_sum), float(sq_sum), float(ape_sum)
            out[h] = HorizonMetrics(
                mae=abs_sum / n if n else math.nan,
                rmse=math.sqrt(sq_sum / n) if n else math.nan,
                mape=100.0 * ape_sum / n_ape if n_ape else math.nan,
                count=n,
                mape_count=n_ape,
            )
        return MetricReport(out)


def compute_metrics(pred, target, mask, horizons: Sequence[int] = HORIZONS) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    horizons = [h for h in horizons if h <= pred.shape[1]]
    acc = MetricAccumulator(horizons)
    acc.update(pred, np.asarray(target, dtype=np.float64), np.asarray(mask, dtype=bool))
    return acc.report()


def _forward_seed(seed: int, stream_id: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream_id, index])


def evaluate(
    params: ModelParams,
    cfg: ModelConfig,
    stream: WindowStream,
    stats: NormStats,
    *,
    clusters: ClusterMap | None = None,
    batch_size: int = 64,
    seed: int = 0,
    horizons: Sequence[int] = HORIZONS,
) -> MetricReport:
    """Horizon metrics of denormalized forecasts on ``stream`` (nulls excluded)."""
    if len(stream) == 0:
        raise ValueError("cannot evaluate on an empty window stream")
    acc = MetricAccumulator([h for h in horizons if h <= cfg.T_out])
    for i, batch in enumerate(stream.batches(batch_size, stats)):
        pred = forward(batch.inputs, params, cfg, clusters=clusters, rng=_forward_seed(seed, 2, i))
        acc.update(pred.data * stats.std + stats.mean, batch.targets, batch.target_mask)
    return acc.report()


def stream_loss(
    params: ModelParams,
    cfg: ModelConfig,
    stream: WindowStream,
    stats: NormStats,
    *,
    clusters: ClusterMap | None = None,
    batch_size: int = 64,
    seed: int = 0,
) -> float:
    """Masked MAE on the normalized scale, averaged over every valid target."""
    total, count = 0.0, 0
    for i, batch in enumerate(stream.batches(batch_size, stats)):
        pred = forward(batch.inputs, params, cfg, clusters=clusters, rng=_forward_seed(seed, 1, i))
        target = (batch.targets - stats.mean) / stats.std
        n = int(batch.target_mask.sum())
        total += masked_mae(pred.data, target, batch.target_mask).item() * n
        count += n
    return total / count


# ----------------------------------------------------------------------- training
@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 3e-4
    batch_size: int = 16
    max_steps: int | None = None
    split: tuple[float, ...] = (0.7, 0.1, 0.2)
    eval_batch_size: int = 64


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time: float
    steps: int

    def to_line(self) -> str:
        return (
            f"epoch={self.epoch} train_loss={self.train_loss!r} val_loss={self.val_loss!r} "
            f"wall_time={self.wall_time:.3f} steps={self.steps}"
        )


@dataclass
class TrainResult:
    params: ModelParams  # best validation checkpoint
    final_params: ModelParams
    history: list[EpochRecord]
    step_losses: list[float]
    stats: NormStats
    clusters: ClusterMap | None
    streams: list[WindowStream] = field(repr=False)


def prepare_clusters(cfg: ModelConfig, bundle: DatasetBundle) -> ClusterMap | None:
    if cfg.variant == "nystrom" and cfg.landmark_strategy == STCS:
        return agglomerative_cluster(bundle.geometry, cfg.n_clusters)
    return None


def train(
    cfg: ModelConfig,
    bundle: DatasetBundle,
    epochs: int,
    seed: int = 0,
    tcfg: TrainConfig | None = None,
    *,
    params: ModelParams | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train on the chronological training split and keep the best-validation params.

    Deterministic for a fixed ``seed``: batch order, STCS draws and dropout all
    derive from it.
    """
    tcfg = tcfg or TrainConfig()
    train_s, val_s, *rest = make_windows(bundle, cfg.T, cfg.T_out, tcfg.split)
    stats = train_stats(train_s)
    clusters = prepare_clusters(cfg, bundle)
    params = params if params is not None else init_params(cfg, seed)
    state = OptimizerState.for_params(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    shuffle = np.random.default_rng(seed)
    best = params.copy()
    best_val = math.inf
    history: list[EpochRecord] = []
    step_losses: list[float] = []
    step = 0

    def done() -> bool:
        return tcfg.max_steps is not None and step >= tcfg.max_steps

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for b, batch in enumerate(train_s.batches(tcfg.batch_size, stats, rng=shuffle)):
            target = (batch.targets - stats.mean) / stats.std
            with GradTape():
                pred = forward(
                    batch.inputs,
                    params,
                    cfg,
                    clusters=clusters,
                    rng=_forward_seed(seed, 0, step),
                    training=True,
                )
                loss = masked_mae(pred, target, batch.target_mask)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(epoch, b, value)
            grads = backward(loss)
            adam_step(params, {name: grads.get(p) for name, p in params.items() if p in grads}, state)
            losses.append(value)
            step_losses.append(value)
            step += 1
            if done():
                break
        val = stream_loss(
            params, cfg, val_s, stats, clusters=clusters, batch_size=tcfg.eval_batch_size, seed=seed
        )
        record = EpochRecord(epoch, float(np.mean(losses)), val, time.perf_counter() - t0, len(losses))
        history.append(record)
        logger.info(record.to_line())
        if on_epoch is not None:
            on_epoch(record)
        if val < best_val:
            best_val = val
            best = params.copy()
        if done():
            break
    return TrainResult(best, params, history, step_losses, stats, clusters, [train_s, val_s, *rest])


# ------------------------------------------------------------------ gradient check
@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def tiny_config(variant: str = "exact", **changes) -> ModelConfig:
    """N=4, T=T'=3, d_f=2, d_a=4, one layer, one head."""
    from .model import EmbeddingConfig

    base = dict(
        n_nodes=4,
        T=3,
        T_out=3,
        layers=1,
        heads=1,
        ff_width=8,
        variant=variant,
        landmark_strategy="segment-means",
        n_landmarks=12,
        embedding=EmbeddingConfig(d_f=2, d_a=4),
    )
    base.update(changes)
    return ModelConfig(**base)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise ``||a - n|| / max(||a||, ||n||)`` (0 when both vanish)."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradient_check(
    cfg: ModelConfig,
    seed: int = 0,
    *,
    h: float = 1e-6,
    tolerance: float | None = None,
    batch: int = 2,
    clusters: ClusterMap | None = None,
    params: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare every parameter gradient against central finite differences.

    The loss is a fixed random linear functional of the forecast, so every
    backward rule on the path is exercised without kinks from the loss itself.
    """
    if tolerance is None:
        tolerance = 1e-4 if cfg.variant == "exact" else 1e-3
    rng = np.random.default_rng(seed)
    model = init_params(cfg, seed)
    shape = (batch, cfg.T, cfg.n_nodes)
    x = np.stack(
        [
            rng.normal(size=shape),
            rng.integers(1, cfg.embedding.days_per_week + 1, size=shape),
            rng.integers(1, cfg.embedding.steps_per_day + 1, size=shape),
        ],
        axis=-1,
    )
    weights = rng.normal(size=(batch, cfg.T_out, cfg.n_nodes, 1))

    def loss_value() -> float:
        return float((forward(x, model, cfg, clusters=clusters, rng=seed).data * weights).sum())

    with GradTape():
        loss = (forward(x, model, cfg, clusters=clusters, rng=seed) * weights).sum()
    grads = backward(loss)

    names = list(params) if params is not None else list(model)
    per_param: OrderedDict[str, float] = OrderedDict()
    for name in names:
        p = model[name]
        analytic = grads.get(p, np.zeros_like(p.data))
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        per_param[name] = relative_error(analytic, numeric)
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(worst, dict(per_param), tolerance)
