"""Token-per-(node, step) transformer with exact or landmark attention.

Pipeline: embed the three input features (value, day-of-week, time-of-day)
into ``3 * d_f`` channels, concatenate the learnable adaptive embedding
(``T x N x d_a``), flatten time-major into ``N * T`` ST-tokens of width
``d_h = 3 d_f + d_a``, run ``layers`` pre-norm Transformer blocks, and map
each node's ``T * d_h`` features to ``T'`` forecasts.

The two variants share every parameter; only the attention kernel differs.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .attention import EXACT, NYSTROM, AttentionConfig, ProjectionWeights, multi_head
from .landmarks import SEGMENT_MEANS, STCS, ClusterMap
from .linalg import PinvConfig
from .tensor import DimensionError, Tensor, concat, embedding, gelu, layer_norm, relu

__all__ = [
    "EmbeddingConfig",
    "ModelConfig",
    "ModelParams",
    "CheckpointError",
    "init_params",
    "embed",
    "encoder_block",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible with the requested model."""


@dataclass(frozen=True)
class EmbeddingConfig:
    d_f: int = 24
    d_a: int = 80
    steps_per_day: int = 288
    days_per_week: int = 7

    @property
    def d_h(self) -> int:
        return 3 * self.d_f + self.d_a


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int
    T: int = 12
    T_out: int = 12
    layers: int = 3
    heads: int = 4
    ff_width: int = 256
    activation: str = "relu"
    dropout: float = 0.0
    variant: str = EXACT
    landmark_strategy: str = STCS
    n_landmarks: int = 72  # segment-means only; STCS uses n_clusters * T
    n_clusters: int = 6
    sampling_iterations: int = 8
    pinv_iterations: int = 6
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)

    def __post_init__(self) -> None:
        if self.layers < 1 or self.T < 1 or self.T_out < 1 or self.n_nodes < 1:
            raise ValueError("layers, T, T' and n_nodes must all be >= 1")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout <= 0.5:
            raise ValueError(f"dropout must lie in [0, 0.5], got {self.dropout}")
        if self.variant == NYSTROM and self.m > self.n_tokens:
            raise ValueError(f"landmark count {self.m} exceeds token count {self.n_tokens}")
        self.attention  # validates heads / variant / strategy

    @property
    def d_h(self) -> int:
        return self.embedding.d_h

    @property
    def n_tokens(self) -> int:
        return self.n_nodes * self.T

    @property
    def m(self) -> int:
        if self.landmark_strategy == STCS:
            return self.n_clusters * self.T
        return self.n_landmarks

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(
            d_h=self.d_h,
            heads=self.heads,
            variant=self.variant,
            landmark_strategy=self.landmark_strategy,
            m=self.m,
            time_steps=self.T,
            sampling_iterations=self.sampling_iterations,
            pinv=PinvConfig(self.pinv_iterations),
        )

    def with_variant(self, variant: str, **changes) -> ModelConfig:
        return replace(self, variant=variant, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        d = dict(d)
        emb = EmbeddingConfig(**d.pop("embedding", {}))
        return cls(embedding=emb, **d)


def param_shapes(cfg: ModelConfig) -> OrderedDict[str, tuple[int, ...]]:
    e, d_h, ff = cfg.embedding, cfg.d_h, cfg.ff_width
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["embed.value.w"] = (1, e.d_f)
    shapes["embed.value.b"] = (e.d_f,)
    shapes["embed.day_of_week"] = (e.days_per_week, e.d_f)
    shapes["embed.time_of_day"] = (e.steps_per_day, e.d_f)
    shapes["embed.adaptive"] = (cfg.T, cfg.n_nodes, e.d_a)
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes[p + "ln1.gain"] = (d_h,)
        shapes[p + "ln1.bias"] = (d_h,)
        for w in ("w_q", "w_k", "w_v", "w_out"):
            shapes[p + "attn." + w] = (d_h, d_h)
        shapes[p + "ln2.gain"] = (d_h,)
        shapes[p + "ln2.bias"] = (d_h,)
        shapes[p + "ff.w1"] = (d_h, ff)
        shapes[p + "ff.b1"] = (ff,)
        shapes[p + "ff.w2"] = (ff, d_h)
        shapes[p + "ff.b2"] = (d_h,)
    shapes["regression.w"] = (cfg.T * d_h, cfg.T_out)
    shapes["regression.b"] = (cfg.T_out,)
    return shapes


class ModelParams(Mapping[str, Tensor]):
    """Named trainable tensors, in a fixed order."""

    def __init__(self, tensors: Mapping[str, Tensor]) -> None:
        self._tensors = OrderedDict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def arrays(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, t.data.copy()) for k, t in self._tensors.items())

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> ModelParams:
        return cls({k: Tensor(v, requires_grad=True) for k, v in arrays.items()})

    def copy(self) -> ModelParams:
        return ModelParams.from_arrays(self.arrays())

    def projection(self, layer: int) -> ProjectionWeights:
        p = f"layers.{layer}.attn."
        return ProjectionWeights(*(self[p + w] for w in ("w_q", "w_k", "w_v", "w_out")))

    def check_shapes(self, cfg: ModelConfig) -> None:
        expected = param_shapes(cfg)
        if list(expected) != list(self._tensors):
            raise CheckpointError("parameter names do not match the model configuration")
        for name, shape in expected.items():
            if self[name].shape != shape:
                raise CheckpointError(
                    f"parameter {name} has shape {self[name].shape}, expected {shape}"
                )


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains, E_a ~ 0.01 N(0, 1)."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name == "embed.adaptive":
            data = 0.01 * rng.standard_normal(shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors)


def _flags(x: np.ndarray, upper: int, name: str) -> np.ndarray:
    idx = np.rint(x).astype(np.int64)
    if np.any(idx < 1) or np.any(idx > upper) or np.any(np.abs(x - idx) > 1e-9):
        raise ValueError(f"{name} flag outside 1..{upper}")
    return idx - 1


def embed(flow: np.ndarray, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """(..., T, N, 3) window -> (..., N*T, d_h) time-major ST-tokens."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape[-3:] != (cfg.T, cfg.n_nodes, 3):
        raise DimensionError(
            f"expected input (..., {cfg.T}, {cfg.n_nodes}, 3), got {flow.shape}"
        )
    e = cfg.embedding
    lead = flow.shape[:-1]
    value = Tensor(flow[..., 0:1]) @ params["embed.value.w"] + params["embed.value.b"]
    dow = embedding(params["embed.day_of_week"], _flags(flow[..., 1], e.days_per_week, "day-of-week"))
    tod = embedding(params["embed.time_of_day"], _flags(flow[..., 2], e.steps_per_day, "time-of-day"))
    adaptive = params["embed.adaptive"].broadcast_to(lead + (e.d_a,))
    x = concat([value, dow, tod, adaptive], axis=-1)
    return x.reshape(*lead[:-2], cfg.T * cfg.n_nodes, cfg.d_h)


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def encoder_block(
    tokens: Tensor,
    params: ModelParams,
    layer: int,
    cfg: ModelConfig,
    *,
    clusters: ClusterMap | None = None,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Pre-norm residual block: attention sublayer then feed-forward sublayer."""
    p = f"layers.{layer}."
    drop_rng = rng if training else None
    h = layer_norm(tokens, params[p + "ln1.gain"], params[p + "ln1.bias"])
    attn = multi_head(h, cfg.attention, params.projection(layer), clusters=clusters, rng=rng)
    x = tokens + _dropout(attn, cfg.dropout, drop_rng)
    h = layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
    act = relu if cfg.activation == "relu" else gelu
    ff = act(h @ params[p + "ff.w1"] + params[p + "ff.b1"]) @ params[p + "ff.w2"] + params[p + "ff.b2"]
    return x + _dropout(ff, cfg.dropout, drop_rng)


def regress(tokens: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """(..., N*T, d_h) -> (..., T', N, 1): per-node map over that node's T features."""
    lead = tokens.shape[:-2]
    x = tokens.reshape(*lead, cfg.T, cfg.n_nodes, cfg.d_h).swapaxes(-2, -3)
    x = x.reshape(*lead, cfg.n_nodes, cfg.T * cfg.d_h)
    y = x @ params["regression.w"] + params["regression.b"]  # (..., N, T')
    return y.swapaxes(-1, -2).reshape(*lead, cfg.T_out, cfg.n_nodes, 1)


def forward(
    flow: np.ndarray,
    params: ModelParams,
    cfg: ModelConfig,
    *,
    clusters: ClusterMap | None = None,
    rng: np.random.Generator | int | None = None,
    training: bool = False,
) -> Tensor:
    """Forecast ``(..., T', N, 1)`` from an input window ``(..., T, N, 3)``.

    ``rng`` seeds STCS sampling (and dropout when ``training``); a fixed seed
    makes the Nystrom-STCS variant reproducible.
    """
    if cfg.variant == NYSTROM and cfg.landmark_strategy == STCS and clusters is None:
        raise ValueError("the STCS variant needs a cluster map")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = embed(flow, params, cfg)
    for layer in range(cfg.layers):
        x = encoder_block(x, params, layer, cfg, clusters=clusters, rng=gen, training=training)
    return regress(x, params, cfg)


# -------------------------------------------------------------------- checkpoints
def save_checkpoint(
    path: str | Path, params: ModelParams, cfg: ModelConfig, extras: Mapping | None = None
) -> Path:
    """Write parameters plus a JSON header (version, config echo, extras) to ``.npz``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": cfg.to_dict(),
        "param_shapes": {k: list(v.shape) for k, v in params.items()},
        "extras": dict(extras or {}),
    }
    arrays = {f"param/{k}": v for k, v in params.arrays().items()}
    with path.open("wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with np.load(path, allow_pickle=False) as npz:
        if "__meta__" not in npz:
            raise CheckpointError(f"{path} has no metadata header")
        meta = json.loads(str(npz["__meta__"]))
        if "format_version" not in meta:
            raise CheckpointError(f"{path} has no format_version")
        if meta["format_version"] != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta['format_version']}")
        arrays = OrderedDict(
            (name, npz[f"param/{name}"]) for name in meta["param_shapes"]
        )
    cfg = ModelConfig.from_dict(meta["model_config"])
    params = ModelParams.from_arrays(arrays)
    params.check_shapes(cfg)
    return params, cfg, meta.get("extras", {})
