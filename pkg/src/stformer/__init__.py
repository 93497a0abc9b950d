"""Spatial-temporal transformer forecasting with exact and Nystrom attention."""

from .attention import AttentionConfig, exact_attention, multi_head, nystrom_attention
from .data import DatasetBundle, generate_synthetic, load_bundle, make_windows, write_bundle
from .landmarks import NodeGeometry, agglomerative_cluster, make_landmark_set, segment_means, stcs_landmarks
from .linalg import PinvConfig, iterative_pinv, svd_pinv_oracle
from .model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .tensor import GradTape, Tensor, backward
from .training import MetricReport, evaluate, gradient_check, masked_mae, train

__all__ = [
    "AttentionConfig",
    "DatasetBundle",
    "GradTape",
    "MetricReport",
    "ModelConfig",
    "NodeGeometry",
    "PinvConfig",
    "Tensor",
    "agglomerative_cluster",
    "backward",
    "evaluate",
    "exact_attention",
    "forward",
    "generate_synthetic",
    "gradient_check",
    "init_params",
    "iterative_pinv",
    "load_bundle",
    "load_checkpoint",
    "make_landmark_set",
    "make_windows",
    "masked_mae",
    "multi_head",
    "nystrom_attention",
    "save_checkpoint",
    "segment_means",
    "stcs_landmarks",
    "svd_pinv_oracle",
    "train",
    "write_bundle",
]
