"""Streaming transformer acoustic models on a small reverse-mode autodiff core."""

from .attention import ContextWindow, build_chunk_mask, build_mask, multi_head, scaled_dot_attention
from .config import ModelConfig
from .errors import ConfigError, DimensionError, FormatError, NumericalError, StreamXLError
from .model import AcousticModel, build_model, count_params, load, reference_config, save
from .streaming import (
    XLStreamer,
    accumulate_context,
    latency_ms,
    masked_stream_forward,
    stream_infer,
    xl_offline_oracle,
    xl_train_step,
)
from .tensor import Tensor, backward, finite_diff_check, no_grad, stop_gradient
from .trainer import Schedule, SyntheticTask, adam_step, cross_entropy, train, warmup_lr

__version__ = "0.1.0"

__all__ = [
    "AcousticModel", "ConfigError", "ContextWindow", "DimensionError", "FormatError", "ModelConfig",
    "NumericalError", "Schedule", "StreamXLError", "SyntheticTask", "Tensor", "XLStreamer",
    "accumulate_context", "adam_step", "backward", "build_chunk_mask", "build_mask", "build_model",
    "count_params", "cross_entropy", "finite_diff_check", "latency_ms", "load", "masked_stream_forward",
    "multi_head", "no_grad", "reference_config", "save", "scaled_dot_attention", "stop_gradient",
    "stream_infer", "train", "warmup_lr", "xl_offline_oracle", "xl_train_step",
]
