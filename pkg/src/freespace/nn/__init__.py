"""Differentiable-computation core and the contour denoiser."""

from .autodiff import (
    Tensor, concat, const, gelu, layer_norm, pad_hw, parameter, relu,
    softmax_last, take_flat, take_rows,
)
from .model import (
    DenoiserConfig, T_MAX, bilinear_features, bilinear_sample, conv_encoder,
    denoiser_forward, denoiser_forward_batch, fourier_pos_embed, init_params,
    param_names, sinusoidal_time_embed,
)
from .optim import AdamState, adam_step, collect_grads, init_adam, zero_grads

__all__ = [
    "AdamState", "DenoiserConfig", "T_MAX", "Tensor", "adam_step",
    "bilinear_features", "bilinear_sample", "collect_grads", "concat",
    "const", "conv_encoder", "denoiser_forward", "denoiser_forward_batch",
    "fourier_pos_embed", "gelu", "init_adam", "init_params", "layer_norm",
    "pad_hw", "param_names", "parameter", "relu", "sinusoidal_time_embed",
    "softmax_last", "take_flat", "take_rows", "zero_grads",
]
