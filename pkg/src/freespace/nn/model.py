"""Contour denoiser: conv encoder, embeddings, transformer, noise head.

Two forward implementations share one parameter set.  The batched path
(:func:`denoiser_forward_batch`) builds an autodiff graph for training and
sampling and leans on BLAS.  The public single-sample path
(:func:`denoiser_forward`) recomputes the same function in plain numpy
using order-canonical reductions: every cross-token sum (the softmax
denominator and the attention-weighted value average) goes through
``math.fsum``, which returns the correctly rounded true sum and is
therefore invariant under permutation of its inputs.  Per-token matrix
products are evaluated as broadcast multiply-reduce along fixed axes, so
each token's row is computed by an identical instruction sequence.  The
result: permuting the input points permutes the output rows bitwise.

Token layout: N point tokens, then the timestep token, then (when
conditioned) the projected one-hot command token.  The output head reads
only the first N tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .autodiff import (
    Tensor, concat, const, gelu, layer_norm, pad_hw, parameter, relu,
    softmax_last, take_flat, take_rows,
)

Array = NDArray[np.float64]

T_MAX = 50


@dataclass(frozen=True)
class DenoiserConfig:
    feature_dim: int = 64
    pos_dim: int = 64
    blocks: int = 6
    heads: int = 4
    encoder_channels: tuple[int, ...] = (32, 64, 64)
    n_points: int = 50
    command_vocab: int = 6
    mlp_hidden: int = 512
    head_hidden: int = 128
    image_height: int = 128
    image_width: int = 256
    in_channels: int = 4
    t_max: int = T_MAX

    def __post_init__(self) -> None:
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must divide evenly into heads")
        if self.pos_dim % 4 != 0:
            raise ValueError("pos_dim must be divisible by 4")
        if self.model_dim % 2 != 0:
            raise ValueError("model_dim must be even")
        if self.encoder_channels[-1] != self.feature_dim:
            raise ValueError("last encoder stage must emit feature_dim channels")
        stride = 2 ** len(self.encoder_channels)
        if self.image_height % stride or self.image_width % stride:
            raise ValueError(f"image dims must be divisible by {stride}")

    @property
    def model_dim(self) -> int:
        return self.feature_dim + self.pos_dim

    @property
    def feature_height(self) -> int:
        return self.image_height // 2 ** len(self.encoder_channels)

    @property
    def feature_width(self) -> int:
        return self.image_width // 2 ** len(self.encoder_channels)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Array:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def init_params(cfg: DenoiserConfig, seed: int = 0,
                zero_head: bool = True) -> dict[str, Tensor]:
    """Fresh parameter dict.  ``zero_head`` makes the untrained model
    predict exactly zero noise, which pins the initial training loss."""
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.encoder_channels):
        fan_in = 9 * cin
        p[f"enc{i}.w"] = parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in),
                                              (fan_in, cout)))
        p[f"enc{i}.b"] = parameter(np.zeros(cout))
        cin = cout
    d, hid = cfg.model_dim, cfg.mlp_hidden
    for j in range(cfg.blocks):
        pre = f"blk{j}"
        p[f"{pre}.ln1.g"] = parameter(np.ones(d))
        p[f"{pre}.ln1.b"] = parameter(np.zeros(d))
        for nm in ("wq", "wk", "wv", "wo"):
            p[f"{pre}.attn.{nm}"] = parameter(_xavier(rng, d, d))
            p[f"{pre}.attn.{nm.replace('w', 'b')}"] = parameter(np.zeros(d))
        p[f"{pre}.ln2.g"] = parameter(np.ones(d))
        p[f"{pre}.ln2.b"] = parameter(np.zeros(d))
        p[f"{pre}.mlp.w1"] = parameter(_xavier(rng, d, hid))
        p[f"{pre}.mlp.b1"] = parameter(np.zeros(hid))
        p[f"{pre}.mlp.w2"] = parameter(_xavier(rng, hid, d))
        p[f"{pre}.mlp.b2"] = parameter(np.zeros(d))
    p["cmd.w"] = parameter(rng.normal(0.0, 0.02, (cfg.command_vocab, d)))
    p["final_ln.g"] = parameter(np.ones(d))
    p["final_ln.b"] = parameter(np.zeros(d))
    p["head.w1"] = parameter(_xavier(rng, d, cfg.head_hidden))
    p["head.b1"] = parameter(np.zeros(cfg.head_hidden))
    p["head.w2"] = parameter(np.zeros((cfg.head_hidden, 2)) if zero_head
                             else _xavier(rng, cfg.head_hidden, 2))
    p["head.b2"] = parameter(np.zeros(2))
    return p


def param_names(params: dict[str, Tensor]) -> list[str]:
    """The canonical flat ordering used for checkpoints."""
    return sorted(params)


# ---------------------------------------------------------------------------
# encoder


_CONV_IDX_CACHE: dict[tuple[int, int, int, int], NDArray[np.int64]] = {}


def _conv_indices(b: int, h: int, w: int, c: int) -> NDArray[np.int64]:
    """Flat gather indices turning a padded (B,H+2,W+2,C) tensor into
    stride-2 3x3 patches of shape (B, (H/2)*(W/2), 9*C)."""
    key = (b, h, w, c)
    if key not in _CONV_IDX_CACHE:
        if len(_CONV_IDX_CACHE) > 16:
            _CONV_IDX_CACHE.clear()
        hp, wp = h + 2, w + 2
        h2, w2 = h // 2, w // 2
        rows = (np.arange(h2) * 2)[:, None] + np.arange(3)[None]
        cols = (np.arange(w2) * 2)[:, None] + np.arange(3)[None]
        idx = ((np.arange(b)[:, None, None, None, None, None] * hp
                + rows[None, :, None, :, None, None]) * wp
               + cols[None, None, :, None, :, None]) * c \
            + np.arange(c)[None, None, None, None, None, :]
        _CONV_IDX_CACHE[key] = np.ascontiguousarray(
            idx.reshape(b, h2 * w2, 9 * c))
    return _CONV_IDX_CACHE[key]


def conv_encoder(params: dict[str, Tensor], cfg: DenoiserConfig,
                 images) -> Tensor:
    """Stride-2 conv stages with ReLU; (B,H,W,C) in, (B,H/8,W/8,D_f) out."""
    x = images if isinstance(images, Tensor) else const(images)
    if x.data.ndim != 4:
        raise ValueError("conv_encoder expects a (B, H, W, C) batch")
    b, h, w, cin = x.shape
    if cin != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {cin}")
    stride = 2 ** len(cfg.encoder_channels)
    if h % stride or w % stride:
        raise ValueError(f"image dims must be divisible by {stride}")
    for i, cout in enumerate(cfg.encoder_channels):
        col = take_flat(pad_hw(x, 1), _conv_indices(b, h, w, cin))
        y = col @ params[f"enc{i}.w"] + params[f"enc{i}.b"]
        h, w, cin = h // 2, w // 2, cout
        x = relu(y).reshape(b, h, w, cout)
    return x


# ---------------------------------------------------------------------------
# embeddings


def fourier_pos_embed(points: Array, pos_dim: int) -> Array:
    """Sin/cos of x and y at pos_dim/4 doubling frequencies, base 1."""
    if pos_dim % 4 != 0:
        raise ValueError("pos_dim must be divisible by 4")
    pts = np.asarray(points, dtype=np.float64)
    freqs = 2.0 ** np.arange(pos_dim // 4)
    ax = pts[..., 0:1] * freqs
    ay = pts[..., 1:2] * freqs
    blocks = np.stack([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)], axis=-1)
    return blocks.reshape(pts.shape[:-1] + (pos_dim,))


def sinusoidal_time_embed(t: int, dim: int, t_max: int = T_MAX) -> Array:
    if not 0 <= t <= t_max:
        raise ValueError(f"timestep {t} outside [0, {t_max}]")
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


# ---------------------------------------------------------------------------
# bilinear feature sampling


def _bilinear_grid(points: Array, hf: int, wf: int):
    """Corner indices and weights, align-corners-false, border clamp."""
    px = np.clip((points[..., 0] + 1.0) * 0.5 * wf - 0.5, 0.0, wf - 1.0)
    py = np.clip((points[..., 1] + 1.0) * 0.5 * hf - 0.5, 0.0, hf - 1.0)
    x0 = np.minimum(np.floor(px), wf - 2).astype(np.int64)
    y0 = np.minimum(np.floor(py), hf - 2).astype(np.int64)
    wx = px - x0
    wy = py - y0
    return x0, y0, wx, wy


def bilinear_features(features: Tensor, points: Array,
                      img_of_sample: NDArray[np.int64]) -> Tensor:
    """Sample per-point feature vectors; no gradient flows to coordinates.

    ``features`` is (B_img, H', W', C); ``points`` is (B, N, 2) normalized;
    ``img_of_sample`` maps each of the B samples to its source image.
    """
    b_img, hf, wf, c = features.shape
    if hf < 2 or wf < 2:
        raise ValueError("feature map too small for bilinear sampling")
    flat = features.reshape(b_img * hf * wf, c)
    x0, y0, wx, wy = _bilinear_grid(np.asarray(points, dtype=np.float64), hf, wf)
    img = np.asarray(img_of_sample, dtype=np.int64).reshape(-1, *([1] * (x0.ndim - 1)))

    def corner(yy, xx, weight):
        rows = (img * hf + yy) * wf + xx
        return take_rows(flat, rows) * const(weight[..., None])

    return corner(y0, x0, (1 - wx) * (1 - wy)) \
        + corner(y0, x0 + 1, wx * (1 - wy)) \
        + corner(y0 + 1, x0, (1 - wx) * wy) \
        + corner(y0 + 1, x0 + 1, wx * wy)


def bilinear_sample(features: Tensor, points: Array) -> Tensor:
    """Single-image convenience wrapper: (1,H',W',C) or (H',W',C) features."""
    f = features if isinstance(features, Tensor) else const(features)
    if f.data.ndim == 3:
        f = f.reshape(1, *f.data.shape)
    pts = np.asarray(points, dtype=np.float64)[None]
    out = bilinear_features(f, pts, np.zeros(1, dtype=np.int64))
    return out.reshape(*pts.shape[1:-1], f.data.shape[-1])


# ---------------------------------------------------------------------------
# batched transformer forward (autodiff)


def _command_onehot(command_ids: NDArray, vocab: int) -> Array:
    # id -1 is the null command: an all-zero row, so the projected token
    # is zero and conditioned checkpoints can also sample unconditioned
    ids = np.asarray(command_ids, dtype=np.int64)
    if ids.min() < -1 or ids.max() >= vocab:
        raise ValueError("command id outside vocabulary")
    onehot = np.zeros((ids.size, vocab))
    keep = np.flatnonzero(ids >= 0)
    onehot[keep, ids[keep]] = 1.0
    return onehot


def denoiser_forward_batch(params: dict[str, Tensor], cfg: DenoiserConfig,
                           features: Tensor, points: Array,
                           ts: NDArray, command_ids: Optional[NDArray],
                           img_of_sample: NDArray) -> Tensor:
    """Predicted noise (B, N, 2) for a batch sharing one conditioning mode.

    ``command_ids`` is either None (unconditioned batch, no command token)
    or one id per sample.  Mixed batches are not supported: the token count
    must be uniform across the batch.
    """
    pts = np.asarray(points, dtype=np.float64)
    b, n = pts.shape[0], pts.shape[1]
    if n != cfg.n_points:
        raise ValueError(f"expected {cfg.n_points} contour points, got {n}")
    d = cfg.model_dim

    f = bilinear_features(features, pts, np.asarray(img_of_sample, dtype=np.int64))
    e = const(fourier_pos_embed(pts, cfg.pos_dim))
    tokens = [concat([f, e], axis=-1)]

    t_arr = np.asarray(ts, dtype=np.int64).reshape(b)
    t_emb = np.stack([sinusoidal_time_embed(int(t), d, cfg.t_max) for t in t_arr])
    tokens.append(const(t_emb[:, None, :]))
    if command_ids is not None:
        onehot = const(_command_onehot(command_ids, cfg.command_vocab))
        cmd_tok = (onehot @ params["cmd.w"]).reshape(b, 1, d)
        tokens.append(cmd_tok)
    x = concat(tokens, axis=1)

    heads, dh = cfg.heads, d // cfg.heads
    t_total = x.shape[1]
    for j in range(cfg.blocks):
        pre = f"blk{j}"
        ln = layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])

        def split(nm):
            y = ln @ params[f"{pre}.attn.w{nm}"] + params[f"{pre}.attn.b{nm}"]
            return y.reshape(b, t_total, heads, dh).transpose(0, 2, 1, 3)

        q, k, v = split("q"), split("k"), split("v")
        scores = (q @ k.transpose(0, 1, 3, 2)).scale(1.0 / math.sqrt(dh))
        attn = softmax_last(scores) @ v
        merged = attn.transpose(0, 2, 1, 3).reshape(b, t_total, d)
        x = x + (merged @ params[f"{pre}.attn.wo"] + params[f"{pre}.attn.bo"])
        ln2 = layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        h = gelu(ln2 @ params[f"{pre}.mlp.w1"] + params[f"{pre}.mlp.b1"])
        x = x + (h @ params[f"{pre}.mlp.w2"] + params[f"{pre}.mlp.b2"])

    x = layer_norm(x, params["final_ln.g"], params["final_ln.b"])
    pts_tok = x.slice_axis1(0, n)
    h = gelu(pts_tok @ params["head.w1"] + params["head.b1"])
    return h @ params["head.w2"] + params["head.b2"]


# ---------------------------------------------------------------------------
# exact single-sample forward (order-canonical reductions)


def _rowwise_linear(x: Array, w: Array, b: Array) -> Array:
    # broadcast multiply-reduce keeps each row's arithmetic identical
    return (x[:, :, None] * w[None, :, :]).sum(axis=1) + b


def _exact_layer_norm(x: Array, g: Array, b: Array, eps: float = 1e-5) -> Array:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return g * ((x - mu) / np.sqrt(var + eps)) + b


def _gelu_np(x: Array) -> Array:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def _exact_attention(x: Array, p: dict[str, Tensor], pre: str, heads: int) -> Array:
    t, d = x.shape
    dh = d // heads
    q = _rowwise_linear(x, p[f"{pre}.attn.wq"].data, p[f"{pre}.attn.bq"].data)
    k = _rowwise_linear(x, p[f"{pre}.attn.wk"].data, p[f"{pre}.attn.bk"].data)
    v = _rowwise_linear(x, p[f"{pre}.attn.wv"].data, p[f"{pre}.attn.bv"].data)
    q = q.reshape(t, heads, dh)
    k = k.reshape(t, heads, dh)
    v = v.reshape(t, heads, dh)
    out = np.empty((t, heads, dh))
    inv = 1.0 / math.sqrt(dh)
    for h in range(heads):
        qh, kh, vh = q[:, h], k[:, h], v[:, h]
        scores = (qh[:, None, :] * kh[None, :, :]).sum(axis=-1) * inv
        for i in range(t):
            row = scores[i]
            e = np.exp(row - row.max())
            prob = e / math.fsum(e)
            weighted = prob[:, None] * vh
            for c in range(dh):
                out[i, h, c] = math.fsum(weighted[:, c])
    return out.reshape(t, d)


def denoiser_forward(params: dict[str, Tensor], cfg: DenoiserConfig,
                     image: Array, contour: Array, t: int,
                     command: Optional[int] = None) -> Array:
    """Single-sample predicted noise (N, 2), exactly permutation equivariant.

    ``image`` is (H, W, C) channels-last; ``contour`` is (N, 2) normalized.
    Permuting the contour rows permutes the output rows with bitwise
    equality (see module docstring for why).
    """
    img = np.asarray(image, dtype=np.float64)
    pts = np.asarray(contour, dtype=np.float64)
    if pts.shape != (cfg.n_points, 2):
        raise ValueError(f"expected ({cfg.n_points}, 2) contour, got {pts.shape}")
    features = conv_encoder(params, cfg, img[None]).data
    f = bilinear_sample(const(features[0]), pts).data
    e = fourier_pos_embed(pts, cfg.pos_dim)
    rows = [np.concatenate([f, e], axis=-1),
            sinusoidal_time_embed(int(t), cfg.model_dim, cfg.t_max)[None]]
    if command is not None:
        if not -1 <= int(command) < cfg.command_vocab:
            raise ValueError("command id outside vocabulary")
        if int(command) >= 0:
            rows.append(params["cmd.w"].data[int(command)][None])
        else:
            rows.append(np.zeros((1, cfg.model_dim)))
    x = np.vstack(rows)

    for j in range(cfg.blocks):
        pre = f"blk{j}"
        ln = _exact_layer_norm(x, params[f"{pre}.ln1.g"].data,
                               params[f"{pre}.ln1.b"].data)
        a = _exact_attention(ln, params, pre, cfg.heads)
        x = x + _rowwise_linear(a, params[f"{pre}.attn.wo"].data,
                                params[f"{pre}.attn.bo"].data)
        ln2 = _exact_layer_norm(x, params[f"{pre}.ln2.g"].data,
                                params[f"{pre}.ln2.b"].data)
        h = _gelu_np(_rowwise_linear(ln2, params[f"{pre}.mlp.w1"].data,
                                     params[f"{pre}.mlp.b1"].data))
        x = x + _rowwise_linear(h, params[f"{pre}.mlp.w2"].data,
                                params[f"{pre}.mlp.b2"].data)

    x = _exact_layer_norm(x, params["final_ln.g"].data, params["final_ln.b"].data)
    pts_tok = x[:cfg.n_points]
    h = _gelu_np(_rowwise_linear(pts_tok, params["head.w1"].data,
                                 params["head.b1"].data))
    return _rowwise_linear(h, params["head.w2"].data, params["head.b2"].data)
