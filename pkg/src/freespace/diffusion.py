"""Cosine-schedule DDPM over contour points.

The reverse update instantiates the standard DDPM posterior: with
eps_hat = eps_theta(I, c_t, t),

    c_{t-1} = (c_t - (beta_t / sqrt(1 - abar_t)) * eps_hat) / sqrt(alpha_t)
              + sigma_t * z,

where sigma_t^2 = beta_t * (1 - abar_{t-1}) / (1 - abar_t) and z is fresh
standard normal for t > 1 and zero at t = 1 (the sigma_1 coefficient is
itself zero, so the last step is deterministic either way).

Training draws t uniformly from {1..t_max} per element and regresses the
injected noise; the loss sums squared error over the two coordinates and
averages over batch and points, so an untrained zero-output model scores
exactly 2 on unit-variance noise.

Obstacle guidance operates in normalized image coordinates: points
strictly inside a detection box move toward the nearest box edge by
``lam`` times their interior depth.  Guided sampling finishes with full
projection passes so no returned point stays strictly inside a box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .freespace_gen import Contour, ObstacleBox, canonicalize_points
from .nn import (
    DenoiserConfig, Tensor, collect_grads, const, conv_encoder,
    denoiser_forward_batch, zero_grads,
)

Array = NDArray[np.float64]

T_MAX = 50
COSINE_S = 0.008
BETA_MAX = 0.999
GUIDANCE_LAMBDA = 0.5
GUIDED_T_MAX = 10
TEMPLATE_T = 10
TEMPLATE_K = 32


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients; index 0 is the identity step (abar_0 = 1)."""

    t_max: int
    betas: Array
    alphas: Array
    alpha_bar: Array
    posterior_var: Array

    def sigma(self, t: int) -> float:
        return math.sqrt(self.posterior_var[t])


def cosine_schedule(t_max: int = T_MAX) -> NoiseSchedule:
    """Cosine beta schedule; abar is recomputed from the clipped betas so
    the product identity holds exactly."""
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    ts = np.arange(t_max + 1, dtype=np.float64)
    f = np.cos(((ts / t_max + COSINE_S) / (1.0 + COSINE_S)) * (math.pi / 2)) ** 2
    raw_bar = f / f[0]
    betas = np.zeros(t_max + 1)
    betas[1:] = np.clip(1.0 - raw_bar[1:] / raw_bar[:-1], 0.0, BETA_MAX)
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    posterior_var = np.zeros(t_max + 1)
    posterior_var[1:] = betas[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    return NoiseSchedule(t_max=t_max, betas=betas, alphas=alphas,
                         alpha_bar=alpha_bar, posterior_var=posterior_var)


def forward_diffuse(c0: Array, t: int, noise: Array,
                    schedule: NoiseSchedule) -> Array:
    if not 0 <= t <= schedule.t_max:
        raise ValueError(f"timestep {t} outside [0, {schedule.t_max}]")
    bar = schedule.alpha_bar[t]
    return math.sqrt(bar) * np.asarray(c0, dtype=np.float64) \
        + math.sqrt(1.0 - bar) * np.asarray(noise, dtype=np.float64)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingBatch:
    """One optimizer batch; samples index into a deduplicated image stack.

    ``command_ids`` is None for an unconditioned batch (the conditioning
    dropout decision is per batch, so token counts stay uniform).
    """

    images: Array                       # (B_img, H, W, C)
    img_of_sample: NDArray[np.int64]    # (B,)
    contours: Array                     # (B, N, 2)
    command_ids: Optional[NDArray[np.int64]] = None


def training_loss(params: dict[str, Tensor], cfg: DenoiserConfig,
                  schedule: NoiseSchedule, batch: TrainingBatch,
                  rng: np.random.Generator) -> tuple[float, dict[str, Array]]:
    """Sample t and noise, corrupt, regress; returns (loss, gradients)."""
    b = batch.contours.shape[0]
    if b == 0:
        raise ValueError("empty training batch")
    ts = rng.integers(1, schedule.t_max + 1, size=b)
    eps = rng.standard_normal((b, cfg.n_points, 2))
    bars = schedule.alpha_bar[ts][:, None, None]
    noisy = np.sqrt(bars) * batch.contours + np.sqrt(1.0 - bars) * eps

    zero_grads(params)
    features = conv_encoder(params, cfg, batch.images)
    out = denoiser_forward_batch(params, cfg, features, noisy, ts,
                                 batch.command_ids, batch.img_of_sample)
    diff = out - const(eps)
    loss = (diff * diff).sum(axis=-1).mean()
    loss.backward()
    return float(loss.data), collect_grads(params)


# ---------------------------------------------------------------------------
# guidance


def _normalized_boxes(obstacles: Sequence[ObstacleBox],
                      width: int, height: int) -> Array:
    boxes = np.array([ob.image_box for ob in obstacles], dtype=np.float64)
    if boxes.size == 0:
        return boxes.reshape(0, 4)
    boxes[:, 0::2] = 2.0 * boxes[:, 0::2] / width - 1.0
    boxes[:, 1::2] = 2.0 * boxes[:, 1::2] / height - 1.0
    return boxes


def obstacle_guidance_step(points: Array, obstacles: Sequence[ObstacleBox],
                           lam: float, width: int, height: int) -> Array:
    """Push points strictly inside any detection box toward its nearest edge.

    Works in normalized coordinates.  Each interior point moves by
    ``lam * depth`` along the axis of its nearest edge; ``lam = 1`` lands
    it exactly on the boundary (no longer strictly inside).  Boxes are
    applied in order, so overlapping boxes may need repeated passes.
    """
    if lam <= 0:
        raise ValueError("guidance strength must be positive")
    pts = np.asarray(points, dtype=np.float64).copy()
    for x0, y0, x1, y1 in _normalized_boxes(obstacles, width, height):
        inside = (pts[:, 0] > x0) & (pts[:, 0] < x1) \
            & (pts[:, 1] > y0) & (pts[:, 1] < y1)
        if not inside.any():
            continue
        px, py = pts[inside, 0], pts[inside, 1]
        depths = np.stack([px - x0, x1 - px, py - y0, y1 - py])
        edge = depths.argmin(axis=0)
        d = lam * depths[edge, np.arange(px.size)]
        px = px + np.where(edge == 0, -d, np.where(edge == 1, d, 0.0))
        py = py + np.where(edge == 2, -d, np.where(edge == 3, d, 0.0))
        pts[inside, 0] = px
        pts[inside, 1] = py
    return pts


def _point_in_any_box(points: Array, boxes: Array) -> NDArray[np.bool_]:
    if boxes.shape[0] == 0:
        return np.zeros(len(points), dtype=bool)
    x, y = points[:, 0:1], points[:, 1:2]
    inside = (x > boxes[:, 0]) & (x < boxes[:, 2]) \
        & (y > boxes[:, 1]) & (y < boxes[:, 3])
    return inside.any(axis=1)


def _union_exit(value: float, intervals: Array) -> tuple[float, float]:
    """Nearest exits along one axis from the union of open intervals.

    Merges, transitively, every interval strictly containing the running
    endpoints, so the result lies on the boundary of the union.  Returns
    (lo, hi) with lo <= value <= hi.
    """
    lo = hi = value
    changed = True
    while changed:
        changed = False
        for a, b in intervals:
            if a < lo < b or a < hi < b:
                lo, hi = min(lo, a), max(hi, b)
                changed = True
    return lo, hi


def project_outside_obstacles(points: Array, obstacles: Sequence[ObstacleBox],
                              width: int, height: int) -> Array:
    """Move points strictly inside any box onto the box union's boundary.

    A single full-strength guidance pass can ping-pong between overlapping
    boxes, so each offending point instead takes the smallest axis-aligned
    displacement that exits every box stacked along that axis.
    """
    pts = np.asarray(points, dtype=np.float64).copy()
    boxes = _normalized_boxes(obstacles, width, height)
    for i in np.flatnonzero(_point_in_any_box(pts, boxes)):
        x, y = pts[i]
        strip_x = boxes[(boxes[:, 1] < y) & (y < boxes[:, 3])][:, [0, 2]]
        strip_y = boxes[(boxes[:, 0] < x) & (x < boxes[:, 2])][:, [1, 3]]
        x_lo, x_hi = _union_exit(x, strip_x)
        y_lo, y_hi = _union_exit(y, strip_y)
        moves = [(x - x_lo, x_lo, y), (x_hi - x, x_hi, y),
                 (y - y_lo, x, y_lo), (y_hi - y, x, y_hi)]
        pts[i] = min(moves)[1:]
    return pts


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SamplerConfig:
    init: str = "gaussian"                  # "gaussian" | "template"
    start_t: Optional[int] = None           # default: t_max, or 10 for template
    guidance: str = "off"                   # "off" | "obstacle"
    guidance_strength: float = GUIDANCE_LAMBDA
    guided_t_max: int = GUIDED_T_MAX
    command: Optional[int] = None
    seed: int = 0
    template: Optional[Array] = None
    obstacles: tuple[ObstacleBox, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.init not in ("gaussian", "template"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.guidance not in ("off", "obstacle"):
            raise ValueError(f"unknown guidance {self.guidance!r}")
        if self.init == "template" and self.template is None:
            raise ValueError("template init requires a template")
        if self.guidance == "obstacle" and self.guidance_strength <= 0:
            raise ValueError("guidance strength must be positive")

    def resolved_start_t(self, t_max: int) -> int:
        start = self.start_t if self.start_t is not None \
            else (TEMPLATE_T if self.init == "template" else t_max)
        if not 1 <= start <= t_max:
            raise ValueError(f"start_t {start} outside [1, {t_max}]")
        return start


def _reverse_mean(c_t: Array, eps_hat: Array, t: int,
                  schedule: NoiseSchedule) -> Array:
    gamma = schedule.betas[t] / math.sqrt(1.0 - schedule.alpha_bar[t])
    return (c_t - gamma * eps_hat) / math.sqrt(schedule.alphas[t])


def reverse_step(params: dict[str, Tensor], cfg: DenoiserConfig,
                 schedule: NoiseSchedule, image: Array, c_t: Array, t: int,
                 rng: np.random.Generator, config: SamplerConfig,
                 features: Optional[Tensor] = None) -> Array:
    """One posterior step on a single sample.

    ``features`` short-circuits the encoder; callers looping over t should
    pass it (the sampler does), otherwise the image is re-encoded.
    """
    if not 1 <= t <= schedule.t_max:
        raise ValueError(f"timestep {t} outside [1, {schedule.t_max}]")
    img = np.asarray(image, dtype=np.float64)
    if features is None:
        features = conv_encoder(params, cfg, img[None])
    cmd = None if config.command is None else np.array([config.command])
    eps_hat = denoiser_forward_batch(params, cfg, features,
                                     np.asarray(c_t, dtype=np.float64)[None],
                                     np.array([t]), cmd,
                                     np.zeros(1, dtype=np.int64)).data[0]
    mean = _reverse_mean(c_t, eps_hat, t, schedule)
    out = mean if t == 1 else mean + schedule.sigma(t) * rng.standard_normal(c_t.shape)
    if config.guidance == "obstacle" and t <= config.guided_t_max:
        out = obstacle_guidance_step(out, config.obstacles,
                                     config.guidance_strength,
                                     img.shape[1], img.shape[0])
    return out


def sample(params: dict[str, Tensor], cfg: DenoiserConfig,
           schedule: NoiseSchedule, image: Array,
           config: SamplerConfig) -> Contour:
    """Draw one contour for an image under the given sampler config."""
    img = np.asarray(image, dtype=np.float64)
    features = conv_encoder(params, cfg, img[None])
    rng = np.random.default_rng(config.seed)
    start_t = config.resolved_start_t(schedule.t_max)
    if config.init == "gaussian":
        c = rng.standard_normal((cfg.n_points, 2))
    else:
        c = np.asarray(config.template, dtype=np.float64).copy()
        if c.shape != (cfg.n_points, 2):
            raise ValueError("template shape mismatch")
    for t in range(start_t, 0, -1):
        c = reverse_step(params, cfg, schedule, img, c, t, rng, config,
                         features=features)
    if config.guidance == "obstacle":
        c = project_outside_obstacles(c, config.obstacles,
                                      img.shape[1], img.shape[0])
    return _finish_contour(c)


def _finish_contour(points: Array) -> Contour:
    """Decode a sampled point set into an ordered, canonical Contour.

    The denoiser is permutation equivariant, so the reverse chain leaves
    the points in whatever index order the initial noise had; the set
    defines the region but not a traversal.  Sorting by angle around the
    centroid recovers a boundary order (exact for regions star-shaped
    about the centroid, which projected free-space strips are in
    practice), after which the usual start/orientation canon applies.
    """
    pts = np.clip(points, -1.0, 1.0)
    center = pts.mean(axis=0)
    angles = np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0])
    ordered = pts[np.argsort(angles, kind="stable")]
    return Contour(canonicalize_points(ordered))


def sample_batch(params: dict[str, Tensor], cfg: DenoiserConfig,
                 schedule: NoiseSchedule, features: Tensor,
                 img_of_sample: NDArray[np.int64],
                 configs: Sequence[SamplerConfig],
                 image_width: int, image_height: int) -> list[Contour]:
    """Vectorized sampling: one reverse chain over many samples at once.

    Each sample follows its own config seed, so results are bitwise equal
    to running :func:`sample` per sample (same features, same seeds), and
    independent of how samples are grouped into batches.  All configs must
    share init mode, start_t, and conditioning presence; per-sample
    command, template, obstacles, and seed may differ.
    """
    b = len(configs)
    if b == 0:
        return []
    if b != len(img_of_sample):
        raise ValueError("one config per sample required")
    start_t = configs[0].resolved_start_t(schedule.t_max)
    init = configs[0].init
    conditioned = configs[0].command is not None
    for c in configs:
        if (c.init, c.resolved_start_t(schedule.t_max),
                c.command is not None) != (init, start_t, conditioned):
            raise ValueError("batch configs must share init, start_t, "
                             "and conditioning presence")
    rngs = [np.random.default_rng(c.seed) for c in configs]
    n = cfg.n_points
    if init == "gaussian":
        pts = np.stack([r.standard_normal((n, 2)) for r in rngs])
    else:
        pts = np.stack([np.asarray(c.template, dtype=np.float64)
                        for c in configs])
    cmd = np.array([c.command for c in configs]) if conditioned else None

    for t in range(start_t, 0, -1):
        eps_hat = denoiser_forward_batch(params, cfg, features, pts,
                                         np.full(b, t), cmd,
                                         img_of_sample).data
        mean = _reverse_mean(pts, eps_hat, t, schedule)
        if t == 1:
            pts = mean
        else:
            z = np.stack([r.standard_normal((n, 2)) for r in rngs])
            pts = mean + schedule.sigma(t) * z
        for i, c in enumerate(configs):
            if c.guidance == "obstacle" and t <= c.guided_t_max:
                pts[i] = obstacle_guidance_step(pts[i], c.obstacles,
                                                c.guidance_strength,
                                                image_width, image_height)
    out = []
    for i, c in enumerate(configs):
        p = pts[i]
        if c.guidance == "obstacle":
            p = project_outside_obstacles(p, c.obstacles,
                                          image_width, image_height)
        out.append(_finish_contour(p))
    return out


# ---------------------------------------------------------------------------
# noise templates


def make_noise_template(contours: Sequence[Contour], rng: np.random.Generator,
                        k: int = TEMPLATE_K, t_template: int = TEMPLATE_T,
                        schedule: Optional[NoiseSchedule] = None) -> Array:
    """Forward-diffused pointwise mean of k same-command contours."""
    if len(contours) < k:
        raise ValueError(f"need at least {k} contours, have {len(contours)}")
    if schedule is None:
        schedule = cosine_schedule()
    stack = np.stack([c.points for c in contours[:k]])
    # pairwise tree sum: exact pointwise mean when k is a power of two
    while stack.shape[0] > 1:
        odd = stack[-1:] if stack.shape[0] % 2 else stack[:0]
        half = stack.shape[0] // 2
        stack = np.concatenate([stack[:half] + stack[half:2 * half], odd])
    mean = stack[0] / k
    noise = rng.standard_normal(mean.shape)
    return forward_diffuse(mean, t_template, noise, schedule)
