"""Free-space prediction metrics.

Masks live in image pixel space, contours in normalized [-1, 1]
coordinates.  IoU is scored against the single ground-truth mask both as
mean-of-draws (comparable to single-mode scoring) and best-of-draws
(fair to a multimodal sampler); reports carry both, clearly labeled.

Directional deviation summarizes multimodality: each contour is reduced
to a centerline by pairing the two boundary chains between the canonical
start point and its antipode, and the angle of first-to-last centerline
segment is measured in degrees with 90 meaning straight up the image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from . import geom
from .diffusion import NoiseSchedule, SamplerConfig, sample_batch
from .freespace_gen import Contour, ObstacleBox, denormalize_points
from .geom import ImageMask
from .nn import DenoiserConfig, Tensor, conv_encoder

Array = NDArray[np.float64]

DEFAULT_DRAWS = 6


# ---------------------------------------------------------------------------
# mask construction


def contour_to_mask(contour: Contour, width: int, height: int) -> ImageMask:
    """Even-odd scanline fill of the de-normalized contour polygon."""
    points_px = denormalize_points(contour.points, width, height)
    return ImageMask(width, height, geom.fill_polygon_pixels(points_px, width, height))


def boxes_to_mask(boxes: Sequence[ObstacleBox], width: int, height: int) -> ImageMask:
    """Union of axis-aligned detection boxes, pixel-center inclusion."""
    bits = np.zeros((height, width), dtype=bool)
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    for ob in boxes:
        x0, y0, x1, y1 = ob.image_box
        bits |= ((rows > y0) & (rows < y1))[:, None] \
            & ((cols > x0) & (cols < x1))[None, :]
    return ImageMask(width, height, bits)


# ---------------------------------------------------------------------------
# scalar metrics


def _check_dims(a: ImageMask, b: ImageMask) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError("mask dimensions differ")


def iou(a: ImageMask, b: ImageMask) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    _check_dims(a, b)
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.bits, b.bits).sum() / union)


def overlap_fraction(pred: ImageMask, region: ImageMask) -> float:
    """Fraction of the prediction falling inside ``region``; 0 when empty."""
    _check_dims(pred, region)
    total = pred.count()
    if total == 0:
        return 0.0
    return float(np.logical_and(pred.bits, region.bits).sum() / total)


def centerline_angle(contour: Contour, width: int, height: int) -> float:
    """Heading of the contour centerline in degrees, 90 = straight ahead.

    The centerline is the midcurve between the left and right boundary
    chains of the filled contour, taken per image row: on every occupied
    row the midpoint of the row's span extremes.  The angle is that of
    the least-squares line through the midpoints, measured in pixel units
    with rows negated so that up-image motion reads as +90.  Pairing the
    chains row-wise rather than at contour indices keeps a symmetric
    corridor at exactly 90 regardless of where the canonical start anchor
    happens to sit on its boundary.
    """
    bits = contour_to_mask(contour, width, height).bits
    rows = np.flatnonzero(bits.any(axis=1))
    if len(rows) >= 2:
        cols = np.arange(width)
        mids = np.array([0.5 * (cols[bits[r]][0] + cols[bits[r]][-1]) + 0.5
                         for r in rows])
        # least-squares midline; row-extreme endpoints alone would sit on
        # the end-cap corners of a rotated corridor and skew the angle
        r = rows - rows.mean()
        slope = (r * (mids - mids.mean())).sum() / (r * r).sum()
        return math.degrees(math.atan2(1.0, -slope))
    # degenerate (near-empty) fill: fall back to the raw point extremes
    px = denormalize_points(contour.points, width, height)
    low, high = px[px[:, 1].argmax()], px[px[:, 1].argmin()]
    if np.array_equal(low, high):
        return 90.0
    return math.degrees(math.atan2(low[1] - high[1], high[0] - low[0]))


def directional_deviation(contours: Sequence[Contour], width: int, height: int,
                          count: int = DEFAULT_DRAWS) -> tuple[float, float, float]:
    """(mean, population stddev, max-min extent) of centerline angles.

    Reductions use correctly-rounded sums, so the result is bitwise
    invariant to relabeling the samples.
    """
    if len(contours) != count:
        raise ValueError(f"expected {count} contours, have {len(contours)}")
    angles = [centerline_angle(c, width, height) for c in contours]
    mean = math.fsum(angles) / count
    var = math.fsum((a - mean) ** 2 for a in angles) / count
    return mean, math.sqrt(var), max(angles) - min(angles)


# ---------------------------------------------------------------------------
# dataset evaluation


@dataclass(frozen=True)
class EvalCase:
    """One validation image with its ground truth."""

    image: Array                            # (H, W, C) float
    gt_mask: ImageMask
    topology: str
    obstacles: Optional[tuple[ObstacleBox, ...]] = None
    road_mask: Optional[ImageMask] = None   # valid driving area
    command: Optional[int] = None


@dataclass(frozen=True)
class MetricsBlock:
    iou_mean: float
    iou_best: float
    dd_mean: float
    dd_stddev: float
    dd_extent: float
    cases: int
    obstacle_overlap: Optional[float] = None
    offroad_overlap: Optional[float] = None

    def __post_init__(self) -> None:
        for name in ("iou_mean", "iou_best", "obstacle_overlap", "offroad_overlap"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} out of range: {value}")
        if self.dd_extent < 0:
            raise ValueError("dd_extent must be non-negative")


@dataclass(frozen=True)
class MetricsReport:
    overall: MetricsBlock
    by_topology: dict[str, MetricsBlock]
    draws: int

    def to_dict(self) -> dict:
        def block(b: MetricsBlock) -> dict:
            return {k: v for k, v in vars(b).items()}
        return {"draws": self.draws, "overall": block(self.overall),
                "by_topology": {k: block(v) for k, v in
                                sorted(self.by_topology.items())}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"metrics over {self.overall.cases} cases, "
                 f"{self.draws} draws per image"]
        for name, b in [("overall", self.overall)] + sorted(self.by_topology.items()):
            ob = "-" if b.obstacle_overlap is None else f"{b.obstacle_overlap:.4f}"
            off = "-" if b.offroad_overlap is None else f"{b.offroad_overlap:.4f}"
            lines.append(
                f"  {name:<12} n={b.cases:<4} iou mean {b.iou_mean:.4f} "
                f"best {b.iou_best:.4f}  obstacle {ob}  offroad {off}  "
                f"dd {b.dd_mean:7.2f} / {b.dd_stddev:6.2f} / {b.dd_extent:6.2f}")
        return "\n".join(lines)


Sampler = Callable[[Array, Sequence[SamplerConfig]], Sequence[Contour]]
ConfigFor = Union[SamplerConfig, Callable[[EvalCase, int], SamplerConfig]]


def model_sampler(params: Mapping[str, Tensor], cfg: DenoiserConfig,
                  schedule: NoiseSchedule) -> Sampler:
    """Wrap a denoiser checkpoint as an evaluate()-compatible sampler."""
    def run(image: Array, configs: Sequence[SamplerConfig]) -> Sequence[Contour]:
        features = conv_encoder(params, cfg, image[None])
        owner = np.zeros(len(configs), dtype=np.int64)
        return sample_batch(params, cfg, schedule, features, owner,
                            list(configs), cfg.image_width, cfg.image_height)
    return run


def _draw_seed(seed: int, case_index: int, draw: int) -> int:
    state = np.random.SeedSequence((seed, case_index, draw)).generate_state(1, np.uint64)
    return int(state[0])


def _mean_or_none(values: list[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def _aggregate(rows: list[dict], draws: int) -> MetricsBlock:
    return MetricsBlock(
        iou_mean=float(np.mean([r["iou_mean"] for r in rows])),
        iou_best=float(np.mean([r["iou_best"] for r in rows])),
        dd_mean=float(np.mean([r["dd"][0] for r in rows])),
        dd_stddev=float(np.mean([r["dd"][1] for r in rows])),
        dd_extent=float(np.mean([r["dd"][2] for r in rows])),
        cases=len(rows),
        obstacle_overlap=_mean_or_none(
            [r["obstacle"] for r in rows if r["obstacle"] is not None]),
        offroad_overlap=_mean_or_none(
            [r["offroad"] for r in rows if r["offroad"] is not None]))


def evaluate(sampler: Sampler, cases: Sequence[EvalCase],
             config: ConfigFor = SamplerConfig(),
             draws: int = DEFAULT_DRAWS, seed: int = 0) -> MetricsReport:
    """Score a sampler over a validation set.

    Per image, ``draws`` contours are sampled with per-draw seeds derived
    from ``seed`` and the case index, so reports are reproducible and
    independent of evaluation order.  ``config`` is either a single
    sampler configuration or a callable ``(case, draw) -> SamplerConfig``
    (its seed field is overwritten with the derived one).  Metrics whose
    ground truth is missing on a case are averaged over the cases that
    do carry it, and reported absent when none do.
    """
    if not cases:
        raise ValueError("no evaluation cases")
    rows = []
    for index, case in enumerate(cases):
        configs = []
        for draw in range(draws):
            base = config if isinstance(config, SamplerConfig) else config(case, draw)
            configs.append(replace(base, seed=_draw_seed(seed, index, draw)))
        contours = sampler(case.image, configs)
        width, height = case.gt_mask.width, case.gt_mask.height
        masks = [contour_to_mask(c, width, height) for c in contours]
        ious = [iou(m, case.gt_mask) for m in masks]
        row = {"topology": case.topology,
               "iou_mean": float(np.mean(ious)),
               "iou_best": float(np.max(ious)),
               "dd": directional_deviation(contours, width, height, draws),
               "obstacle": None, "offroad": None}
        if case.obstacles is not None:
            region = boxes_to_mask(case.obstacles, width, height)
            row["obstacle"] = float(np.mean(
                [overlap_fraction(m, region) for m in masks]))
        if case.road_mask is not None:
            outside = ImageMask(width, height, ~case.road_mask.bits)
            row["offroad"] = float(np.mean(
                [overlap_fraction(m, outside) for m in masks]))
        rows.append(row)
    by_topology = {}
    for topology in sorted({r["topology"] for r in rows}):
        by_topology[topology] = _aggregate(
            [r for r in rows if r["topology"] == topology], draws)
    return MetricsReport(_aggregate(rows, draws), by_topology, draws)
