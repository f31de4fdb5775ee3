"""Self-supervised free-space sample generation from driving logs.

A driving log supplies a camera, per-frame poses, maneuver commands, and
detected obstacle boxes.  For a reference frame ``t`` the future ego
footprints are swept into a ground-plane strip, projected into the image,
cut back at the nearest overlapping obstacle, and the remaining free-space
blob is turned into a fixed-length closed contour in normalized image
coordinates.  No manual annotation is involved anywhere.

Contours are canonical: the start point is the one with maximum image
``y`` (ties broken by minimum ``x``), the orientation is clockwise in
image coordinates, and points are spaced uniformly in arc length.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import ndimage

from . import geom
from .geom import CameraModel, GridMask, ImageMask, Pose2, Rigid2

logger = logging.getLogger(__name__)

COMMANDS = (
    "follow-lane",
    "go-straight",
    "turn-left",
    "turn-right",
    "change-lane-to-left",
    "change-lane-to-right",
)

N_POINTS = 50

# default BEV grid: 30 m lateral x 60 m forward at 0.1 m, ego at mid-bottom
GRID_WIDTH = 300
GRID_HEIGHT = 600
GRID_RESOLUTION = 0.1
GRID_ORIGIN = (-15.0, 0.0)

MIN_KEPT_DISPLACEMENT = 0.05


def command_index(command: str) -> int:
    try:
        return COMMANDS.index(command)
    except ValueError:
        raise ValueError(f"unknown command {command!r}") from None


@dataclass(frozen=True)
class ObstacleBox:
    """Detected obstacle: image-space box, plus an optional BEV footprint.

    ``image_box`` is ``(x_min, y_min, x_max, y_max)`` in pixel coordinates;
    ``bev_footprint`` is a ``(4, 2)`` polygon in meters, expressed in the
    ego frame of the log frame that owns the detection.
    """

    image_box: tuple[float, float, float, float]
    bev_footprint: Optional[NDArray[np.float64]] = None

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.image_box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"malformed image box {self.image_box}")
        if self.bev_footprint is not None:
            bev = np.asarray(self.bev_footprint, dtype=np.float64)
            if bev.shape != (4, 2) or not np.isfinite(bev).all():
                raise ValueError("bev_footprint must be a finite (4, 2) polygon")
            object.__setattr__(self, "bev_footprint", bev)


@dataclass
class LogFrame:
    pose: Pose2
    command: str
    timestamp: float
    obstacles: list[ObstacleBox] = field(default_factory=list)
    image: Optional[NDArray[np.uint8]] = None

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")


@dataclass
class DrivingLog:
    """Camera plus an ordered frame sequence from one driving episode."""

    camera: CameraModel
    frames: list[LogFrame]
    ego_width: float = 2.0
    ego_length: float = 4.5
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.frames) < 2:
            raise ValueError("a driving log needs at least 2 frames")
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("log timestamps must be strictly increasing")
        if self.ego_width <= 0 or self.ego_length <= 0:
            raise ValueError("ego dimensions must be positive")


# ---------------------------------------------------------------------------
# contours


def normalize_points(points_px: ArrayLike, width: int, height: int) -> NDArray[np.float64]:
    """Pixel coordinates -> normalized [-1, 1] image coordinates."""
    pts = np.asarray(points_px, dtype=np.float64)
    out = np.empty_like(pts)
    out[..., 0] = 2.0 * pts[..., 0] / width - 1.0
    out[..., 1] = 2.0 * pts[..., 1] / height - 1.0
    return out


def denormalize_points(points: ArrayLike, width: int, height: int) -> NDArray[np.float64]:
    """Normalized [-1, 1] image coordinates -> pixel coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.empty_like(pts)
    out[..., 0] = (pts[..., 0] + 1.0) * 0.5 * width
    out[..., 1] = (pts[..., 1] + 1.0) * 0.5 * height
    return out


def _canonical_start(points: NDArray[np.float64]) -> int:
    """Index of the max-y point, ties broken by min x."""
    y = points[:, 1]
    cands = np.nonzero(y == y.max())[0]
    if len(cands) == 1:
        return int(cands[0])
    return int(cands[np.argmin(points[cands, 0])])


def _signed_area(points: NDArray[np.float64]) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def canonicalize_points(points: NDArray[np.float64]) -> NDArray[np.float64]:
    """Rotate the cyclic order to the canonical start and fix orientation.

    With image ``y`` growing downward, positive signed area means clockwise
    on screen, which is the canonical orientation.  Works in normalized or
    pixel coordinates (both are positively-scaled image coordinates).
    """
    pts = np.asarray(points, dtype=np.float64)
    pts = np.roll(pts, -_canonical_start(pts), axis=0)
    if _signed_area(pts) < 0.0:
        pts = np.concatenate([pts[:1], pts[:0:-1]], axis=0)
    return pts


@dataclass(frozen=True)
class Contour:
    """Closed free-space contour, normalized image coordinates, canonical order."""

    points: NDArray[np.float64]

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise ValueError("contour needs at least 3 (x, y) points")
        if not np.isfinite(pts).all():
            raise ValueError("contour points must be finite")
        if np.abs(pts).max() > 1.0 + 1e-9:
            raise ValueError("contour points must lie in [-1, 1]")
        if pts[0, 1] < pts[:, 1].max() - 1e-12:
            raise ValueError("contour start must be the max-y point")
        if _signed_area(pts) < -1e-12:
            raise ValueError("contour must be clockwise in image coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


_MOORE = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))
_MOORE_INDEX = {d: i for i, d in enumerate(_MOORE)}


def _trace_border(bits: NDArray[np.bool_]) -> list[tuple[int, int]]:
    """Moore-neighbor border of one 8-connected component, ordered.

    ``bits`` must contain exactly one component.  Returns border pixels as
    ``(row, col)`` in traversal order; the start is the first foreground
    pixel in raster order and termination uses Jacob's criterion (re-enter
    the start pixel with the same successor).
    """
    padded = np.zeros((bits.shape[0] + 2, bits.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = bits
    rows, cols = np.nonzero(padded)
    start = (int(rows[0]), int(cols[0]))
    ring = [start]
    cur = start
    back_dir = 4  # west of the raster-first pixel is always background
    first_move: Optional[tuple[tuple[int, int], tuple[int, int]]] = None
    limit = 4 * len(rows) + 8
    for _ in range(limit):
        nxt = None
        for k in range(1, 9):
            d = (back_dir + k) % 8
            cand = (cur[0] + _MOORE[d][0], cur[1] + _MOORE[d][1])
            if padded[cand]:
                nxt = cand
                prev_checked = (back_dir + k - 1) % 8
                break
        if nxt is None:
            break  # isolated pixel
        if first_move is None:
            first_move = (cur, nxt)
        elif (cur, nxt) == first_move:
            ring.pop()  # the re-entered start was already appended
            break
        ring.append(nxt)
        before = (cur[0] + _MOORE[prev_checked][0], cur[1] + _MOORE[prev_checked][1])
        back_dir = _MOORE_INDEX[(before[0] - nxt[0], before[1] - nxt[1])]
        cur = nxt
    return [(r - 1, c - 1) for r, c in ring]


def extract_contour(mask: ImageMask) -> NDArray[np.float64]:
    """Ordered outer border of the largest 8-connected mask component.

    Returns pixel-center coordinates ``(x, y) = (col + 0.5, row + 0.5)``,
    shape ``(K, 2)``.  Smaller components are discarded (logged).  Raises
    ``ValueError`` on an empty mask.
    """
    if not mask.bits.any():
        raise ValueError("cannot extract a contour from an empty mask")
    labels, n = ndimage.label(mask.bits, structure=np.ones((3, 3), dtype=int))
    if n > 1:
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        keep = int(np.argmax(sizes))
        logger.warning("mask has %d components, keeping the largest", n)
        component = labels == keep
    else:
        component = mask.bits
    ring = _trace_border(component)
    pts = np.array(ring, dtype=np.float64)
    return np.stack([pts[:, 1] + 0.5, pts[:, 0] + 0.5], axis=1)


def component_count(mask: ImageMask) -> int:
    _, n = ndimage.label(mask.bits, structure=np.ones((3, 3), dtype=int))
    return int(n)


def resample_contour(raw: ArrayLike, n: int, width: int, height: int) -> Contour:
    """Resample a raw closed border to ``n`` uniformly spaced points.

    The raw points are pixel coordinates.  Equal-arc sampling is iterated
    to a fixed point, so the output points end up uniformly spaced along
    the polygon they themselves define; resampling an already-uniform
    contour is then an exact no-op.  The start point is pinned to the
    canonical anchor of the raw border (max image ``y``, ties by min
    ``x``) and the result is normalized by the image dimensions and
    canonicalized (clockwise in image coordinates).
    """
    pts = np.asarray(raw, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("need at least 3 raw points")
    if n < 3:
        raise ValueError("need n >= 3 output points")
    # drop consecutive duplicates (border traces revisit 1-px-wide necks)
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    pts = pts[keep]
    if len(pts) > 1 and np.all(pts[0] == pts[-1]):
        pts = pts[:-1]
    if len(pts) < 3:
        raise ValueError("degenerate raw contour")

    cur = pts
    first = True
    for _ in range(50):
        seg = np.linalg.norm(np.roll(cur, -1, axis=0) - cur, axis=1)
        cum = np.concatenate(([0.0], np.cumsum(seg)))
        perimeter = float(cum[-1])
        if perimeter < 1e-9:
            raise ValueError("degenerate raw contour (zero perimeter)")
        s0 = cum[_canonical_start(cur)] if first else 0.0
        targets = (s0 + np.arange(n) * (perimeter / n)) % perimeter
        closed = np.vstack([cur, cur[:1]])
        new = np.stack([np.interp(targets, cum, closed[:, 0]),
                        np.interp(targets, cum, closed[:, 1])], axis=1)
        done = (not first) and np.abs(new - cur).max() < 1e-9
        cur = new
        first = False
        if done:
            break
    out = canonicalize_points(cur)
    return Contour(normalize_points(out, width, height))


# ---------------------------------------------------------------------------
# footprint strips and obstacle clipping


def future_footprint_union(log: DrivingLog, t: int, *,
                           grid_width: int = GRID_WIDTH,
                           grid_height: int = GRID_HEIGHT,
                           resolution: float = GRID_RESOLUTION,
                           origin: tuple[float, float] = GRID_ORIGIN) -> GridMask:
    """Union of future ego footprints on a BEV grid aligned with frame ``t``.

    The pose window ``t..end`` is first anchored to the reference pose
    (rotated and translated so frame ``t`` sits at the origin with zero
    heading); the per-frame displacement and heading change then come from
    :func:`geom.relative_pose` on the anchored poses.  Future frames moving
    less than 0.05 m from the previously kept frame are skipped, except the
    first future frame which is always kept.
    """
    if not 0 <= t < len(log.frames) - 1:
        raise ValueError(f"reference index {t} needs at least one future frame")
    ref = log.frames[t].pose
    c, s = math.cos(ref.theta), math.sin(ref.theta)

    def anchored(p: Pose2) -> Pose2:
        dx, dy = p.x - ref.x, p.y - ref.y
        return Pose2(c * dx + s * dy, -s * dx + c * dy, p.theta - ref.theta)

    anchor_ref = anchored(ref)
    quads = []
    last: Optional[Pose2] = None
    for frame in log.frames[t + 1:]:
        p = frame.pose
        if last is not None and math.hypot(p.x - last.x, p.y - last.y) < MIN_KEPT_DISPLACEMENT:
            continue
        last = p
        rel = geom.relative_pose(anchor_ref, anchored(p))
        quads.append(geom.footprint_corners(rel, log.ego_width, log.ego_length))
    bits = geom._fill_convex_batch(np.stack(quads), grid_width, grid_height,
                                   origin, resolution)
    return GridMask(grid_width, grid_height, resolution, origin, bits)


def _polygon_distance_to_origin(poly: NDArray[np.float64]) -> float:
    best = math.inf
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        d = b - a
        denom = float(d @ d)
        t = 0.0 if denom == 0.0 else min(1.0, max(0.0, float(-(a @ d)) / denom))
        best = min(best, float(np.linalg.norm(a + t * d)))
    return best


def _pixels_in_box(mask_bits: NDArray[np.bool_],
                   box: tuple[float, float, float, float]) -> bool:
    """Any set pixel whose center lies strictly inside the box?"""
    x0, y0, x1, y1 = box
    h, w = mask_bits.shape
    c0 = max(int(math.floor(x0 + 0.5)), 0)       # first col with c+0.5 > x0
    c1 = min(int(math.ceil(x1 - 0.5)), w)        # cols with c+0.5 < x1 end here
    r0 = max(int(math.floor(y0 + 0.5)), 0)
    r1 = min(int(math.ceil(y1 - 0.5)), h)
    if c0 >= c1 or r0 >= r1:
        return False
    return bool(mask_bits[r0:r1, c0:c1].any())


def clip_to_nearest_obstacle(footprint: GridMask,
                             obstacles: Sequence[ObstacleBox],
                             camera: CameraModel) -> ImageMask:
    """Project a footprint strip into the image and cut it at an obstacle.

    Among obstacles whose image box overlaps the projected strip, the
    nearest one is selected (smallest BEV footprint distance to the ego
    when all candidates carry one, otherwise the box reaching lowest in
    the image) and every strip pixel whose center lies above the bottom
    edge of its box is removed.  No overlap means no cut.
    """
    projected = geom.project_mask(camera, footprint)
    if not projected.bits.any() or not obstacles:
        return projected
    candidates = [ob for ob in obstacles if _pixels_in_box(projected.bits, ob.image_box)]
    if not candidates:
        return projected
    if all(ob.bev_footprint is not None for ob in candidates):
        nearest = min(candidates,
                      key=lambda ob: _polygon_distance_to_origin(ob.bev_footprint))
    else:
        nearest = max(candidates, key=lambda ob: ob.image_box[3])
    y_cut = nearest.image_box[3]
    r_cut = int(geom._first_index_at_or_above(np.array([y_cut]), 0.0, 1.0)[0])
    r_cut = min(max(r_cut, 0), projected.height)
    projected.bits[:r_cut, :] = False
    return projected


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class DatasetConfig:
    n_points: int = N_POINTS
    min_travel: float = 5.0
    min_area_px: int = 200
    frame_stride: int = 1
    min_roundtrip_iou: float = 0.95
    grid_width: int = GRID_WIDTH
    grid_height: int = GRID_HEIGHT
    resolution: float = GRID_RESOLUTION
    origin: tuple[float, float] = GRID_ORIGIN


@dataclass
class FreespaceSample:
    """One training sample: contour + mask + command for a log frame."""

    log_index: int
    frame_index: int
    contour: Contour
    mask: ImageMask
    command: str


@dataclass
class BuildResult:
    samples: list[FreespaceSample]
    skip_counts: dict[str, int]


def _mask_iou(a: NDArray[np.bool_], b: NDArray[np.bool_]) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _point_strictly_inside(points_px: NDArray[np.float64],
                           box: tuple[float, float, float, float]) -> bool:
    x0, y0, x1, y1 = box
    inside = (points_px[:, 0] > x0) & (points_px[:, 0] < x1) \
        & (points_px[:, 1] > y0) & (points_px[:, 1] < y1)
    return bool(inside.any())


def build_dataset(logs: Sequence[DrivingLog],
                  config: DatasetConfig = DatasetConfig()) -> BuildResult:
    """Run the full sample-generation pipeline over a batch of logs.

    Frames are skipped (and counted by reason) when the remaining travel
    is shorter than ``min_travel``, the clipped mask is empty or smaller
    than ``min_area_px``, the contour degenerates, the contour/mask
    round-trip IoU falls below ``min_roundtrip_iou``, or a contour point
    lands strictly inside an obstacle box.  Every emitted sample therefore
    satisfies the pipeline invariants by construction.
    """
    samples: list[FreespaceSample] = []
    skips: dict[str, int] = {}

    def skip(reason: str) -> None:
        skips[reason] = skips.get(reason, 0) + 1

    for log_index, log in enumerate(logs):
        poses = [f.pose for f in log.frames]
        steps = [math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(poses, poses[1:])]
        remaining = np.concatenate((np.cumsum(steps[::-1])[::-1], [0.0]))
        width, height = log.camera.image_width, log.camera.image_height
        for t in range(0, len(log.frames) - 1, config.frame_stride):
            if remaining[t] < config.min_travel:
                skip("short_horizon")
                continue
            strip = future_footprint_union(
                log, t, grid_width=config.grid_width, grid_height=config.grid_height,
                resolution=config.resolution, origin=config.origin)
            mask = clip_to_nearest_obstacle(strip, log.frames[t].obstacles, log.camera)
            area = mask.count()
            if area == 0:
                skip("empty_mask")
                continue
            if area < config.min_area_px:
                skip("small_mask")
                continue
            try:
                raw = extract_contour(mask)
                contour = resample_contour(raw, config.n_points, width, height)
            except ValueError:
                skip("degenerate_contour")
                continue
            points_px = denormalize_points(contour.points, width, height)
            refilled = geom.fill_polygon_pixels(points_px, width, height)
            if _mask_iou(refilled, mask.bits) < config.min_roundtrip_iou:
                skip("roundtrip_iou")
                continue
            if any(_point_strictly_inside(points_px, ob.image_box)
                   for ob in log.frames[t].obstacles):
                skip("contour_in_obstacle")
                continue
            samples.append(FreespaceSample(log_index, t, contour, mask,
                                           log.frames[t].command))
    logger.info("built %d samples (skips: %s)", len(samples), skips)
    return BuildResult(samples, skips)
