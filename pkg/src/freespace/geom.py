"""Planar rigid-body geometry, occupancy grids, and ground-plane camera projection.

Conventions, used consistently across the package:

Ground plane
    Right-handed planar frame with ``x`` pointing to the ego vehicle's
    right and ``y`` pointing forward, both in meters.  Headings are
    counter-clockwise radians with ``theta = 0`` facing forward along
    ``+y``, so a left turn increases ``theta``.  Angles are normalized
    to ``(-pi, pi]``.

Occupancy grids
    A grid cell ``(row, col)`` covers the square
    ``[origin_x + col*res, origin_x + (col+1)*res) x
    [origin_y + row*res, origin_y + (row+1)*res)`` and its sample point
    is the cell center ``(origin_x + (col+0.5)*res,
    origin_y + (row+0.5)*res)``.  A cell is set iff its center lies
    inside the polygon under the even-odd rule with half-open edge
    intervals: an edge ``(x0,y0)-(x1,y1)`` crosses the scanline at
    ``py`` iff ``(y0 > py) != (y1 > py)``, at abscissa
    ``x0 + (py - y0) * (x1 - x0) / (y1 - y0)``, and the center is
    inside iff an odd number of crossings lie strictly to its right.
    Both the scanline rasterizer and any per-cell brute-force check
    evaluate these exact expressions, so they agree bitwise.

Images
    Pixel ``(row, col)`` has its center at ``(col + 0.5, row + 0.5)``
    in pixel coordinates; ``row`` grows downward.  Image masks use the
    same center-sampling rule as grids.

Camera
    Pinhole model with axes ``x`` right, ``y`` down, ``z`` forward
    (optical axis).  ``rotation`` maps the level ego-aligned frame
    (``x`` right, ``y`` down, ``z`` forward along the heading) into the
    camera frame; a camera pitched down by ``phi`` uses a rotation
    about the level ``x`` axis.  The camera sits ``height`` meters
    above the ground, so the ground point ``(u, v)`` (lateral ``u``,
    forward ``v`` in the ego frame) is the level-frame vector
    ``(u, height, v)``.  Projection of a camera-frame point
    ``(X, Y, Z)`` is ``px = fx * (X / Z) + cx``,
    ``py = fy * (Y / Z) + cy``, with the matrix product expanded
    left-to-right as ``(R[i,0]*vx + R[i,1]*vy) + R[i,2]*vz``.  Points
    with ``Z <= EPS_DEPTH`` are behind the near plane.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

logger = logging.getLogger(__name__)

EPS_DEPTH = 1e-6
DEGENERATE_AREA = 1e-12

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Normalize an angle to the half-open interval (-pi, pi]."""
    return math.pi - (math.pi - theta) % TWO_PI


@dataclass(frozen=True)
class Pose2:
    """Planar pose: position in meters, heading in radians (wrapped)."""

    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite pose ({self.x}, {self.y}, {self.theta})")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def position(self) -> NDArray[np.float64]:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True)
class Rigid2:
    """Planar rigid transform: rotation angle plus translation vector.

    Note the translation convention: :func:`relative_pose` stores the raw
    world-axis position difference, not the difference rotated into the
    reference heading.  Callers that need a camera-aligned result must
    anchor the pose window first (see ``freespace_gen``).
    """

    rotation: float
    translation: tuple[float, float]

    def __post_init__(self) -> None:
        tx, ty = self.translation
        if not (math.isfinite(self.rotation) and math.isfinite(tx) and math.isfinite(ty)):
            raise ValueError("non-finite rigid transform")
        object.__setattr__(self, "rotation", wrap_angle(self.rotation))
        object.__setattr__(self, "translation", (float(tx), float(ty)))

    def matrix(self) -> NDArray[np.float64]:
        """3x3 homogeneous matrix (rotation applied before translation)."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        tx, ty = self.translation
        return np.array([[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]])


def relative_pose(reference: Pose2, other: Pose2) -> Rigid2:
    """Displacement and heading change of ``other`` w.r.t. ``reference``.

    The translation is the world-axis difference ``other - reference``;
    the rotation is the wrapped heading difference.
    """
    return Rigid2(
        rotation=wrap_angle(other.theta - reference.theta),
        translation=(other.x - reference.x, other.y - reference.y),
    )


def rotation_matrix2(theta: float) -> NDArray[np.float64]:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def footprint_corners(transform: Rigid2, width: float, length: float) -> NDArray[np.float64]:
    """Corners of a ``width x length`` rectangle under a rigid transform.

    The rectangle is centered at the origin with width along ``x`` and
    length along ``y``; corners are returned in counter-clockwise order
    starting at the rear-left one, shape ``(4, 2)``.
    """
    if width <= 0 or length <= 0:
        raise ValueError("footprint dimensions must be positive")
    hw, hl = 0.5 * width, 0.5 * length
    base = np.array(
        [[-hw, hw, hw, -hw],
         [-hl, -hl, hl, hl]]
    )
    moved = rotation_matrix2(transform.rotation) @ base
    moved[0] += transform.translation[0]
    moved[1] += transform.translation[1]
    return moved.T.copy()


# ---------------------------------------------------------------------------
# occupancy grids


@dataclass
class GridMask:
    """Boolean occupancy grid over the ground plane.

    ``bits`` is row-major ``(height, width)``; columns index the lateral
    ``x`` axis and rows the forward ``y`` axis (see module docstring for
    the cell geometry).
    """

    width: int
    height: int
    resolution: float
    origin: tuple[float, float]
    bits: NDArray[np.bool_]

    def __post_init__(self) -> None:
        if self.resolution <= 0:
            raise ValueError("grid resolution must be positive")
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.shape != (self.height, self.width):
            raise ValueError(
                f"bits shape {self.bits.shape} != (height, width) = "
                f"({self.height}, {self.width})"
            )
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @classmethod
    def empty(cls, width: int, height: int, resolution: float,
              origin: tuple[float, float]) -> "GridMask":
        return cls(width, height, resolution, origin,
                   np.zeros((height, width), dtype=bool))

    def count(self) -> int:
        return int(self.bits.sum())

    def area(self) -> float:
        """Total set area in square meters."""
        return self.count() * self.resolution * self.resolution

    def same_spec(self, other: "GridMask") -> bool:
        return (self.width == other.width and self.height == other.height
                and self.resolution == other.resolution
                and self.origin == other.origin)

    def cell_centers(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Center coordinates: ``(xs, ys)`` with xs ``(width,)``, ys ``(height,)``."""
        xs = self.origin[0] + (np.arange(self.width) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(self.height) + 0.5) * self.resolution
        return xs, ys


def union_masks(masks: Sequence[GridMask]) -> GridMask:
    """OR a non-empty sequence of grids sharing one spec."""
    if not masks:
        raise ValueError("union_masks needs at least one mask")
    first = masks[0]
    out = first.bits.copy()
    for m in masks[1:]:
        if not first.same_spec(m):
            raise ValueError("union_masks requires identical grid specs")
        out |= m.bits
    return GridMask(first.width, first.height, first.resolution, first.origin, out)


@dataclass
class ImageMask:
    """Boolean mask in image pixel space, ``bits`` shape ``(height, width)``."""

    width: int
    height: int
    bits: NDArray[np.bool_]

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.shape != (self.height, self.width):
            raise ValueError("image mask bits shape mismatch")

    @classmethod
    def empty(cls, width: int, height: int) -> "ImageMask":
        return cls(width, height, np.zeros((height, width), dtype=bool))

    def count(self) -> int:
        return int(self.bits.sum())


# ---------------------------------------------------------------------------
# scanline rasterization
#
# Sample points along an axis are off + (index + 0.5) * scale.  The helpers
# below convert a half-open span [a, b) in sample coordinates into the exact
# index range whose sample points fall inside, fixing up float ceil by one
# step with the same comparison the brute-force rule would use.


def _first_index_at_or_above(v: NDArray, off: float, scale: float) -> NDArray[np.int64]:
    base = np.ceil((v - off) / scale - 0.5)
    base -= (off + ((base - 1.0) + 0.5) * scale) >= v
    base += (off + (base + 0.5) * scale) < v
    return base.astype(np.int64)


def _fill_spans(bits: NDArray[np.bool_], rows: NDArray[np.int64],
                js: NDArray[np.int64], je: NDArray[np.int64]) -> None:
    """OR half-open column runs [js, je) on the given rows into ``bits``."""
    n_rows, n_cols = bits.shape
    keep = js < je
    if not keep.any():
        return
    rows, js, je = rows[keep], js[keep], je[keep]
    delta = np.zeros((n_rows, n_cols + 1), dtype=np.int32)
    np.add.at(delta, (rows, js), 1)
    np.add.at(delta, (rows, je), -1)
    np.cumsum(delta, axis=1, out=delta)
    bits |= delta[:, :n_cols] > 0


def _fill_convex_batch(verts: NDArray[np.float64], n_cols: int, n_rows: int,
                       off: tuple[float, float] = (0.0, 0.0),
                       scale: float = 1.0) -> NDArray[np.bool_]:
    """Rasterize a batch of convex polygons (padded to equal vertex count).

    ``verts`` has shape ``(Q, K, 2)``; repeated vertices padding a short
    polygon contribute zero-height edges and are harmless.  Returns the OR
    of all polygons as a ``(n_rows, n_cols)`` boolean array.
    """
    bits = np.zeros((n_rows, n_cols), dtype=bool)
    if verts.size == 0:
        return bits
    off_x, off_y = off
    ymin = verts[:, :, 1].min(axis=1)
    ymax = verts[:, :, 1].max(axis=1)
    r_lo = np.clip(np.floor((ymin - off_y) / scale - 0.5).astype(np.int64) - 1, 0, n_rows)
    r_hi = np.clip(np.ceil((ymax - off_y) / scale - 0.5).astype(np.int64) + 2, 0, n_rows)
    counts = np.maximum(r_hi - r_lo, 0)
    total = int(counts.sum())
    if total == 0:
        return bits
    quad = np.repeat(np.arange(len(verts)), counts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    rows = np.arange(total) - np.repeat(starts, counts) + np.repeat(r_lo, counts)
    py = off_y + (rows + 0.5) * scale

    k = verts.shape[1]
    span_lo = np.full(total, np.inf)
    span_hi = np.full(total, -np.inf)
    has = np.zeros(total, dtype=bool)
    for e in range(k):
        x0 = verts[quad, e, 0]
        y0 = verts[quad, e, 1]
        x1 = verts[quad, (e + 1) % k, 0]
        y1 = verts[quad, (e + 1) % k, 1]
        crossing = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_int = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        x_int = np.where(crossing, x_int, np.nan)
        span_lo = np.where(crossing & ~(x_int >= span_lo), x_int, span_lo)
        span_hi = np.where(crossing & ~(x_int <= span_hi), x_int, span_hi)
        has |= crossing
    rows = rows[has]
    if rows.size == 0:
        return bits
    a, b = span_lo[has], span_hi[has]
    js = np.clip(_first_index_at_or_above(a, off_x, scale), 0, n_cols)
    je = np.clip(_first_index_at_or_above(b, off_x, scale), 0, n_cols)
    _fill_spans(bits, rows, js, je)
    return bits


def _fill_evenodd(verts: NDArray[np.float64], n_cols: int, n_rows: int,
                  off: tuple[float, float] = (0.0, 0.0),
                  scale: float = 1.0) -> NDArray[np.bool_]:
    """Generic even-odd scanline fill for a single simple polygon."""
    bits = np.zeros((n_rows, n_cols), dtype=bool)
    off_x, off_y = off
    ymin, ymax = verts[:, 1].min(), verts[:, 1].max()
    r_lo = max(int(math.floor((ymin - off_y) / scale - 0.5)) - 1, 0)
    r_hi = min(int(math.ceil((ymax - off_y) / scale - 0.5)) + 2, n_rows)
    x0s = verts[:, 0]
    y0s = verts[:, 1]
    x1s = np.roll(x0s, -1)
    y1s = np.roll(y0s, -1)
    for r in range(r_lo, r_hi):
        py = off_y + (r + 0.5) * scale
        crossing = (y0s > py) != (y1s > py)
        if not crossing.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xs = x0s[crossing] + (py - y0s[crossing]) * (x1s[crossing] - x0s[crossing]) \
                / (y1s[crossing] - y0s[crossing])
        xs.sort()
        for i in range(0, len(xs) - 1, 2):
            pair = np.array([xs[i], xs[i + 1]])
            j = np.clip(_first_index_at_or_above(pair, off_x, scale), 0, n_cols)
            if j[0] < j[1]:
                bits[r, j[0]:j[1]] = True
    return bits


def _polygon_area(verts: NDArray[np.float64]) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _is_convex(verts: NDArray[np.float64]) -> bool:
    d = np.roll(verts, -1, axis=0) - verts
    cross = d[:, 0] * np.roll(d, -1, axis=0)[:, 1] - d[:, 1] * np.roll(d, -1, axis=0)[:, 0]
    nz = cross[np.abs(cross) > 1e-15]
    return nz.size == 0 or bool(np.all(nz > 0) or np.all(nz < 0))


def rasterize_polygon(vertices: ArrayLike, width: int, height: int,
                      resolution: float, origin: tuple[float, float]) -> GridMask:
    """Rasterize a simple polygon (world coordinates) onto a grid.

    A cell is set iff its center is inside the polygon (even-odd rule).
    Degenerate polygons (absolute area below ``DEGENERATE_AREA``) yield an
    empty mask and a logged warning.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
        raise ValueError("polygon needs at least 3 (x, y) vertices")
    if not np.isfinite(verts).all():
        raise ValueError("polygon vertices must be finite")
    if abs(_polygon_area(verts)) < DEGENERATE_AREA:
        logger.warning("degenerate polygon (area ~ 0), rasterizing to empty mask")
        return GridMask.empty(width, height, resolution, origin)
    if _is_convex(verts):
        bits = _fill_convex_batch(verts[None], width, height, origin, resolution)
    else:
        bits = _fill_evenodd(verts, width, height, origin, resolution)
    return GridMask(width, height, resolution, origin, bits)


def fill_polygon_pixels(vertices: ArrayLike, width: int, height: int) -> NDArray[np.bool_]:
    """Even-odd fill of a polygon given in pixel coordinates.

    Returns a ``(height, width)`` boolean array; a pixel is set iff its
    center ``(col + 0.5, row + 0.5)`` is inside.  Accepts arbitrary simple
    polygons (the convex fast path is picked automatically).
    """
    verts = np.asarray(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
        raise ValueError("polygon needs at least 3 (x, y) vertices")
    if abs(_polygon_area(verts)) < DEGENERATE_AREA:
        return np.zeros((height, width), dtype=bool)
    if _is_convex(verts):
        return _fill_convex_batch(verts[None], width, height)
    return _fill_evenodd(verts, width, height)


# ---------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera looking at the ground plane (see module docstring)."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: NDArray[np.float64]
    height: float
    image_width: int
    image_height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.height <= 0:
            raise ValueError("camera height must be positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9 or np.linalg.det(rot) < 0:
            raise ValueError("rotation must be orthonormal (within 1e-9) and proper")
        object.__setattr__(self, "rotation", rot)

    @classmethod
    def pitched(cls, fx: float, fy: float, cx: float, cy: float,
                pitch_down: float, height: float,
                image_width: int, image_height: int) -> "CameraModel":
        """Camera pitched down by ``pitch_down`` radians about the level x axis."""
        c, s = math.cos(pitch_down), math.sin(pitch_down)
        rot = np.array([[1.0, 0.0, 0.0],
                        [0.0, c, -s],
                        [0.0, s, c]])
        return cls(fx, fy, cx, cy, rot, height, image_width, image_height)

    def pixel_rays(self) -> NDArray[np.float64]:
        """Level-frame direction for each pixel center, shape ``(H, W, 3)``."""
        cols = (np.arange(self.image_width) + 0.5 - self.cx) / self.fx
        rows = (np.arange(self.image_height) + 0.5 - self.cy) / self.fy
        dir_cam = np.empty((self.image_height, self.image_width, 3))
        dir_cam[:, :, 0] = cols[None, :]
        dir_cam[:, :, 1] = rows[:, None]
        dir_cam[:, :, 2] = 1.0
        # rotation maps level -> camera, so rays go back through the transpose
        return dir_cam @ self.rotation


def _camera_frame(camera: CameraModel, gx: NDArray, gy: NDArray
                  ) -> tuple[NDArray, NDArray, NDArray]:
    """Camera-frame coordinates of ground points, expanded left-to-right."""
    r = camera.rotation
    h = camera.height
    cxv = (r[0, 0] * gx + r[0, 1] * h) + r[0, 2] * gy
    cyv = (r[1, 0] * gx + r[1, 1] * h) + r[1, 2] * gy
    czv = (r[2, 0] * gx + r[2, 1] * h) + r[2, 2] * gy
    return cxv, cyv, czv


def project_ground_point(camera: CameraModel,
                         point: tuple[float, float]) -> Optional[tuple[float, float]]:
    """Project a ground-plane point (ego frame, meters) to pixel coordinates.

    Returns ``None`` when the point is behind the near plane
    (depth <= ``EPS_DEPTH``) or projects outside the image.
    """
    gx = np.float64(point[0])
    gy = np.float64(point[1])
    cxv, cyv, czv = _camera_frame(camera, gx, gy)
    if czv <= EPS_DEPTH:
        return None
    px = camera.fx * (cxv / czv) + camera.cx
    py = camera.fy * (cyv / czv) + camera.cy
    if not (0.0 <= px < camera.image_width and 0.0 <= py < camera.image_height):
        return None
    return float(px), float(py)


def _clip_front(points: list[NDArray[np.float64]], eps: float) -> list[NDArray[np.float64]]:
    """Sutherland-Hodgman clip of a camera-frame polygon against z > eps."""
    out: list[NDArray[np.float64]] = []
    n = len(points)
    for i in range(n):
        p, q = points[i], points[(i + 1) % n]
        p_in, q_in = p[2] > eps, q[2] > eps
        if p_in:
            out.append(p)
        if p_in != q_in:
            t = (eps - p[2]) / (q[2] - p[2])
            out.append(p + t * (q - p))
    return out


def project_mask(camera: CameraModel, grid: GridMask) -> ImageMask:
    """Project a ground-plane grid mask into the image.

    Every set cell is projected as the quadrilateral of its four corners
    and filled under the same center-sampling rule as the rasterizer; the
    result is the union over cells, so it is independent of cell order.
    Cells partially behind the near plane are clipped; cells entirely
    behind it vanish.
    """
    out = ImageMask.empty(camera.image_width, camera.image_height)
    rows, cols = np.nonzero(grid.bits)
    if rows.size == 0:
        return out

    xs = grid.origin[0] + np.arange(grid.width + 1) * grid.resolution
    ys = grid.origin[1] + np.arange(grid.height + 1) * grid.resolution
    gx, gy = np.meshgrid(xs, ys)
    cxv, cyv, czv = _camera_frame(camera, gx, gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * (cxv / czv) + camera.cx
        py = camera.fy * (cyv / czv) + camera.cy

    # corner lattice indices per set cell, in counter-clockwise BEV order
    cr = np.stack([rows, rows, rows + 1, rows + 1], axis=1)
    cc = np.stack([cols, cols + 1, cols + 1, cols], axis=1)
    depth = czv[cr, cc]
    front = (depth > EPS_DEPTH).all(axis=1)

    if front.any():
        verts = np.stack([px[cr[front], cc[front]], py[cr[front], cc[front]]], axis=2)
        out.bits |= _fill_convex_batch(verts, camera.image_width, camera.image_height)

    partial = ~front & (depth > EPS_DEPTH).any(axis=1)
    if partial.any():
        clipped: list[NDArray[np.float64]] = []
        for i in np.nonzero(partial)[0]:
            cam_pts = [np.array([cxv[cr[i, k], cc[i, k]],
                                 cyv[cr[i, k], cc[i, k]],
                                 czv[cr[i, k], cc[i, k]]]) for k in range(4)]
            poly = _clip_front(cam_pts, EPS_DEPTH)
            if len(poly) < 3:
                continue
            pts = np.array([[camera.fx * (p[0] / p[2]) + camera.cx,
                             camera.fy * (p[1] / p[2]) + camera.cy] for p in poly])
            # pad to a fixed vertex count with repeats (zero-length edges)
            pad = np.vstack([pts, np.repeat(pts[-1:], 5 - len(pts), axis=0)]) \
                if len(pts) < 5 else pts[:5]
            clipped.append(pad)
        if clipped:
            out.bits |= _fill_convex_batch(np.stack(clipped),
                                           camera.image_width, camera.image_height)
    return out
