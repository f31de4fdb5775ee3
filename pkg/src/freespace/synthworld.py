"""Procedural driving worlds with semantic rendering.

Worlds are unions of axis-aligned road rectangles on the ground plane:
a stem road along ``+y`` that the ego starts on, optionally crossed by a
perpendicular road (T-junction or crossroads).  Trajectories realize the
high-level maneuver commands; semantic images are rendered per pose by
inverse-projecting every pixel onto the ground plane and sampling the
BEV map, with obstacles drawn as upright boxes (1.5 m tall) that occlude
whatever lies behind them.

The world frame coincides with the ego frame at the episode start: poses
emitted in a log are therefore already anchored for the first frame, and
downstream consumers re-anchor per reference frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from . import geom
from .freespace_gen import COMMANDS, DrivingLog, LogFrame, ObstacleBox
from .geom import CameraModel, Pose2

TOPOLOGIES = ("straight", "single_lane", "multi_lane", "t_junction", "crossroads")

EGO_WIDTH = 2.0
EGO_LENGTH = 4.5
OBSTACLE_HEIGHT = 1.5
MARKING_WIDTH = 0.15
POSE_SPACING = 0.5
BLEND_LENGTH = 20.0
FRAME_DT = 0.1

# semantic channel layout
CH_ROAD, CH_MARKING, CH_OBSTACLE, CH_OFFROAD = 0, 1, 2, 3
N_CHANNELS = 4

DEFAULT_CAMERA = CameraModel.pitched(
    fx=110.0, fy=110.0, cx=128.0, cy=44.0,
    pitch_down=math.radians(8.0), height=1.6,
    image_width=256, image_height=128)


class InfeasibleScene(ValueError):
    pass


class InfeasibleCommand(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    topology: str
    lane_count: int = 1
    lane_width: float = 3.5
    obstacle_count: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.lane_count < 1:
            raise ValueError("lane_count must be >= 1")
        if self.topology in ("straight", "single_lane") and self.lane_count != 1:
            raise ValueError(f"{self.topology} requires lane_count == 1")
        if self.topology == "multi_lane" and self.lane_count < 2:
            raise ValueError("multi_lane requires lane_count >= 2")
        if self.lane_width <= EGO_WIDTH:
            raise ValueError("lane_width must exceed the ego width")
        if self.obstacle_count < 0:
            raise ValueError("obstacle_count must be >= 0")


@dataclass(frozen=True)
class OrientedBox:
    """Obstacle rectangle on the ground: center, heading, width x length."""

    center: tuple[float, float]
    heading: float
    width: float
    length: float

    def corners(self) -> NDArray[np.float64]:
        return geom.footprint_corners(
            geom.Rigid2(self.heading, self.center), self.width, self.length)

    def aabb(self) -> tuple[float, float, float, float]:
        c = self.corners()
        return (float(c[:, 0].min()), float(c[:, 1].min()),
                float(c[:, 0].max()), float(c[:, 1].max()))


Rect = tuple[float, float, float, float]  # x0, y0, x1, y1


@dataclass
class World:
    spec: SceneSpec
    road_rects: list[Rect]
    markings: list[Rect]
    centerlines: list[NDArray[np.float64]]
    obstacles: list[OrientedBox]
    ego_lane: int
    lane_centers_x: list[float]
    stem_end: float
    junction: Optional[Rect] = None
    cross_lane_ys: list[float] = field(default_factory=list)

    def contains(self, xs: NDArray, ys: NDArray) -> NDArray[np.bool_]:
        """Point-in-road test over the rectangle union."""
        inside = np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
        for x0, y0, x1, y1 in self.road_rects:
            inside |= (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
        return inside


@dataclass
class SemanticImage:
    """Ground-truth semantic raster: road, lane_marking, obstacle, off_road."""

    width: int
    height: int
    channels: NDArray[np.uint8]  # (4, height, width), values 0/1

    def __post_init__(self) -> None:
        self.channels = np.asarray(self.channels, dtype=np.uint8)
        if self.channels.shape != (N_CHANNELS, self.height, self.width):
            raise ValueError("semantic image channel shape mismatch")

    def as_float(self) -> NDArray[np.float64]:
        return self.channels.astype(np.float64)


# ---------------------------------------------------------------------------
# world generation


def _split_range(lo: float, hi: float, cut: Optional[tuple[float, float]]):
    """Ranges of [lo, hi] outside the cut interval."""
    if cut is None or cut[1] <= lo or cut[0] >= hi:
        return [(lo, hi)]
    parts = []
    if cut[0] > lo:
        parts.append((lo, cut[0]))
    if cut[1] < hi:
        parts.append((cut[1], hi))
    return parts


def generate_world(spec: SceneSpec) -> World:
    """Build a deterministic world from a scene spec (seeded sampling)."""
    rng = np.random.default_rng(spec.seed)
    lw, n = spec.lane_width, spec.lane_count
    ego_lane = int(rng.integers(0, n))
    lane_xs = [(i - ego_lane) * lw for i in range(n)]
    x0 = lane_xs[0] - 0.5 * lw
    x1 = lane_xs[-1] + 0.5 * lw
    y_start = -10.0

    junction: Optional[Rect] = None
    cross_lane_ys: list[float] = []
    road_rects: list[Rect] = []
    if spec.topology in ("t_junction", "crossroads"):
        y_j = float(rng.uniform(24.0, 34.0))
        wc = n * lw
        stem_end = y_j + wc + (35.0 if spec.topology == "crossroads" else 0.0)
        road_rects.append((x0, y_start, x1, stem_end))
        road_rects.append((-45.0, y_j, 45.0, y_j + wc))
        junction = (x0, y_j, x1, y_j + wc)
        cross_lane_ys = [y_j + (m + 0.5) * lw for m in range(n)]
    else:
        stem_end = 70.0
        road_rects.append((x0, y_start, x1, stem_end))

    centerlines = [np.array([[cx, y_start], [cx, stem_end]]) for cx in lane_xs]
    for cy in cross_lane_ys:
        centerlines.append(np.array([[-45.0, cy], [45.0, cy]]))

    markings: list[Rect] = []
    if spec.topology != "straight":
        cut_y = (junction[1], junction[3]) if junction else None
        boundaries_x = [x0] + [lane_xs[i] + 0.5 * lw for i in range(n - 1)] + [x1]
        for bx in boundaries_x:
            for lo, hi in _split_range(y_start, stem_end, cut_y):
                markings.append((bx - MARKING_WIDTH / 2, lo,
                                 bx + MARKING_WIDTH / 2, hi))
        if junction:
            y_j, wc = junction[1], junction[3] - junction[1]
            boundaries_y = [y_j] + [cross_lane_ys[m] + 0.5 * lw for m in range(n - 1)] \
                + [y_j + wc]
            for by in boundaries_y:
                for lo, hi in _split_range(-45.0, 45.0, (x0, x1)):
                    markings.append((lo, by - MARKING_WIDTH / 2,
                                     hi, by + MARKING_WIDTH / 2))

    world = World(spec=spec, road_rects=road_rects, markings=markings,
                  centerlines=centerlines, obstacles=[], ego_lane=ego_lane,
                  lane_centers_x=lane_xs, stem_end=stem_end,
                  junction=junction, cross_lane_ys=cross_lane_ys)
    world.obstacles = _place_obstacles(world, rng)
    return world


def _place_obstacles(world: World, rng: np.random.Generator) -> list[OrientedBox]:
    spec = world.spec
    if spec.obstacle_count == 0:
        return []
    placed: list[OrientedBox] = []
    margin = 3.0
    y_hi = min(world.stem_end - 6.0, 50.0)
    for _ in range(200 * spec.obstacle_count):
        if len(placed) == spec.obstacle_count:
            break
        w = float(rng.uniform(1.8, 2.2))
        length = float(rng.uniform(4.0, 5.0))
        on_cross = bool(world.cross_lane_ys) and rng.random() < 0.3
        if on_cross:
            cy = float(rng.choice(world.cross_lane_ys))
            side = 1.0 if rng.random() < 0.5 else -1.0
            x_inner = (world.junction[2] if side > 0 else world.junction[0]) \
                + side * (margin + length / 2)
            cx = side * float(rng.uniform(abs(x_inner), 25.0))
            box = OrientedBox((cx, cy), -math.pi / 2, w, length)
        else:
            cx = float(rng.choice(world.lane_centers_x))
            cy = float(rng.uniform(8.0, y_hi))
            if world.junction is not None:
                j0, j1 = world.junction[1] - margin, world.junction[3] + margin
                if j0 - length / 2 < cy < j1 + length / 2:
                    continue
            box = OrientedBox((cx, cy), 0.0, w, length)
        if math.hypot(box.center[0], box.center[1]) < 8.0:
            continue
        a = box.aabb()
        if any(_aabb_overlap(a, other.aabb(), 1.0) for other in placed):
            continue
        placed.append(box)
    if len(placed) < spec.obstacle_count:
        raise InfeasibleScene(
            f"could not place {spec.obstacle_count} obstacles (placed {len(placed)})")
    return placed


def _aabb_overlap(a: Rect, b: Rect, margin: float = 0.0) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0]
                or a[3] + margin <= b[1] or b[3] + margin <= a[1])


# ---------------------------------------------------------------------------
# trajectory planning


def feasible_commands(world_or_topology: "World | str") -> tuple[str, ...]:
    """Commands that can be planned; for a World, lane position is honored."""
    topology = world_or_topology if isinstance(world_or_topology, str) \
        else world_or_topology.spec.topology
    cmds = {
        "straight": ("follow-lane",),
        "single_lane": ("follow-lane",),
        "multi_lane": ("follow-lane", "change-lane-to-left", "change-lane-to-right"),
        "t_junction": ("turn-left", "turn-right"),
        "crossroads": ("turn-left", "turn-right", "go-straight"),
    }[topology]
    if isinstance(world_or_topology, World):
        w = world_or_topology
        drop = set()
        if w.ego_lane == 0:
            drop.add("change-lane-to-left")
        if w.ego_lane == w.spec.lane_count - 1:
            drop.add("change-lane-to-right")
        cmds = tuple(c for c in cmds if c not in drop)
    return cmds


def _dense_line(p0, p1, step=0.1):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d = p1 - p0
    length = float(np.hypot(*d))
    m = max(int(math.ceil(length / step)), 1)
    ts = np.linspace(0.0, 1.0, m + 1)
    pts = p0[None] + ts[:, None] * d[None]
    heading = math.atan2(-d[0], d[1])
    return pts, np.full(m + 1, heading)


def _dense_arc(center, r, phi0, phi1, step=0.1):
    length = r * abs(phi1 - phi0)
    m = max(int(math.ceil(length / step)), 2)
    phis = np.linspace(phi0, phi1, m + 1)
    pts = np.stack([center[0] + r * np.cos(phis), center[1] + r * np.sin(phis)], axis=1)
    if phi1 > phi0:   # counter-clockwise: heading equals the arc parameter
        headings = phis.copy()
    else:
        headings = phis - math.pi
    return pts, headings


def _dense_blend(x_from, x_to, y_s, length, y_end, step=0.1):
    """Cosine lateral easing from one lane center to another."""
    ys = np.arange(0.0, y_end + step / 2, step)
    dx = x_to - x_from
    xs = np.full_like(ys, x_from)
    in_blend = (ys >= y_s) & (ys <= y_s + length)
    tt = (ys[in_blend] - y_s) / length
    xs[in_blend] = x_from + dx * 0.5 * (1.0 - np.cos(math.pi * tt))
    xs[ys > y_s + length] = x_to
    slope = np.zeros_like(ys)
    slope[in_blend] = dx * 0.5 * math.pi / length * np.sin(math.pi * tt)
    headings = np.arctan2(-slope, 1.0)
    return np.stack([xs, ys], axis=1), headings


def _resample_path(pts: NDArray, headings: NDArray,
                   spacing: float = POSE_SPACING) -> list[Pose2]:
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    keep = np.concatenate(([True], seg > 1e-12))
    pts, headings = pts[keep], headings[keep]
    cum = np.concatenate(([0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))))
    total = float(cum[-1])
    targets = np.arange(0.0, total + 1e-9, spacing)
    unwrapped = np.unwrap(headings)
    xs = np.interp(targets, cum, pts[:, 0])
    ys = np.interp(targets, cum, pts[:, 1])
    ths = np.interp(targets, cum, unwrapped)
    return [Pose2(float(x), float(y), float(th)) for x, y, th in zip(xs, ys, ths)]


def _truncate_at_obstacles(poses: list[Pose2], world: World) -> list[Pose2]:
    """Stop the episode once the ego would push ~1 m into an obstacle."""
    if not world.obstacles:
        return poses
    boxes = [ob.aabb() for ob in world.obstacles]
    for i, p in enumerate(poses):
        fp = geom.footprint_corners(geom.Rigid2(p.theta, (p.x, p.y)),
                                    EGO_WIDTH, EGO_LENGTH)
        fa = (fp[:, 0].min(), fp[:, 1].min(), fp[:, 0].max(), fp[:, 1].max())
        for b in boxes:
            ox = min(fa[2], b[2]) - max(fa[0], b[0])
            oy = min(fa[3], b[3]) - max(fa[1], b[1])
            if ox > 1.0 and oy > 1.0:
                return poses[:i]
    return poses


def plan_trajectory(world: World, command: str, seed: int = 0) -> list[Pose2]:
    """Plan 0.5 m-spaced poses realizing a command, starting at the origin.

    The ego starts at the origin of its lane center heading ``+y``.  Turns
    use a constant-curvature arc tangent to the incoming and outgoing lane
    centerlines; lane changes ease laterally with a cosine blend over 20 m.
    The trajectory is truncated when the ego footprint would overlap an
    obstacle by more than a meter in both axes.
    """
    if command not in feasible_commands(world.spec.topology):
        raise InfeasibleCommand(
            f"{command!r} is not feasible on {world.spec.topology!r}")
    rng = np.random.default_rng(seed)
    lw = world.spec.lane_width
    end_margin = 3.0

    if command == "follow-lane" or command == "go-straight":
        pts, hs = _dense_line((0.0, 0.0), (0.0, world.stem_end - end_margin))
    elif command in ("turn-left", "turn-right"):
        x0, y_j, x1, y_top = world.junction
        n = world.spec.lane_count
        exit_len = float(rng.uniform(15.0, 20.0))
        if command == "turn-left":
            out_y = y_j + (n - 0.5) * lw
            a, b = -x0, out_y - y_j  # x0 < 0: distance from lane center to edge
            r = min(5.5, 0.85 * min(a, b) / (1.0 - math.cos(math.pi / 4)))
            approach, _ = _dense_line((0.0, 0.0), (0.0, out_y - r))
            arc, arc_h = _dense_arc((-r, out_y - r), r, 0.0, math.pi / 2)
            exit_pts, exit_h = _dense_line((-r, out_y), (-r - exit_len, out_y))
        else:
            out_y = y_j + 0.5 * lw
            a, b = x1, out_y - y_j
            r = min(5.5, 0.85 * min(a, b) / (1.0 - math.cos(math.pi / 4)))
            approach, _ = _dense_line((0.0, 0.0), (0.0, out_y - r))
            arc, arc_h = _dense_arc((r, out_y - r), r, math.pi, math.pi / 2)
            exit_pts, exit_h = _dense_line((r, out_y), (r + exit_len, out_y))
        pts = np.vstack([approach, arc[1:], exit_pts[1:]])
        hs = np.concatenate([np.zeros(len(approach)), arc_h[1:], exit_h[1:]])
    else:  # lane changes
        step = -1 if command == "change-lane-to-left" else 1
        target = world.ego_lane + step
        if not 0 <= target < world.spec.lane_count:
            raise InfeasibleCommand(f"no lane to the "
                                    f"{'left' if step < 0 else 'right'} of the ego lane")
        x_to = world.lane_centers_x[target] - world.lane_centers_x[world.ego_lane]
        y_s = float(rng.uniform(8.0, 15.0))
        pts, hs = _dense_blend(0.0, x_to, y_s, BLEND_LENGTH,
                               world.stem_end - end_margin)

    poses = _resample_path(pts, hs)
    return _truncate_at_obstacles(poses, world)


# ---------------------------------------------------------------------------
# rendering

_RAY_CACHE: dict[tuple, NDArray[np.float64]] = {}


def _rays(cam: CameraModel) -> NDArray[np.float64]:
    key = (cam.fx, cam.fy, cam.cx, cam.cy, cam.height,
           cam.image_width, cam.image_height, cam.rotation.tobytes())
    if key not in _RAY_CACHE:
        if len(_RAY_CACHE) > 8:
            _RAY_CACHE.clear()
        _RAY_CACHE[key] = cam.pixel_rays()
    return _RAY_CACHE[key]


def _convex_hull(pts: NDArray[np.float64]) -> NDArray[np.float64]:
    """Monotone-chain hull, counter-clockwise, no duplicate endpoint."""
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    if len(pts) <= 2:
        return pts

    def half(points):
        out: list[NDArray] = []
        for p in points:
            while len(out) >= 2:
                a, b = out[-2], out[-1]
                if (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) > 0:
                    break
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _paint_obstacle(owner: NDArray[np.int32], idx: int, box: OrientedBox,
                    pose: Pose2, cam: CameraModel) -> None:
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    corners = box.corners()
    dx, dy = corners[:, 0] - pose.x, corners[:, 1] - pose.y
    ex, ey = c * dx + s * dy, -s * dx + c * dy
    ground = np.stack([ex, np.full(4, cam.height), ey], axis=1)
    top = ground.copy()
    top[:, 1] -= OBSTACLE_HEIGHT
    pts3 = np.vstack([ground, top]) @ cam.rotation.T  # camera frame
    h_img, w_img = owner.shape
    if (pts3[:, 2] > geom.EPS_DEPTH).all():
        px = cam.fx * (pts3[:, 0] / pts3[:, 2]) + cam.cx
        py = cam.fy * (pts3[:, 1] / pts3[:, 2]) + cam.cy
        hull = _convex_hull(np.stack([px, py], axis=1))
        if len(hull) < 3:
            return
        pad = np.vstack([hull, np.repeat(hull[-1:], 8 - len(hull), axis=0)])
        mask = geom._fill_convex_batch(pad[None], w_img, h_img)
    elif (pts3[:, 2] > geom.EPS_DEPTH).any():
        # partially behind the near plane: clip each box face separately
        faces = ((0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4),
                 (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7))
        mask = np.zeros((h_img, w_img), dtype=bool)
        for face in faces:
            poly = geom._clip_front([pts3[i] for i in face], geom.EPS_DEPTH)
            if len(poly) < 3:
                continue
            pp = np.array([[cam.fx * (p[0] / p[2]) + cam.cx,
                            cam.fy * (p[1] / p[2]) + cam.cy] for p in poly])
            pad = np.vstack([pp, np.repeat(pp[-1:], 8 - len(pp), axis=0)]) \
                if len(pp) < 8 else pp[:8]
            mask |= geom._fill_convex_batch(pad[None], w_img, h_img)
    else:
        return
    owner[mask] = idx + 1


def _render(world: World, pose: Pose2, cam: CameraModel
            ) -> tuple[SemanticImage, NDArray[np.int32]]:
    rays = _rays(cam)
    denom = rays[:, :, 1]
    valid = denom > 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = cam.height / denom
    u = scale * rays[:, :, 0]
    v = scale * rays[:, :, 2]
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    wx = c * u - s * v + pose.x
    wy = s * u + c * v + pose.y

    road = np.zeros(valid.shape, dtype=bool)
    for x0, y0, x1, y1 in world.road_rects:
        road |= (wx >= x0) & (wx <= x1) & (wy >= y0) & (wy <= y1)
    road &= valid
    marking = np.zeros_like(road)
    for x0, y0, x1, y1 in world.markings:
        marking |= (wx >= x0) & (wx <= x1) & (wy >= y0) & (wy <= y1)
    marking &= road

    owner = np.zeros(valid.shape, dtype=np.int32)
    order = sorted(range(len(world.obstacles)),
                   key=lambda i: -math.hypot(world.obstacles[i].center[0] - pose.x,
                                             world.obstacles[i].center[1] - pose.y))
    for i in order:
        _paint_obstacle(owner, i, world.obstacles[i], pose, cam)
    blocked = owner > 0

    channels = np.zeros((N_CHANNELS,) + valid.shape, dtype=np.uint8)
    channels[CH_ROAD] = (road & ~blocked).astype(np.uint8)
    channels[CH_MARKING] = (marking & ~blocked).astype(np.uint8)
    channels[CH_OBSTACLE] = blocked.astype(np.uint8)
    channels[CH_OFFROAD] = (valid & ~road & ~blocked).astype(np.uint8)
    img = SemanticImage(cam.image_width, cam.image_height, channels)
    return img, owner


def render_semantic(world: World, pose: Pose2, cam: CameraModel) -> SemanticImage:
    """Semantic ground-truth image for one pose (see module docstring)."""
    img, _ = _render(world, pose, cam)
    return img


# ---------------------------------------------------------------------------
# log emission


def _command_labels(world: World, poses: list[Pose2], command: str) -> list[str]:
    """Per-pose command via the maneuver-window rule.

    Junction maneuvers are labeled from 15 m before the junction entry
    until the junction is left; lane changes are labeled from 10 m before
    lateral motion starts until it ends; everything else is follow-lane.
    """
    labels = ["follow-lane"] * len(poses)
    if command == "follow-lane":
        return labels
    if command in ("turn-left", "turn-right", "go-straight"):
        x0, y_j, x1, y_top = world.junction
        for i, p in enumerate(poses):
            in_box = x0 <= p.x <= x1 and y_j <= p.y <= y_top
            approaching = y_j - 15.0 <= p.y < y_j and x0 <= p.x <= x1
            if in_box or approaching:
                labels[i] = command
        return labels
    # lane change: indices where the lateral position is still moving
    xs = np.array([p.x for p in poses])
    moving = (np.abs(xs - xs[0]) > 0.02) & (np.abs(xs - xs[-1]) > 0.02)
    if moving.any():
        first, last = int(np.argmax(moving)), len(xs) - 1 - int(np.argmax(moving[::-1]))
        lead = next((j for j in range(first, -1, -1)
                     if poses[first].y - poses[j].y > 10.0), 0)
        for i in range(lead, last + 1):
            labels[i] = command
    return labels


def emit_log(world: World, trajectory: Sequence[Pose2], cam: CameraModel,
             spec: SceneSpec, command: str) -> DrivingLog:
    """Render every trajectory pose and assemble a complete driving log.

    Obstacle ground truth comes from the render itself: each frame's boxes
    bound the pixels where that obstacle is visible, and the BEV footprint
    is expressed in the frame's ego coordinates.
    """
    frames = []
    for i, pose in enumerate(trajectory):
        img, owner = _render(world, pose, cam)
        boxes = []
        c, s = math.cos(pose.theta), math.sin(pose.theta)
        for k, ob in enumerate(world.obstacles):
            ys, xs = np.nonzero(owner == k + 1)
            if ys.size == 0:
                continue
            corners = ob.corners()
            dx, dy = corners[:, 0] - pose.x, corners[:, 1] - pose.y
            bev = np.stack([c * dx + s * dy, -s * dx + c * dy], axis=1)
            boxes.append(ObstacleBox(
                (float(xs.min()), float(ys.min()),
                 float(xs.max() + 1), float(ys.max() + 1)),
                bev_footprint=bev))
        frames.append(LogFrame(pose=pose, command="follow-lane", timestamp=i * FRAME_DT,
                               obstacles=boxes, image=img.channels))
    labels = _command_labels(world, list(trajectory), command)
    for frame, label in zip(frames, labels):
        frame.command = label
    return DrivingLog(camera=cam, frames=frames, ego_width=EGO_WIDTH,
                      ego_length=EGO_LENGTH,
                      metadata={"topology": spec.topology, "command": command,
                                "seed": spec.seed})
