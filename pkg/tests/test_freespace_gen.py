import math

import numpy as np
import pytest

from freespace import freespace_gen as fg
from freespace import geom
from freespace.geom import CameraModel, GridMask, ImageMask, Pose2

import oracles


def _camera():
    return CameraModel.pitched(110.0, 110.0, 128.0, 44.0, math.radians(8.0),
                               1.6, 256, 128)


def _straight_log(n=100, spacing=0.5, obstacles=None, camera=None):
    cam = camera or _camera()
    frames = [
        fg.LogFrame(pose=Pose2(0.0, i * spacing, 0.0), command="follow-lane",
                    timestamp=0.1 * i, obstacles=list(obstacles or []))
        for i in range(n)
    ]
    return fg.DrivingLog(camera=cam, frames=frames, ego_width=2.0, ego_length=4.0)


# ---------------------------------------------------------------------------
# footprint strips


def _union_bruteforce(log, t, width, height, res, origin):
    """Per-cell oracle: center inside any kept anchored footprint quad."""
    ref = log.frames[t].pose
    c, s = math.cos(ref.theta), math.sin(ref.theta)
    quads = []
    last = None
    for frame in log.frames[t + 1:]:
        p = frame.pose
        if last is not None and math.hypot(p.x - last.x, p.y - last.y) < 0.05:
            continue
        last = p
        dx, dy = p.x - ref.x, p.y - ref.y
        rel = geom.Rigid2(p.theta - ref.theta, (c * dx + s * dy, -s * dx + c * dy))
        quads.append(geom.footprint_corners(rel, log.ego_width, log.ego_length))
    bits = np.zeros((height, width), dtype=bool)
    for r in range(height):
        py = origin[1] + (r + 0.5) * res
        for col in range(width):
            px = origin[0] + (col + 0.5) * res
            bits[r, col] = any(oracles.point_in_polygon(px, py, q) for q in quads)
    return bits


def test_straight_strip_area_and_oracle():
    log = _straight_log(n=41)  # poses 0..20 m
    strip = fg.future_footprint_union(log, 0, grid_width=60, grid_height=300,
                                      resolution=0.1, origin=(-3.0, 0.0))
    # 2 m wide, from the grid edge to 20 m + half the car length
    assert strip.count() == 4400
    assert strip.area() == pytest.approx(44.0)
    oracle = _union_bruteforce(log, 0, 60, 300, 0.1, (-3.0, 0.0))
    assert np.array_equal(strip.bits, oracle)


def test_stationary_log_gives_single_footprint():
    frames = [fg.LogFrame(Pose2(0.0, 0.0, 0.0), "follow-lane", 0.1 * i)
              for i in range(10)]
    log = fg.DrivingLog(_camera(), frames, ego_width=2.0, ego_length=4.0)
    strip = fg.future_footprint_union(log, 0, grid_width=60, grid_height=60,
                                      resolution=0.1, origin=(-3.0, -3.0))
    single = geom.rasterize_polygon(
        geom.footprint_corners(geom.Rigid2(0.0, (0.0, 0.0)), 2.0, 4.0),
        60, 60, 0.1, (-3.0, -3.0))
    assert np.array_equal(strip.bits, single.bits)
    assert strip.count() == 20 * 40


def test_turn_strip_inner_boundary_shorter():
    r = 10.0
    center = np.array([-r, 0.0])
    phis = np.arange(0.0, math.pi / 2 + 1e-9, 0.05)
    frames = [fg.LogFrame(Pose2(center[0] + r * math.cos(p),
                                center[1] + r * math.sin(p), p),
                          "turn-left", 0.1 * i)
              for i, p in enumerate(phis)]
    log = fg.DrivingLog(_camera(), frames, ego_width=2.0, ego_length=4.0)
    strip = fg.future_footprint_union(log, 0, grid_width=300, grid_height=300,
                                      resolution=0.1, origin=(-15.0, 0.0))
    bits = strip.bits
    border = bits & ~(np.roll(bits, 1, 0) & np.roll(bits, -1, 0)
                      & np.roll(bits, 1, 1) & np.roll(bits, -1, 1))
    rows, cols = np.nonzero(border)
    xs = -15.0 + (cols + 0.5) * 0.1
    ys = (rows + 0.5) * 0.1
    radii = np.hypot(xs - center[0], ys - center[1])
    inner = (radii < r - 0.5).sum()
    outer = (radii > r + 0.5).sum()
    assert 0 < inner < outer


def test_future_footprint_rejects_last_frame():
    log = _straight_log(n=5)
    with pytest.raises(ValueError):
        fg.future_footprint_union(log, 4)


def test_anchoring_handles_reference_heading():
    # drive along +x (heading -pi/2): the anchored strip must still point
    # forward (rows ahead of the reference), identical to the +y version
    n, spacing = 30, 0.5
    frames_x = [fg.LogFrame(Pose2(i * spacing, 0.0, -math.pi / 2), "follow-lane", 0.1 * i)
                for i in range(n)]
    log_x = fg.DrivingLog(_camera(), frames_x)
    log_y = _straight_log(n=n)
    log_y.ego_length = log_x.ego_length = 4.0
    a = fg.future_footprint_union(log_x, 3, grid_width=60, grid_height=200,
                                  resolution=0.1, origin=(-3.0, 0.0))
    b = fg.future_footprint_union(log_y, 3, grid_width=60, grid_height=200,
                                  resolution=0.1, origin=(-3.0, 0.0))
    assert np.array_equal(a.bits, b.bits)
    assert a.count() > 0


# ---------------------------------------------------------------------------
# obstacle clipping


def _strip_grid():
    rect = np.array([[-1.0, 2.0], [1.0, 2.0], [1.0, 30.0], [-1.0, 30.0]])
    return geom.rasterize_polygon(rect, 300, 600, 0.1, (-15.0, 0.0))


def _box_at_depth(cam, depth, half_w=25.0, h_px=30.0):
    px, py = geom.project_ground_point(cam, (0.0, depth))
    return fg.ObstacleBox((px - half_w, py - h_px, px + half_w, py),
                          bev_footprint=np.array([[-1.0, depth], [1.0, depth],
                                                  [1.0, depth + 4], [-1.0, depth + 4]]))


def test_clip_without_obstacles_is_projection():
    cam = _camera()
    grid = _strip_grid()
    clipped = fg.clip_to_nearest_obstacle(grid, [], cam)
    assert np.array_equal(clipped.bits, geom.project_mask(cam, grid).bits)


def test_clip_with_disjoint_obstacle_unchanged():
    cam = _camera()
    grid = _strip_grid()
    off_to_side = fg.ObstacleBox((0.0, 0.0, 20.0, 10.0))
    clipped = fg.clip_to_nearest_obstacle(grid, [off_to_side], cam)
    assert np.array_equal(clipped.bits, geom.project_mask(cam, grid).bits)


def test_clip_cuts_at_box_bottom_and_depth():
    cam = _camera()
    grid = _strip_grid()
    box = _box_at_depth(cam, 10.0)
    clipped = fg.clip_to_nearest_obstacle(grid, [box], cam)
    assert clipped.count() > 0
    rows = np.nonzero(clipped.bits.any(axis=1))[0]
    assert rows.min() + 0.5 >= box.image_box[3]
    # the topmost kept row must sit just past 10 m on the ground
    rays = cam.pixel_rays()
    col = int(np.nonzero(clipped.bits[rows.min()])[0].mean())
    ray = rays[rows.min(), col]
    depth = cam.height / ray[1] * ray[2]
    ray_above = rays[rows.min() - 1, col]
    quantum = cam.height / ray_above[1] * ray_above[2] - depth
    assert depth <= 10.0 + quantum + 0.2


def test_clip_picks_nearest_obstacle():
    cam = _camera()
    grid = _strip_grid()
    near, far = _box_at_depth(cam, 8.0), _box_at_depth(cam, 15.0)
    both = fg.clip_to_nearest_obstacle(grid, [far, near], cam)
    only_far = fg.clip_to_nearest_obstacle(grid, [far], cam)
    rows = np.nonzero(both.bits.any(axis=1))[0]
    assert rows.min() + 0.5 >= near.image_box[3]
    assert both.count() < only_far.count()  # nearer obstacle removes more


def test_clip_fallback_to_lowest_box_without_bev():
    cam = _camera()
    grid = _strip_grid()
    with_bev = _box_at_depth(cam, 15.0)
    no_bev = fg.ObstacleBox(_box_at_depth(cam, 8.0).image_box)  # lower in the image
    clipped = fg.clip_to_nearest_obstacle(grid, [with_bev, no_bev], cam)
    rows = np.nonzero(clipped.bits.any(axis=1))[0]
    assert rows.min() + 0.5 >= no_bev.image_box[3]


def test_clip_subset_of_projection():
    cam = _camera()
    grid = _strip_grid()
    full = geom.project_mask(cam, grid)
    clipped = fg.clip_to_nearest_obstacle(grid, [_box_at_depth(cam, 12.0)], cam)
    assert not (clipped.bits & ~full.bits).any()


# ---------------------------------------------------------------------------
# contour extraction and resampling


def _square_mask(size=10, at=(40, 40), shape=(128, 256)):
    bits = np.zeros(shape, dtype=bool)
    bits[at[0]:at[0] + size, at[1]:at[1] + size] = True
    return ImageMask(shape[1], shape[0], bits)


def test_extract_contour_square_border():
    raw = fg.extract_contour(_square_mask())
    assert len(raw) == 36  # 4 * 10 - 4 border pixels, each exactly once
    cols = raw[:, 0] - 0.5
    rows = raw[:, 1] - 0.5
    on_border = (np.isin(rows, [40, 49]) & (cols >= 40) & (cols <= 49)) | \
                (np.isin(cols, [40, 49]) & (rows >= 40) & (rows <= 49))
    assert on_border.all()
    # traversal visits Moore-adjacent pixels in order
    d = np.abs(np.diff(np.vstack([raw, raw[:1]]), axis=0))
    assert d.max() <= 1.0


def test_extract_contour_single_pixel():
    bits = np.zeros((16, 16), dtype=bool)
    bits[5, 7] = True
    raw = fg.extract_contour(ImageMask(16, 16, bits))
    assert raw.shape == (1, 2)
    assert tuple(raw[0]) == (7.5, 5.5)


def test_extract_contour_empty_raises():
    with pytest.raises(ValueError):
        fg.extract_contour(ImageMask.empty(8, 8))


def test_extract_contour_keeps_largest_component():
    bits = np.zeros((64, 64), dtype=bool)
    bits[10:30, 10:30] = True
    bits[50:53, 50:53] = True
    raw = fg.extract_contour(ImageMask(64, 64, bits))
    assert (raw[:, 0] <= 31).all() and (raw[:, 1] <= 31).all()


def test_resample_square_to_eight_points():
    square = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])
    contour = fg.resample_contour(square, 8, 20, 20)
    pts = fg.denormalize_points(contour.points, 20, 20)
    gaps = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
    assert np.allclose(gaps, 5.0, atol=1e-9)
    assert tuple(pts[0]) == pytest.approx((0.0, 10.0))  # max y, then min x
    want = {(0, 0), (5, 0), (10, 0), (10, 5), (10, 10), (5, 10), (0, 10), (0, 5)}
    got = {(round(x, 6), round(y, 6)) for x, y in pts}
    assert got == want
    assert fg._signed_area(pts) > 0  # clockwise in image coordinates


def test_resample_uniform_gaps_on_traced_blob():
    mask = _square_mask(size=14, at=(30, 60))
    raw = fg.extract_contour(mask)
    contour = fg.resample_contour(raw, 50, 256, 128)
    pts = fg.denormalize_points(contour.points, 256, 128)
    gaps = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
    spacing = gaps.sum() / 50
    assert np.abs(gaps - spacing).max() < 0.01 * spacing


def test_resample_idempotent():
    mask = _square_mask(size=12, at=(50, 100))
    raw = fg.extract_contour(mask)
    contour = fg.resample_contour(raw, 50, 256, 128)
    pts = fg.denormalize_points(contour.points, 256, 128)
    again = fg.resample_contour(pts, 50, 256, 128)
    assert np.abs(again.points - contour.points).max() < 1e-6


def test_resample_rejects_degenerate():
    with pytest.raises(ValueError):
        fg.resample_contour(np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]), 8, 20, 20)


def test_canonicalize_rotation_and_orientation():
    square = np.array([[0.1, 0.1], [0.5, 0.1], [0.5, 0.6], [0.1, 0.6]])
    rolled = np.roll(square[::-1], 2, axis=0)  # scrambled start, flipped orientation
    fixed = fg.canonicalize_points(rolled)
    assert np.allclose(fixed, fg.canonicalize_points(square))
    assert fixed[0, 1] == 0.6


# ---------------------------------------------------------------------------
# dataset assembly


def test_build_dataset_straight_log():
    log = _straight_log(n=100)
    result = fg.build_dataset([log])
    assert len(result.samples) == 90
    assert result.skip_counts.get("short_horizon") == 9
    sample = result.samples[0]
    assert len(sample.contour) == 50
    assert sample.command == "follow-lane"
    # spot-check S_t is a subset of the projected strip on a few frames
    for s in result.samples[::40]:
        strip = fg.future_footprint_union(log, s.frame_index)
        k_img = geom.project_mask(log.camera, strip)
        assert not (s.mask.bits & ~k_img.bits).any()


def test_build_dataset_roundtrip_and_canonical_determinism():
    log = _straight_log(n=40)
    r1 = fg.build_dataset([log])
    r2 = fg.build_dataset([log])
    assert len(r1.samples) == len(r2.samples) > 0
    for a, b in zip(r1.samples, r2.samples):
        assert np.array_equal(a.contour.points, b.contour.points)
        assert np.array_equal(a.mask.bits, b.mask.bits)
    for s in r1.samples[::10]:
        pts = fg.denormalize_points(s.contour.points, 256, 128)
        refilled = geom.fill_polygon_pixels(pts, 256, 128)
        assert fg._mask_iou(refilled, s.mask.bits) >= 0.95


def test_build_dataset_obstacle_truncates_all():
    cam = _camera()
    box = _box_at_depth(cam, 9.0)
    log = _straight_log(n=60, obstacles=[box], camera=cam)
    result = fg.build_dataset([log])
    assert result.samples
    for s in result.samples:
        rows = np.nonzero(s.mask.bits.any(axis=1))[0]
        assert rows.min() + 0.5 >= box.image_box[3]
        pts = fg.denormalize_points(s.contour.points, 256, 128)
        assert not fg._point_strictly_inside(pts, box.image_box)


def test_build_dataset_short_log_yields_nothing():
    frames = [fg.LogFrame(Pose2(0.0, 0.0, 0.0), "follow-lane", 0.0),
              fg.LogFrame(Pose2(0.0, 0.01, 0.0), "follow-lane", 0.1)]
    log = fg.DrivingLog(_camera(), frames)
    result = fg.build_dataset([log])
    assert result.samples == []
    assert result.skip_counts == {"short_horizon": 1}


def test_driving_log_validation():
    frames = [fg.LogFrame(Pose2(0, 0, 0), "follow-lane", 0.0)]
    with pytest.raises(ValueError):
        fg.DrivingLog(_camera(), frames)
    with pytest.raises(ValueError):
        fg.LogFrame(Pose2(0, 0, 0), "fly-upward", 0.0)
    with pytest.raises(ValueError):
        fg.ObstacleBox((5.0, 0.0, 1.0, 10.0))
