import json

import numpy as np
import pytest

from freespace import diffusion as df
from freespace import nn, persist, synthworld, train, viz
from freespace.freespace_gen import DatasetConfig, build_dataset


@pytest.fixture(scope="module")
def tiny_log():
    spec = synthworld.SceneSpec(topology="straight", seed=11, obstacle_count=1)
    world = synthworld.generate_world(spec)
    traj = synthworld.plan_trajectory(world, "follow-lane", seed=3)[:30]
    return synthworld.emit_log(world, traj, synthworld.DEFAULT_CAMERA, spec,
                               "follow-lane")


@pytest.fixture(scope="module")
def tiny_dataset(tiny_log):
    result = build_dataset([tiny_log], DatasetConfig(frame_stride=4))
    assert result.samples
    return result


# --- image payloads ---


def test_image_roundtrip_bitwise(tiny_log):
    image = tiny_log.frames[0].image
    blob = persist.encode_image(image)
    back = persist.decode_image(blob)
    assert back.shape == image.shape
    assert np.array_equal(back, image)
    assert persist.encode_image(back) == blob


def test_image_decode_rejects_garbage():
    with pytest.raises(ValueError):
        persist.decode_image(b"nope")
    with pytest.raises(ValueError):
        persist.decode_image(b"SIMG" + b"\x00" * 40, "short.simg")


# --- RLE ---


def test_rle_roundtrip_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(20):
        bits = rng.random((17, 23)) > rng.uniform(0.1, 0.9)
        runs = persist.rle_encode(bits)
        assert runs.sum() == bits.size
        assert np.array_equal(persist.rle_decode(runs, 23, 17), bits)


def test_rle_edge_masks():
    empty = np.zeros((4, 6), dtype=bool)
    assert list(persist.rle_encode(empty)) == [24]
    full = np.ones((4, 6), dtype=bool)
    assert list(persist.rle_encode(full)) == [0, 24]
    with pytest.raises(ValueError):
        persist.rle_decode(np.array([5], dtype=np.uint32), 6, 4)


# --- driving logs ---


def test_log_roundtrip(tmp_path, tiny_log):
    out = persist.write_log(tiny_log, tmp_path / "log0")
    back = persist.read_log(out)
    assert len(back.frames) == len(tiny_log.frames)
    assert back.metadata == tiny_log.metadata
    assert back.camera.fx == tiny_log.camera.fx
    assert np.array_equal(back.camera.rotation, tiny_log.camera.rotation)
    for a, b in zip(back.frames, tiny_log.frames):
        assert (a.pose.x, a.pose.y, a.pose.theta) == (b.pose.x, b.pose.y, b.pose.theta)
        assert a.command == b.command
        assert a.timestamp == b.timestamp
        assert len(a.obstacles) == len(b.obstacles)
        for oa, ob in zip(a.obstacles, b.obstacles):
            assert oa.image_box == ob.image_box
            assert np.array_equal(oa.bev_footprint, ob.bev_footprint)
        assert np.array_equal(a.image, b.image)


def test_log_rewrite_is_byte_identical(tmp_path, tiny_log):
    first = persist.write_log(tiny_log, tmp_path / "a")
    second = persist.write_log(persist.read_log(first), tmp_path / "b")
    assert (first / "index.json").read_bytes() == (second / "index.json").read_bytes()
    for frame in sorted(p.name for p in (first / "frames").iterdir()):
        assert (first / "frames" / frame).read_bytes() \
            == (second / "frames" / frame).read_bytes()


def test_log_read_reports_bad_index(tmp_path):
    (tmp_path / "broken").mkdir()
    (tmp_path / "broken" / "index.json").write_text("{naughty")
    with pytest.raises(ValueError, match="index"):
        persist.read_log(tmp_path / "broken")


# --- dataset shards ---


def test_dataset_roundtrip(tmp_path, tiny_dataset):
    manifest = persist.write_dataset(tiny_dataset.samples, tiny_dataset.skip_counts,
                                     tmp_path / "data", shard_size=3)
    records, manifest_back = persist.read_dataset(tmp_path / "data")
    assert manifest_back == json.loads(json.dumps(manifest))
    assert manifest["samples"] == len(tiny_dataset.samples)
    assert sum(e["records"] for e in manifest["shards"]) == len(records)
    assert manifest["command_counts"]["follow-lane"] == len(tiny_dataset.samples)
    for rec, sample in zip(records, tiny_dataset.samples):
        assert rec.log_index == sample.log_index
        assert rec.frame_index == sample.frame_index
        assert rec.command == sample.command
        assert np.array_equal(rec.points, sample.contour.points)
        assert np.array_equal(rec.mask.bits, sample.mask.bits)


def test_dataset_rewrite_is_byte_identical(tmp_path, tiny_dataset):
    persist.write_dataset(tiny_dataset.samples, tiny_dataset.skip_counts,
                          tmp_path / "one", shard_size=4)
    persist.write_dataset(tiny_dataset.samples, tiny_dataset.skip_counts,
                          tmp_path / "two", shard_size=4)
    for name in sorted(p.name for p in (tmp_path / "one").iterdir()):
        assert (tmp_path / "one" / name).read_bytes() \
            == (tmp_path / "two" / name).read_bytes()


def test_shard_corruption_reports_path(tmp_path, tiny_dataset):
    persist.write_dataset(tiny_dataset.samples, {}, tmp_path / "d", shard_size=100)
    shard = tmp_path / "d" / "shard-00000.fsrc"
    blob = shard.read_bytes()
    shard.write_bytes(blob + b"\x00")
    with pytest.raises(ValueError, match="shard-00000"):
        persist.read_shard(shard)
    shard.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="shard-00000"):
        persist.read_shard(shard)


def test_empty_dataset_allowed(tmp_path):
    manifest = persist.write_dataset([], {}, tmp_path / "empty")
    assert manifest["samples"] == 0 and manifest["shards"] == []
    records, _ = persist.read_dataset(tmp_path / "empty")
    assert records == []


# --- checkpoints ---


def micro_cfg():
    return nn.DenoiserConfig(feature_dim=8, pos_dim=8, blocks=2, heads=2,
                             encoder_channels=(8, 8, 8), n_points=50,
                             mlp_hidden=16, head_hidden=8,
                             image_height=128, image_width=256)


def test_checkpoint_roundtrip(tmp_path):
    cfg = micro_cfg()
    params = nn.init_params(cfg, seed=5, zero_head=False)
    adam = nn.init_adam(params)
    adam.step = 7
    rng = np.random.default_rng(9)
    rng.standard_normal(13)
    path = persist.save_checkpoint(tmp_path / "model.fsck", cfg, params, adam,
                                   rng, step=42, meta={"note": "x"})
    ck = persist.load_checkpoint(path)
    assert ck.config == cfg
    assert ck.step == 42 and ck.meta == {"note": "x"}
    assert ck.adam.step == 7
    assert sorted(ck.params) == sorted(params)
    for name in params:
        assert np.array_equal(ck.params[name].data, params[name].data)
        assert ck.params[name].requires_grad
        assert np.array_equal(ck.adam.m[name], adam.m[name])
        assert np.array_equal(ck.adam.v[name], adam.v[name])
    assert np.array_equal(ck.rng.standard_normal(8), rng.standard_normal(8))


def test_checkpoint_resave_byte_identical(tmp_path):
    cfg = micro_cfg()
    params = nn.init_params(cfg, seed=1)
    adam = nn.init_adam(params)
    rng = np.random.default_rng(2)
    a = persist.save_checkpoint(tmp_path / "a.fsck", cfg, params, adam, rng, 0)
    ck = persist.load_checkpoint(a)
    b = persist.save_checkpoint(tmp_path / "b.fsck", ck.config, ck.params,
                                ck.adam, ck.rng, ck.step, ck.meta)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    cfg = micro_cfg()
    params = nn.init_params(cfg, seed=1)
    path = persist.save_checkpoint(tmp_path / "c.fsck", cfg, params,
                                   nn.init_adam(params), np.random.default_rng(0), 0)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(ValueError, match="c.fsck"):
        persist.load_checkpoint(path)
    path.write_bytes(b"JUNK" + blob[4:])
    with pytest.raises(ValueError, match="c.fsck"):
        persist.load_checkpoint(path)


# --- training loop ---


@pytest.fixture(scope="module")
def training_setup(tiny_log, tiny_dataset):
    records = [persist.ShardRecord(s.log_index, s.frame_index,
                                   0, s.contour.points, s.mask)
               for s in tiny_dataset.samples]
    data = train.assemble(records, [tiny_log])
    return data, micro_cfg()


def test_assemble_joins_images(training_setup, tiny_dataset):
    data, _ = training_setup
    assert len(data) == len(tiny_dataset.samples)
    assert data.images.dtype == np.uint8
    assert data.images.shape[1:] == (128, 256, 4)
    assert data.img_of_sample.max() < len(data.images)
    assert data.contours.shape == (len(data), 50, 2)


def test_assemble_rejects_missing_log(training_setup):
    records = [persist.ShardRecord(3, 0, 0, np.zeros((50, 2)),
                                   persist.ImageMask.empty(4, 4))]
    with pytest.raises(ValueError, match="missing log"):
        train.assemble(records, [])


def test_training_deterministic(training_setup):
    data, cfg = training_setup
    tc = train.TrainConfig(learning_rate=1e-3, batch_size=4, steps=6, seed=3)
    runs = []
    for _ in range(2):
        state = train.RunState.fresh(cfg, tc)
        losses = train.train_steps(state, data, cfg, tc)
        runs.append((state, losses))
    assert runs[0][1] == runs[1][1]
    for name in runs[0][0].params:
        assert np.array_equal(runs[0][0].params[name].data,
                              runs[1][0].params[name].data)


def test_resume_matches_uninterrupted(tmp_path, training_setup):
    data, cfg = training_setup
    tc = train.TrainConfig(learning_rate=1e-3, batch_size=4, steps=10, seed=5)

    solid = train.RunState.fresh(cfg, tc)
    solid_losses = train.train_steps(solid, data, cfg, tc)

    broken = train.RunState.fresh(cfg, tc)
    first = train.train_steps(broken, data, cfg, tc, n_steps=4)
    path = persist.save_checkpoint(tmp_path / "mid.fsck", cfg, broken.params,
                                   broken.adam, broken.rng, broken.step,
                                   meta=broken.order_meta())
    resumed = train.RunState.from_checkpoint(persist.load_checkpoint(path))
    second = train.train_steps(resumed, data, cfg, tc)

    assert first + second == solid_losses
    assert resumed.step == solid.step == 10
    for name in solid.params:
        assert np.array_equal(resumed.params[name].data, solid.params[name].data)
    assert np.array_equal(resumed.rng.standard_normal(4),
                          solid.rng.standard_normal(4))


def test_loss_decreases_on_tiny_overfit(training_setup):
    data, cfg = training_setup
    one = train.TrainingData(images=data.images[:1],
                             img_of_sample=np.zeros(1, dtype=np.int64),
                             contours=data.contours[:1],
                             command_ids=data.command_ids[:1])
    tc = train.TrainConfig(learning_rate=1e-3, batch_size=1, steps=40,
                           command_dropout=0.0, seed=0)
    state = train.RunState.fresh(cfg, tc)
    losses = train.train_steps(state, one, cfg, tc)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_smoothed_windows():
    values = list(range(100))
    out = train.smoothed(values, window=50)
    assert out == [np.mean(range(50)), np.mean(range(50, 100))]


# --- visualization ---


def test_overlay_dimensions_and_determinism(tmp_path, tiny_log, tiny_dataset):
    image = tiny_log.frames[tiny_dataset.samples[0].frame_index].image
    contour = tiny_dataset.samples[0].contour
    rgb = viz.overlay(image, [contour], ground_truth=contour)
    assert rgb.shape == (image.shape[1], image.shape[2], 3)
    a = viz.save_png(tmp_path / "a.png", rgb)
    b = viz.save_png(tmp_path / "b.png", rgb)
    assert a.read_bytes() == b.read_bytes()
    from PIL import Image
    back = np.asarray(Image.open(a))
    assert np.array_equal(back, rgb)


def test_semantic_rgb_marks_all_channels(tiny_log):
    image = tiny_log.frames[0].image
    rgb = viz.semantic_rgb(image)
    road = image[synthworld.CH_ROAD] > 0
    assert (rgb[road] != 25).any()
