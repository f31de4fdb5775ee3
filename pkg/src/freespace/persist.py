"""On-disk formats: driving logs, dataset shards, model checkpoints.

Every format is little-endian, versioned by a magic prefix, and written
atomically (temp file + rename).  JSON blocks are serialized with sorted
keys and no timestamps, so identical inputs produce identical bytes and
write -> read -> write round-trips exactly.

Log directory layout::

    <log>/index.json          poses, commands, camera, boxes per frame
    <log>/frames/00042.simg   binary image payload, header-described

Dataset shards pack fixed-layout records (contour points as float64,
command byte, run-length-encoded mask, episode/frame reference) under a
manifest; checkpoints pack a JSON header plus name-sorted tensor
payloads including optimizer moments and the training RNG state.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .freespace_gen import (COMMANDS, Contour, DrivingLog, FreespaceSample,
                            LogFrame, ObstacleBox, command_index)
from .geom import CameraModel, ImageMask, Pose2
from .nn import AdamState, DenoiserConfig, Tensor, parameter

IMAGE_MAGIC = b"SIMG"
SHARD_MAGIC = b"FSRC"
CHECKPOINT_MAGIC = b"FSCK"
FORMAT_VERSION = 1


def _atomic_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


# ---------------------------------------------------------------------------
# semantic image payloads


def encode_image(channels: NDArray[np.uint8]) -> bytes:
    """Pack a (channels, height, width) uint8 array into a SIMG payload."""
    channels = np.ascontiguousarray(channels, dtype=np.uint8)
    if channels.ndim != 3:
        raise ValueError(f"expected (channels, height, width), got {channels.shape}")
    header = struct.pack("<4sIIII", IMAGE_MAGIC, FORMAT_VERSION, *channels.shape)
    return header + channels.tobytes()


def decode_image(data: bytes, source: str = "<bytes>") -> NDArray[np.uint8]:
    if len(data) < 20 or data[:4] != IMAGE_MAGIC:
        raise ValueError(f"not an image payload: {source}")
    _, version, n_ch, height, width = struct.unpack("<4sIIII", data[:20])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported image version {version}: {source}")
    body = np.frombuffer(data[20:], dtype=np.uint8)
    if body.size != n_ch * height * width:
        raise ValueError(f"truncated image payload: {source}")
    return body.reshape(n_ch, height, width).copy()


# ---------------------------------------------------------------------------
# driving logs


def _camera_dict(cam: CameraModel) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "rotation": cam.rotation.tolist(), "height": cam.height,
            "image_width": cam.image_width, "image_height": cam.image_height}


def _camera_from(data: Mapping) -> CameraModel:
    return CameraModel(fx=data["fx"], fy=data["fy"], cx=data["cx"],
                       cy=data["cy"], rotation=np.array(data["rotation"]),
                       height=data["height"], image_width=data["image_width"],
                       image_height=data["image_height"])


def _box_dict(box: ObstacleBox) -> dict:
    out: dict = {"image_box": list(box.image_box)}
    if box.bev_footprint is not None:
        out["bev_footprint"] = box.bev_footprint.tolist()
    return out


def _box_from(data: Mapping) -> ObstacleBox:
    bev = data.get("bev_footprint")
    return ObstacleBox(tuple(data["image_box"]),
                       None if bev is None else np.array(bev))


def write_log(log: DrivingLog, path: Path | str) -> Path:
    """Write a driving log as an index + per-frame image payloads."""
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    frames = []
    for i, frame in enumerate(log.frames):
        entry: dict = {"pose": [frame.pose.x, frame.pose.y, frame.pose.theta],
                       "command": frame.command,
                       "timestamp": frame.timestamp,
                       "obstacles": [_box_dict(ob) for ob in frame.obstacles],
                       "image": None}
        if frame.image is not None:
            name = f"frames/{i:05d}.simg"
            _atomic_bytes(path / name, encode_image(frame.image))
            entry["image"] = name
        frames.append(entry)
    index = {"camera": _camera_dict(log.camera),
             "ego_width": log.ego_width, "ego_length": log.ego_length,
             "metadata": log.metadata, "frames": frames}
    _atomic_bytes(path / "index.json", _json_bytes(index))
    return path


def read_log(path: Path | str) -> DrivingLog:
    path = Path(path)
    index_path = path / "index.json"
    try:
        index = json.loads(index_path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ValueError(f"unreadable log index: {index_path}") from err
    frames = []
    for entry in index["frames"]:
        image = None
        if entry["image"] is not None:
            image_path = path / entry["image"]
            image = decode_image(image_path.read_bytes(), str(image_path))
        x, y, theta = entry["pose"]
        frames.append(LogFrame(pose=Pose2(x, y, theta),
                               command=entry["command"],
                               timestamp=entry["timestamp"],
                               obstacles=[_box_from(b) for b in entry["obstacles"]],
                               image=image))
    return DrivingLog(camera=_camera_from(index["camera"]), frames=frames,
                      ego_width=index["ego_width"],
                      ego_length=index["ego_length"],
                      metadata=index.get("metadata", {}))


# ---------------------------------------------------------------------------
# run-length coding


def rle_encode(bits: NDArray[np.bool_]) -> NDArray[np.uint32]:
    """Alternating run lengths of the flattened mask, zeros first."""
    flat = np.asarray(bits, dtype=bool).ravel()
    if flat.size == 0:
        return np.zeros(0, dtype=np.uint32)
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return runs.astype(np.uint32)


def rle_decode(runs: NDArray[np.uint32], width: int, height: int) -> NDArray[np.bool_]:
    total = int(np.sum(runs, dtype=np.int64))
    if total != width * height:
        raise ValueError("run lengths do not cover the mask")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs.astype(np.int64)).reshape(height, width)


# ---------------------------------------------------------------------------
# dataset shards


@dataclass(frozen=True)
class ShardRecord:
    log_index: int
    frame_index: int
    command_id: int
    points: NDArray[np.float64]
    mask: ImageMask

    @property
    def command(self) -> str:
        return COMMANDS[self.command_id]


def _sample_record(sample: FreespaceSample) -> bytes:
    points = np.ascontiguousarray(sample.contour.points, dtype="<f8")
    runs = rle_encode(sample.mask.bits)
    head = struct.pack("<IIBI", sample.log_index, sample.frame_index,
                       command_index(sample.command), len(runs))
    return head + points.tobytes() + runs.astype("<u4").tobytes()


def write_shards(samples: Sequence[FreespaceSample], out_dir: Path | str,
                 shard_size: int = 512) -> list[dict]:
    """Write fixed-framing dataset shards; returns manifest shard entries."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if samples:
        mask_w = samples[0].mask.width
        mask_h = samples[0].mask.height
        n_points = len(samples[0].contour)
        if any(s.mask.width != mask_w or s.mask.height != mask_h
               or len(s.contour) != n_points for s in samples):
            raise ValueError("samples disagree on mask dims or point count")
    else:
        mask_w = mask_h = n_points = 0
    entries = []
    for start in range(0, len(samples), shard_size):
        chunk = samples[start:start + shard_size]
        name = f"shard-{start // shard_size:05d}.fsrc"
        header = struct.pack("<4sIIIII", SHARD_MAGIC, FORMAT_VERSION,
                             n_points, mask_w, mask_h, len(chunk))
        body = b"".join(_sample_record(s) for s in chunk)
        _atomic_bytes(out_dir / name, header + body)
        entries.append({"path": name, "records": len(chunk)})
    return entries


def read_shard(path: Path | str) -> list[ShardRecord]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 24 or data[:4] != SHARD_MAGIC:
        raise ValueError(f"not a dataset shard: {path}")
    _, version, n_points, mask_w, mask_h, count = struct.unpack("<4sIIIII", data[:24])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported shard version {version}: {path}")
    records = []
    offset = 24
    for _ in range(count):
        try:
            log_index, frame_index, command_id, n_runs = struct.unpack_from(
                "<IIBI", data, offset)
            offset += 13
            points = np.frombuffer(data, dtype="<f8", count=n_points * 2,
                                   offset=offset).reshape(n_points, 2)
            offset += n_points * 16
            runs = np.frombuffer(data, dtype="<u4", count=n_runs, offset=offset)
            offset += 4 * n_runs
            bits = rle_decode(runs, mask_w, mask_h)
        except (struct.error, ValueError) as err:
            raise ValueError(f"corrupt dataset shard: {path}") from err
        records.append(ShardRecord(log_index, frame_index, int(command_id),
                                   points.copy(),
                                   ImageMask(mask_w, mask_h, bits)))
    if offset != len(data):
        raise ValueError(f"corrupt dataset shard (trailing bytes): {path}")
    return records


def write_dataset(samples: Sequence[FreespaceSample], skips: Mapping[str, int],
                  out_dir: Path | str, shard_size: int = 512,
                  extra: Optional[Mapping] = None) -> dict:
    """Shards plus a manifest with per-command counts and skip statistics."""
    out_dir = Path(out_dir)
    entries = write_shards(samples, out_dir, shard_size)
    counts: dict[str, int] = {}
    for sample in samples:
        counts[sample.command] = counts.get(sample.command, 0) + 1
    manifest = {"format": SHARD_MAGIC.decode(), "version": FORMAT_VERSION,
                "samples": len(samples), "shards": entries,
                "command_counts": counts, "skip_counts": dict(skips)}
    if extra:
        manifest.update(extra)
    _atomic_bytes(out_dir / "manifest.json", _json_bytes(manifest))
    return manifest


def read_dataset(out_dir: Path | str) -> tuple[list[ShardRecord], dict]:
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ValueError(f"unreadable dataset manifest: {manifest_path}") from err
    records: list[ShardRecord] = []
    for entry in manifest["shards"]:
        records.extend(read_shard(out_dir / entry["path"]))
    return records, manifest


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: DenoiserConfig
    params: dict[str, Tensor]
    adam: AdamState
    rng: np.random.Generator
    step: int
    meta: dict = field(default_factory=dict)


def _rng_state_dict(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 training generators are supported")
    return {"state": str(state["state"]["state"]),
            "inc": str(state["state"]["inc"]),
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"]}


def _rng_from_dict(data: Mapping) -> np.random.Generator:
    bit_gen = np.random.PCG64()
    bit_gen.state = {"bit_generator": "PCG64",
                     "state": {"state": int(data["state"]),
                               "inc": int(data["inc"])},
                     "has_uint32": data["has_uint32"],
                     "uinteger": data["uinteger"]}
    return np.random.Generator(bit_gen)


def save_checkpoint(path: Path | str, config: DenoiserConfig,
                    params: Mapping[str, Tensor], adam: AdamState,
                    rng: np.random.Generator, step: int,
                    meta: Optional[Mapping] = None) -> Path:
    path = Path(path)
    names = sorted(params)
    if sorted(adam.m) != names or sorted(adam.v) != names:
        raise ValueError("optimizer state does not match parameters")
    header = {"config": {f: getattr(config, f) for f in
                         config.__dataclass_fields__},
              "params": [{"name": n, "shape": list(params[n].data.shape)}
                         for n in names],
              "adam": {"step": adam.step, "skipped": adam.skipped},
              "rng": _rng_state_dict(rng),
              "step": step,
              "meta": dict(meta or {})}
    header_bytes = _json_bytes(header)
    blob = [struct.pack("<4sII", CHECKPOINT_MAGIC, FORMAT_VERSION,
                        len(header_bytes)), header_bytes]
    for name in names:
        for array in (params[name].data, adam.m[name], adam.v[name]):
            blob.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_bytes(path, b"".join(blob))
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint: {path}")
    _, version, header_len = struct.unpack("<4sII", data[:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}: {path}")
    try:
        header = json.loads(data[12:12 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ValueError(f"corrupt checkpoint header: {path}") from err
    raw = header["config"]
    raw["encoder_channels"] = tuple(raw["encoder_channels"])
    config = DenoiserConfig(**raw)
    offset = 12 + header_len
    params: dict[str, Tensor] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arrays = []
        for _ in range(3):
            if offset + size * 8 > len(data):
                raise ValueError(f"truncated checkpoint payload: {path}")
            arrays.append(np.frombuffer(data, dtype="<f8", count=size,
                                        offset=offset).reshape(shape).copy())
            offset += size * 8
        params[entry["name"]] = parameter(arrays[0])
        m[entry["name"]] = arrays[1]
        v[entry["name"]] = arrays[2]
    if offset != len(data):
        raise ValueError(f"corrupt checkpoint (trailing bytes): {path}")
    adam = AdamState(m=m, v=v, step=header["adam"]["step"],
                     skipped=header["adam"]["skipped"])
    return Checkpoint(config=config, params=params, adam=adam,
                      rng=_rng_from_dict(header["rng"]),
                      step=header["step"], meta=header.get("meta", {}))
