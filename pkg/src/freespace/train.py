"""Deterministic training loop over dataset shards.

All randomness (batch order, timestep/noise draws, command dropout) flows
through one PCG64 generator in a fixed per-step order, so a run is fully
determined by its seed.  Checkpoints capture parameters, Adam moments,
the generator state, and the current epoch permutation cursor; resuming
from step k therefore reproduces an uninterrupted run bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .diffusion import NoiseSchedule, TrainingBatch, cosine_schedule, training_loss
from .freespace_gen import DrivingLog
from .nn import AdamState, DenoiserConfig, Tensor, adam_step, init_adam, init_params
from .persist import Checkpoint, ShardRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    steps: int = 2000
    # fraction of samples trained with the command id dropped to -1, so one
    # model serves conditioned and unconditioned sampling
    command_dropout: float = 0.2
    seed: int = 0


@dataclass
class TrainingData:
    """Shard records joined with their source images, deduplicated."""

    images: NDArray[np.uint8]               # (U, H, W, C)
    img_of_sample: NDArray[np.int64]        # (S,) indices into images
    contours: NDArray[np.float64]           # (S, N, 2)
    command_ids: NDArray[np.int64]          # (S,)

    def __len__(self) -> int:
        return len(self.contours)


def assemble(records: Sequence[ShardRecord],
             logs: Sequence[DrivingLog]) -> TrainingData:
    """Join dataset records with their log frames' semantic images."""
    if not records:
        raise ValueError("no training records")
    keys = sorted({(r.log_index, r.frame_index) for r in records})
    index_of = {key: i for i, key in enumerate(keys)}
    images = []
    for log_index, frame_index in keys:
        if log_index >= len(logs):
            raise ValueError(f"record references missing log {log_index}")
        frame = logs[log_index].frames[frame_index]
        if frame.image is None:
            raise ValueError(
                f"log {log_index} frame {frame_index} has no image payload")
        images.append(frame.image.transpose(1, 2, 0))
    return TrainingData(
        images=np.stack(images),
        img_of_sample=np.array([index_of[(r.log_index, r.frame_index)]
                                for r in records], dtype=np.int64),
        contours=np.stack([r.points for r in records]),
        command_ids=np.array([r.command_id for r in records], dtype=np.int64))


@dataclass
class RunState:
    params: dict[str, Tensor]
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    order: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, np.int64))
    cursor: int = 0

    def order_meta(self) -> dict:
        return {"order": self.order.tolist(), "cursor": self.cursor}

    @classmethod
    def fresh(cls, config: DenoiserConfig, train: TrainConfig) -> "RunState":
        params = init_params(config, seed=train.seed)
        return cls(params=params, adam=init_adam(params),
                   rng=np.random.default_rng(train.seed))

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "RunState":
        return cls(params=ck.params, adam=ck.adam, rng=ck.rng, step=ck.step,
                   order=np.array(ck.meta.get("order", []), dtype=np.int64),
                   cursor=int(ck.meta.get("cursor", 0)))


def _next_batch(state: RunState, size: int, total: int) -> NDArray[np.int64]:
    # epoch permutation with drop-last; a fresh permutation is drawn when
    # the remainder cannot fill a batch, so batches never straddle epochs
    if state.cursor + size > len(state.order):
        state.order = state.rng.permutation(total)
        state.cursor = 0
    batch = state.order[state.cursor:state.cursor + size]
    state.cursor += size
    return batch


def train_steps(state: RunState, data: TrainingData, config: DenoiserConfig,
                train: TrainConfig, schedule: Optional[NoiseSchedule] = None,
                n_steps: Optional[int] = None,
                on_step: Optional[Callable[[int, float], None]] = None) -> list[float]:
    """Run optimizer steps in place; returns the per-step losses."""
    if schedule is None:
        schedule = cosine_schedule(config.t_max)
    size = min(train.batch_size, len(data))
    remaining = train.steps - state.step if n_steps is None else n_steps
    losses = []
    for _ in range(max(remaining, 0)):
        idx = _next_batch(state, size, len(data))
        commands = data.command_ids[idx].copy()
        if train.command_dropout > 0:
            drop = state.rng.random(size) < train.command_dropout
            commands[drop] = -1
        uniq, inv = np.unique(data.img_of_sample[idx], return_inverse=True)
        batch = TrainingBatch(
            images=data.images[uniq].astype(np.float64),
            img_of_sample=inv.astype(np.int64),
            contours=data.contours[idx],
            command_ids=commands)
        loss, grads = training_loss(state.params, config, schedule, batch,
                                    state.rng)
        adam_step(state.params, grads, state.adam, train.learning_rate)
        state.step += 1
        losses.append(loss)
        if on_step is not None:
            on_step(state.step, loss)
        if state.step % 50 == 0:
            logger.info("step %d loss %.4f", state.step, loss)
    return losses


def smoothed(losses: Sequence[float], window: int = 50) -> list[float]:
    """Trailing-window means, one per full window."""
    out = []
    for end in range(window, len(losses) + 1, window):
        out.append(float(np.mean(losses[end - window:end])))
    return out
