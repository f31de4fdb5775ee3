"""Static overlay rendering for logs, predictions, and ground truth."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from .freespace_gen import Contour, denormalize_points
from .persist import _atomic_bytes
from .synthworld import CH_MARKING, CH_OBSTACLE, CH_OFFROAD, CH_ROAD

# per-sample contour colors, then ground truth green
PALETTE = ((230, 60, 60), (60, 120, 230), (235, 170, 40), (160, 70, 200),
           (70, 200, 200), (240, 110, 180))
GT_COLOR = (70, 220, 90)

_BASE = {CH_ROAD: (90, 90, 95), CH_MARKING: (200, 200, 190),
         CH_OBSTACLE: (150, 60, 45), CH_OFFROAD: (60, 80, 50)}


def semantic_rgb(channels: NDArray[np.uint8]) -> NDArray[np.uint8]:
    """Flat-shaded RGB rendering of (channels, height, width) semantics."""
    _, height, width = channels.shape
    rgb = np.full((height, width, 3), 25, dtype=np.uint8)
    for channel in (CH_OFFROAD, CH_ROAD, CH_MARKING, CH_OBSTACLE):
        rgb[channels[channel] > 0] = _BASE[channel]
    return rgb


def draw_contour(rgb: NDArray[np.uint8], contour: Contour,
                 color: tuple[int, int, int]) -> None:
    """Rasterize the closed contour outline into ``rgb`` in place."""
    height, width = rgb.shape[:2]
    px = denormalize_points(contour.points, width, height)
    closed = np.concatenate([px, px[:1]])
    for a, b in zip(closed, closed[1:]):
        steps = max(int(np.ceil(np.abs(b - a).max() * 2)), 1)
        line = a + (b - a) * np.linspace(0.0, 1.0, steps + 1)[:, None]
        cols = np.clip(line[:, 0].astype(np.int64), 0, width - 1)
        rows = np.clip(line[:, 1].astype(np.int64), 0, height - 1)
        rgb[rows, cols] = color


def overlay(channels: NDArray[np.uint8], predictions: Sequence[Contour],
            ground_truth: Optional[Contour] = None) -> NDArray[np.uint8]:
    """Semantic base image with per-sample contour colors, GT in green."""
    rgb = semantic_rgb(channels)
    if ground_truth is not None:
        draw_contour(rgb, ground_truth, GT_COLOR)
    for i, contour in enumerate(predictions):
        draw_contour(rgb, contour, PALETTE[i % len(PALETTE)])
    return rgb


def save_png(path: Path | str, rgb: NDArray[np.uint8]) -> Path:
    path = Path(path)
    buffer = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buffer, format="PNG")
    _atomic_bytes(path, buffer.getvalue())
    return path
