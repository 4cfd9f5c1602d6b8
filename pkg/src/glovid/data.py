"""Synthetic moving-sprite videos, the GLBV container format, and dataset IO.

Each video shows one sprite (square / circle / triangle) translating at
constant velocity along one of 8 compass directions, which doubles as the
class label. The sprite grows linearly over the clip so that frame order is
recoverable from any pair of frames - the cue the coherence losses and the
order probe rely on.

Container layout (bit-exact): magic ``GLBV``, four little-endian uint32
(F, H, W, C), one little-endian uint32 label, then F*H*W*C bytes of uint8
pixels in frame-major, row-major, channel-last order.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GLBV"
_HEADER = struct.Struct("<4s5I")

# class k moves along angle 45*k degrees, y pointing up on screen
DIRECTION_NAMES = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")
DIRECTION_VECTORS = tuple(
    (float(np.cos(np.pi / 4 * k)), float(-np.sin(np.pi / 4 * k)))
    for k in range(8)
)

SHAPE_KINDS = ("square", "circle", "triangle")

PALETTE = (
    (230, 60, 60),
    (60, 200, 60),
    (80, 110, 235),
    (235, 200, 50),
    (200, 70, 210),
    (60, 210, 210),
)

SIZE_GROWTH = 0.5  # relative sprite growth from first to last frame


class ContainerError(ValueError):
    """Raised for malformed GLBV files."""


def write_video_container(path: str | Path, frames: np.ndarray, label: int) -> None:
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    if frames.ndim != 4:
        raise ValueError(f"frames must be (F, H, W, C), got {frames.shape}")
    f, h, w, c = frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, f, h, w, c, int(label)))
        fh.write(frames.tobytes())


def read_video_container(path: str | Path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ContainerError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, f, h, w, c, label = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + f * h * w * c
    if len(raw) != expected:
        raise ContainerError(
            f"{path}: expected {expected} bytes for {f}x{h}x{w}x{c}, got {len(raw)}")
    frames = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size)
    return frames.reshape(f, h, w, c).copy(), int(label)


@dataclass(frozen=True)
class SpriteVideoSpec:
    shape: str                      # one of SHAPE_KINDS
    direction: int                  # class index into DIRECTION_VECTORS
    speed: float                    # pixels per frame
    color: tuple[int, int, int]
    start: tuple[float, float]      # sprite center at frame 0
    size: float                     # half-extent at frame 0, pixels


def render_sprite_frame(spec: SpriteVideoSpec, index: int, frames: int,
                        height: int, width: int) -> np.ndarray:
    """Rasterize one frame with ~1px analytic anti-aliasing."""
    u = index / (frames - 1) if frames > 1 else 0.0
    dx, dy = DIRECTION_VECTORS[spec.direction]
    cx = spec.start[0] + spec.speed * dx * index
    cy = spec.start[1] + spec.speed * dy * index
    cx = float(np.clip(cx, 0, width - 1))
    cy = float(np.clip(cy, 0, height - 1))
    r = spec.size * (1.0 + SIZE_GROWTH * u)

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    ex = xs - cx
    ey = ys - cy
    if spec.shape == "circle":
        cover = r + 0.5 - np.hypot(ex, ey)
    elif spec.shape == "square":
        cover = r + 0.5 - np.maximum(np.abs(ex), np.abs(ey))
    elif spec.shape == "triangle":
        # apex up: vertical extent [-r, r], half-width (ey + r) / 2
        half_w = (ey + r) / 2.0
        cover = np.minimum(half_w - np.abs(ex), r - np.abs(ey)) + 0.5
    else:
        raise ValueError(f"unknown shape {spec.shape!r}")
    mask = np.clip(cover, 0.0, 1.0)
    rgb = mask[..., None] * np.array(spec.color, dtype=np.float64)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def make_sprite_video(spec: SpriteVideoSpec, frames: int, height: int,
                      width: int) -> np.ndarray:
    return np.stack([render_sprite_frame(spec, i, frames, height, width)
                     for i in range(frames)])


def sample_sprite_spec(rng: np.random.Generator, frames: int, height: int,
                       width: int, direction: int | None = None) -> SpriteVideoSpec:
    """Draw a spec whose whole trajectory (at final size) stays on canvas."""
    k = int(rng.integers(0, 8)) if direction is None else int(direction)
    shape = SHAPE_KINDS[int(rng.integers(0, len(SHAPE_KINDS)))]
    color = PALETTE[int(rng.integers(0, len(PALETTE)))]
    size = float(rng.uniform(0.075, 0.11)) * min(height, width)
    speed = float(rng.uniform(0.023, 0.039)) * min(height, width)
    dx, dy = DIRECTION_VECTORS[k]
    margin = size * (1.0 + SIZE_GROWTH) + 1.0
    tx = speed * dx * (frames - 1)
    ty = speed * dy * (frames - 1)

    def interval(travel: float, extent: int) -> tuple[float, float]:
        lo = max(margin, margin - travel)
        hi = min(extent - 1 - margin, extent - 1 - margin - travel)
        if lo > hi:
            raise ValueError("sprite trajectory does not fit the canvas")
        return lo, hi

    x_lo, x_hi = interval(tx, width)
    y_lo, y_hi = interval(ty, height)
    start = (float(rng.uniform(x_lo, x_hi)), float(rng.uniform(y_lo, y_hi)))
    return SpriteVideoSpec(shape=shape, direction=k, speed=speed, color=color,
                           start=start, size=size)


def synth_dataset(out_dir: str | Path, num_videos: int, frames: int,
                  size: int, seed: int) -> list[tuple[str, int]]:
    """Write ``num_videos`` sprite clips plus a manifest; returns its entries.

    Deterministic in ``seed``. Classes cycle through the 8 directions so the
    label distribution is balanced.
    """
    if num_videos < 1 or frames < 1:
        raise ValueError("num_videos and frames must be positive")
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries: list[tuple[str, int]] = []
    for n in range(num_videos):
        spec = sample_sprite_spec(rng, frames, size, size, direction=n % 8)
        video = make_sprite_video(spec, frames, size, size)
        rel = f"videos/{n:05d}.glbv"
        write_video_container(out / rel, video, spec.direction)
        entries.append((rel, spec.direction))
    with open(out / "manifest.txt", "w") as fh:
        for rel, label in entries:
            fh.write(f"{rel} {label}\n")
    return entries


def load_manifest(data_dir: str | Path) -> list[tuple[str, int]]:
    path = Path(data_dir) / "manifest.txt"
    entries = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rel, label = line.rsplit(" ", 1)
            entries.append((rel, int(label)))
    return entries


class SpriteDataset:
    """Manifest-backed dataset; items are (frames uint8 (F,H,W,C), label)."""

    def __init__(self, data_dir: str | Path):
        self.root = Path(data_dir)
        self.entries = load_manifest(self.root)
        if not self.entries:
            raise ValueError(f"empty manifest in {data_dir}")
        first, _ = read_video_container(self.root / self.entries[0][0])
        self.frames, self.height, self.width, self.channels = first.shape

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, idx: int) -> tuple[np.ndarray, int]:
        rel, label = self.entries[idx]
        frames, file_label = read_video_container(self.root / rel)
        if file_label != label:
            raise ContainerError(f"{rel}: label mismatch with manifest")
        return frames, label

    def split(self, val_fraction: float) -> tuple[list[int], list[int]]:
        """Deterministic tail split into (train indexes, val indexes)."""
        n_val = max(1, int(round(len(self) * val_fraction)))
        n_train = len(self) - n_val
        return list(range(n_train)), list(range(n_train, len(self)))


def frames_to_unit(frames: np.ndarray) -> torch.Tensor:
    """uint8 (..., H, W, C) -> float32 (..., C, H, W) in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(frames)).float() / 127.5 - 1.0
    return x.movedim(-1, -3).contiguous()


def unit_to_frames(x: torch.Tensor) -> np.ndarray:
    """float (..., C, H, W) in [-1, 1] -> uint8 (..., H, W, C)."""
    y = (x.detach().movedim(-3, -1).clamp(-1.0, 1.0) + 1.0) * 127.5
    return y.round().to(torch.uint8).cpu().numpy()


def sprite_centroid(frame: np.ndarray) -> tuple[float, float] | None:
    """Intensity-weighted centroid (x, y) of the bright region, if any."""
    weight = frame.astype(np.float64).sum(axis=-1)
    weight[weight < 30.0] = 0.0
    total = weight.sum()
    if total <= 0:
        return None
    ys, xs = np.mgrid[0:frame.shape[0], 0:frame.shape[1]]
    return float((xs * weight).sum() / total), float((ys * weight).sum() / total)


def dominant_direction(video: np.ndarray) -> int | None:
    """Compass class of the first-to-last centroid displacement."""
    first = sprite_centroid(video[0])
    last = sprite_centroid(video[-1])
    if first is None or last is None:
        return None
    dx = last[0] - first[0]
    dy = last[1] - first[1]
    if dx * dx + dy * dy < 1.0:
        return None
    angle = np.arctan2(-dy, dx)  # screen y points down
    return int(np.round(angle / (np.pi / 4))) % 8
