"""Grayscale semantic-layout frames and the 4-frame observation window.

Frames are ego-centric top-down projections: the vehicle sits at the
bottom-center of the image facing up, and every pixel is classified by the
distance from its world point to the track centerline. Each semantic class
maps to one fixed gray level, so a frame is simultaneously an image and an
exact class map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .sim import TrackSpec, VehicleState

# Ego footprint drawn at the bottom-center of the frame, in meters. At very
# coarse resolutions (pixel size above these extents) the rectangle may not
# cover any pixel center and disappears.
EGO_LENGTH_M = 2.5
EGO_HALF_WIDTH_M = 0.75


class SemanticClass:
    """Pixel classes. Values index the gray palette."""

    OFF_ROAD = 0
    ROAD = 1
    LANE_MARKING = 2
    EGO_VEHICLE = 3


ALL_CLASSES = (
    SemanticClass.OFF_ROAD,
    SemanticClass.ROAD,
    SemanticClass.LANE_MARKING,
    SemanticClass.EGO_VEHICLE,
)

# Gray level per class, chosen to be well separated in [0, 1].
GRAY_LEVELS = np.array([0.0, 0.45, 0.9, 0.7], dtype=np.float32)


def class_to_gray(semantic_class: int) -> float:
    """Gray level of a class (float32-exact value as a Python float)."""
    if semantic_class not in ALL_CLASSES:
        raise ValueError(f"unknown semantic class {semantic_class!r}")
    return float(GRAY_LEVELS[semantic_class])


def gray_to_class(level: float) -> int:
    """Nearest-palette inverse of class_to_gray."""
    return int(np.argmin(np.abs(GRAY_LEVELS - np.float32(level))))


@dataclass(frozen=True)
class RenderConfig:
    """Observation geometry: square resolution and the metric extent of the view."""

    resolution: int = 64
    view_ahead: float = 40.0
    view_side: float = 20.0
    marking_width: float = 0.5

    def __post_init__(self) -> None:
        if not (isinstance(self.resolution, int) and self.resolution >= 1):
            raise ValueError(f"render.resolution must be an integer >= 1, got {self.resolution!r}")
        for name in ("view_ahead", "view_side", "marking_width"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ValueError(f"render.{name} must be a positive finite number, got {value!r}")


@dataclass(frozen=True)
class SemanticFrame:
    """One rendered observation: gray levels in [0, 1], row-major, top row farthest."""

    width: int
    height: int
    pixels: np.ndarray  # (height, width) float32

    def __post_init__(self) -> None:
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(
                f"pixel array shape {self.pixels.shape} does not match "
                f"declared {self.height}x{self.width}"
            )

    def classes(self) -> np.ndarray:
        """Recover the (height, width) class map via the nearest-palette inverse."""
        return np.argmin(np.abs(self.pixels[..., None] - GRAY_LEVELS[None, None, :]), axis=-1)


@dataclass(frozen=True)
class FrameStack:
    """The 4 most recent frames, oldest first."""

    frames: tuple[SemanticFrame, SemanticFrame, SemanticFrame, SemanticFrame]

    def __post_init__(self) -> None:
        if len(self.frames) != 4:
            raise ValueError(f"frame stack must hold exactly 4 frames, got {len(self.frames)}")
        first = self.frames[0]
        for frame in self.frames[1:]:
            if (frame.width, frame.height) != (first.width, first.height):
                raise ValueError(
                    f"frame stack dimensions mismatch: {frame.width}x{frame.height} "
                    f"vs {first.width}x{first.height}"
                )

    @classmethod
    def initial(cls, frame: SemanticFrame) -> "FrameStack":
        """Episode-start stack: the first frame replicated 4 times."""
        return cls(frames=(frame, frame, frame, frame))

    def as_array(self) -> np.ndarray:
        """Stack as a (4, height, width) float32 array, oldest frame first."""
        return np.stack([f.pixels for f in self.frames])


def push_frame(stack: FrameStack, frame: SemanticFrame) -> FrameStack:
    """Drop the oldest frame and append the newest."""
    last = stack.frames[0]
    if (frame.width, frame.height) != (last.width, last.height):
        raise ValueError(
            f"cannot push a {frame.width}x{frame.height} frame onto a "
            f"{last.width}x{last.height} stack"
        )
    return FrameStack(frames=(stack.frames[1], stack.frames[2], stack.frames[3], frame))


@lru_cache(maxsize=8)
def _pixel_grid(resolution: int, view_ahead: float, view_side: float) -> tuple[np.ndarray, np.ndarray]:
    """Flat (forward, lateral) offsets of every pixel center in the ego frame.

    Row 0 is farthest ahead; lateral is positive toward the right edge of the
    image (the vehicle's right).
    """
    n = resolution
    rows = np.arange(n, dtype=np.float64)
    cols = np.arange(n, dtype=np.float64)
    forward = view_ahead * (n - rows - 0.5) / n
    lateral = view_side * (2.0 * (cols + 0.5) / n - 1.0)
    f_grid = np.repeat(forward, n)
    l_grid = np.tile(lateral, n)
    return f_grid, l_grid


@lru_cache(maxsize=8)
def _ego_mask(resolution: int, view_ahead: float, view_side: float) -> np.ndarray:
    f_grid, l_grid = _pixel_grid(resolution, view_ahead, view_side)
    return (f_grid <= EGO_LENGTH_M) & (np.abs(l_grid) <= EGO_HALF_WIDTH_M)


def render(track: TrackSpec, state: VehicleState, cfg: RenderConfig) -> SemanticFrame:
    """Rasterize the semantic layout around the vehicle.

    Classification per pixel center, in priority order: within marking_width
    of the centerline -> lane marking; within width/2 -> road; otherwise
    off-road. A small fixed rectangle at the ego position overrides all.
    Deterministic and pure.
    """
    n = cfg.resolution
    f_grid, l_grid = _pixel_grid(n, cfg.view_ahead, cfg.view_side)
    ch = math.cos(state.heading)
    sh = math.sin(state.heading)
    px, py = state.position
    # world coordinates in float64; the per-segment distance field below runs
    # in float32 (hot path), which classifies identically because class
    # boundaries sit far above float32 noise at these scales
    wx = (px + f_grid * ch + l_grid * sh).astype(np.float32)
    wy = (py + f_grid * sh - l_grid * ch).astype(np.float32)

    marking_t2 = np.float32(cfg.marking_width * cfg.marking_width)
    half_width = track.width / 2.0
    road_t2 = np.float32(half_width * half_width)

    # Segments farther from the view's bounding circle than the road band
    # cannot change any pixel's class, so they are skipped. The margin makes
    # the bound safe against rounding.
    segs = track.segments
    view_cx = px + (cfg.view_ahead / 2.0) * ch
    view_cy = py + (cfg.view_ahead / 2.0) * sh
    view_r = math.hypot(cfg.view_ahead / 2.0, cfg.view_side)
    cdx = view_cx - segs.ax
    cdy = view_cy - segs.ay
    ct = np.clip((cdx * segs.vx + cdy * segs.vy) / segs.len2, 0.0, 1.0)
    cddx = view_cx - (segs.ax + ct * segs.vx)
    cddy = view_cy - (segs.ay + ct * segs.vy)
    reach = view_r + max(half_width, cfg.marking_width) + 1.0
    keep = (cddx * cddx + cddy * cddy) <= reach * reach

    classes = np.full(n * n, SemanticClass.OFF_ROAD, dtype=np.int64)
    if np.any(keep):
        ax = segs.ax[keep].astype(np.float32)[None, :]
        ay = segs.ay[keep].astype(np.float32)[None, :]
        vx = segs.vx[keep].astype(np.float32)[None, :]
        vy = segs.vy[keep].astype(np.float32)[None, :]
        len2 = segs.len2[keep].astype(np.float32)[None, :]
        dx = wx[:, None] - ax
        dy = wy[:, None] - ay
        t = (dx * vx + dy * vy) / len2
        np.clip(t, 0.0, 1.0, out=t)
        ddx = dx - t * vx
        ddy = dy - t * vy
        d2 = (ddx * ddx + ddy * ddy).min(axis=1)
        classes = np.where(
            d2 <= marking_t2,
            SemanticClass.LANE_MARKING,
            np.where(d2 <= road_t2, SemanticClass.ROAD, SemanticClass.OFF_ROAD),
        )
    classes[_ego_mask(n, cfg.view_ahead, cfg.view_side)] = SemanticClass.EGO_VEHICLE
    pixels = GRAY_LEVELS[classes].reshape(n, n)
    return SemanticFrame(width=n, height=n, pixels=pixels)


def write_pgm(frame: SemanticFrame, path: str | Path) -> None:
    """Write a frame as binary PGM (P5).

    Byte layout: the ASCII header ``P5\\n<width> <height>\\n255\\n`` followed by
    width*height raw bytes, row-major from the top row, one byte per pixel
    with value rint(level * 255).
    """
    header = f"P5\n{frame.width} {frame.height}\n255\n".encode("ascii")
    data = np.rint(frame.pixels.astype(np.float64) * 255.0).astype(np.uint8).tobytes()
    Path(path).write_bytes(header + data)


def read_pgm(path: str | Path) -> SemanticFrame:
    """Read a binary PGM (P5, maxval 255) and snap gray levels to the class palette.

    Snapping makes externally produced semantic images consumable: each byte
    maps to the nearest of the 4 class levels.
    """
    blob = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4 and pos < len(blob):
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if pos > start:
            tokens.append(blob[start:pos])
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise ValueError(f"{path}: unsupported PGM maxval {maxval} (expected 255)")
    if width < 1 or height < 1:
        raise ValueError(f"{path}: invalid PGM dimensions {width}x{height}")
    data = blob[pos + 1 : pos + 1 + width * height]
    if len(data) != width * height:
        raise ValueError(f"{path}: truncated PGM pixel data")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
    levels = raw.astype(np.float32) / np.float32(255.0)
    snapped = GRAY_LEVELS[np.argmin(np.abs(levels[..., None] - GRAY_LEVELS[None, None, :]), axis=-1)]
    return SemanticFrame(width=width, height=height, pixels=snapped)
