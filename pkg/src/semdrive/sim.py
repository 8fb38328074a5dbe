"""Deterministic 2D driving world: track geometry, kinematic vehicle, reward.

The world is a band of drivable road around a piecewise-linear centerline.
A single vehicle moves with a minimal kinematic model (speed plus a fixed
heading rate while steering). Leaving the band counts as a collision and
ends the episode.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle in radians to (-pi, pi]."""
    return math.pi - (math.pi - theta) % TWO_PI


class Action(IntEnum):
    """The 9 discrete driving actions.

    The order is fixed and load-bearing (checkpoints, sampling, metrics):
    indices 0-2 accelerate, 3-5 brake, 6-8 coast; within each group the
    steering cycles straight, left, right.
    """

    STRAIGHT_ACCEL = 0
    LEFT_ACCEL = 1
    RIGHT_ACCEL = 2
    STRAIGHT_BRAKE = 3
    LEFT_BRAKE = 4
    RIGHT_BRAKE = 5
    STRAIGHT = 6
    LEFT = 7
    RIGHT = 8

    @property
    def steer_sign(self) -> int:
        """+1 turns left (counter-clockwise), -1 right, 0 straight."""
        return (0, 1, -1)[self % 3]

    @property
    def throttle_sign(self) -> int:
        """+1 accelerates, -1 brakes, 0 coasts."""
        return (1, -1, 0)[self // 3]


N_ACTIONS = len(Action)


@dataclass(frozen=True)
class SimConfig:
    """Vehicle dynamics and episode limits."""

    dt: float = 0.1
    v_max: float = 30.0
    accel: float = 2.0
    brake_decel: float = 4.0
    steer_rate: float = 0.5
    max_steps: int = 1000

    def __post_init__(self) -> None:
        for name in ("dt", "v_max", "accel", "brake_decel", "steer_rate"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ValueError(f"sim.{name} must be a positive finite number, got {value!r}")
        if not (isinstance(self.max_steps, int) and self.max_steps >= 1):
            raise ValueError(f"sim.max_steps must be an integer >= 1, got {self.max_steps!r}")


@dataclass(frozen=True)
class RewardParams:
    """Constants of the per-step reward: scale on progress, penalty on collision."""

    beta: float = 0.006
    gamma_collision: float = -0.025

    def __post_init__(self) -> None:
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"reward.beta must be > 0, got {self.beta!r}")
        if not (math.isfinite(self.gamma_collision) and self.gamma_collision < 0):
            raise ValueError(f"reward.gamma_collision must be < 0, got {self.gamma_collision!r}")


@dataclass(frozen=True)
class VehicleState:
    """Vehicle pose at one simulation step."""

    position: tuple[float, float]
    heading: float
    speed: float
    step_index: int = 0


@dataclass(frozen=True)
class TrackRelative:
    """Track-relative quantities feeding the reward."""

    dist_center: float
    alpha: float
    off_track: bool


class Segments(NamedTuple):
    """Per-segment geometry of a centerline, as flat float64 arrays."""

    ax: np.ndarray       # segment start x
    ay: np.ndarray       # segment start y
    vx: np.ndarray       # segment delta x
    vy: np.ndarray       # segment delta y
    len2: np.ndarray     # squared segment length
    length: np.ndarray
    cum_start: np.ndarray  # arclength at segment start


@dataclass(frozen=True)
class TrackSpec:
    """Piecewise-linear centerline plus a constant drivable width.

    If ``closed``, the last point connects back to the first; the closing
    point must not be repeated in the list.
    """

    centerline: tuple[tuple[float, float], ...]
    width: float
    closed: bool = False

    def __post_init__(self) -> None:
        points = tuple((float(x), float(y)) for x, y in self.centerline)
        object.__setattr__(self, "centerline", points)
        if len(points) < 2:
            raise ValueError("centerline must contain at least 2 points")
        for i, (x, y) in enumerate(points):
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError(f"centerline[{i}] must be finite, got ({x!r}, {y!r})")
        for i in range(1, len(points)):
            if points[i] == points[i - 1]:
                raise ValueError(f"centerline[{i}] duplicates centerline[{i - 1}] (zero-length segment)")
        if self.closed and points[0] == points[-1]:
            raise ValueError("closed track must not repeat its first point at the end")
        if not (isinstance(self.width, (int, float)) and math.isfinite(self.width) and self.width > 0):
            raise ValueError(f"width must be a positive finite number, got {self.width!r}")
        object.__setattr__(self, "width", float(self.width))

    @cached_property
    def segments(self) -> Segments:
        pts = list(self.centerline)
        if self.closed:
            pts.append(pts[0])
        arr = np.asarray(pts, dtype=np.float64)
        ax, ay = arr[:-1, 0], arr[:-1, 1]
        vx = arr[1:, 0] - ax
        vy = arr[1:, 1] - ay
        len2 = vx * vx + vy * vy
        length = np.sqrt(len2)
        cum_start = np.concatenate(([0.0], np.cumsum(length)[:-1]))
        return Segments(ax, ay, vx, vy, len2, length, cum_start)

    @property
    def total_length(self) -> float:
        segs = self.segments
        return float(segs.cum_start[-1] + segs.length[-1])

    def point_at(self, arclength: float) -> tuple[float, float]:
        """Centerline point at the given arclength (wrapped if closed, clamped if open)."""
        i, t = self._locate(arclength)
        segs = self.segments
        return (float(segs.ax[i] + t * segs.vx[i]), float(segs.ay[i] + t * segs.vy[i]))

    def tangent_at(self, arclength: float) -> tuple[float, float]:
        """Unit tangent of the segment containing the given arclength."""
        i, _ = self._locate(arclength)
        segs = self.segments
        return (float(segs.vx[i] / segs.length[i]), float(segs.vy[i] / segs.length[i]))

    def _locate(self, arclength: float) -> tuple[int, float]:
        total = self.total_length
        s = arclength % total if self.closed else min(max(arclength, 0.0), total)
        segs = self.segments
        i = int(np.searchsorted(segs.cum_start, s, side="right") - 1)
        i = min(max(i, 0), len(segs.length) - 1)
        t = (s - float(segs.cum_start[i])) / float(segs.length[i])
        return i, min(max(t, 0.0), 1.0)


@dataclass(frozen=True)
class Projection:
    """Closest-point projection of a position onto the centerline."""

    nearest: tuple[float, float]
    tangent: tuple[float, float]
    dist_center: float
    segment_index: int
    arclength: float


def project_to_track(track: TrackSpec, position: tuple[float, float]) -> Projection:
    """Project a position onto the track centerline.

    Returns the minimum distance over all segments; ties go to the lowest
    segment index (np.argmin picks the first minimum).
    """
    segs = track.segments
    px, py = float(position[0]), float(position[1])
    dx = px - segs.ax
    dy = py - segs.ay
    t = (dx * segs.vx + dy * segs.vy) / segs.len2
    t = np.clip(t, 0.0, 1.0)
    nx = segs.ax + t * segs.vx
    ny = segs.ay + t * segs.vy
    ddx = px - nx
    ddy = py - ny
    d2 = ddx * ddx + ddy * ddy
    i = int(np.argmin(d2))
    return Projection(
        nearest=(float(nx[i]), float(ny[i])),
        tangent=(float(segs.vx[i] / segs.length[i]), float(segs.vy[i] / segs.length[i])),
        dist_center=math.sqrt(float(d2[i])),
        segment_index=i,
        arclength=float(segs.cum_start[i]) + float(t[i]) * float(segs.length[i]),
    )


def track_relative(track: TrackSpec, position: tuple[float, float], heading: float) -> TrackRelative:
    """Distance to the centerline and heading angle against the local tangent."""
    proj = project_to_track(track, position)
    tangent_angle = math.atan2(proj.tangent[1], proj.tangent[0])
    return TrackRelative(
        dist_center=proj.dist_center,
        alpha=wrap_angle(heading - tangent_angle),
        off_track=proj.dist_center > track.width / 2.0,
    )


def compute_reward(
    v: float,
    alpha: float,
    dist_center: float,
    collided: bool,
    params: RewardParams,
) -> float:
    """Per-step reward: speed along the track minus center offset, or the collision penalty."""
    if collided:
        return params.gamma_collision
    return (v * math.cos(alpha) - dist_center) * params.beta


def step(
    state: VehicleState,
    action: Action,
    track: TrackSpec,
    cfg: SimConfig,
) -> tuple[VehicleState, TrackRelative, bool, bool]:
    """Advance the vehicle one step (semi-implicit: speed and heading update first).

    Returns (next_state, track_relative, collided, done). A collision is the
    vehicle center leaving the track band; it terminates the episode.
    """
    throttle = action.throttle_sign
    if throttle > 0:
        a = cfg.accel
    elif throttle < 0:
        a = -cfg.brake_decel
    else:
        a = 0.0
    speed = min(max(state.speed + a * cfg.dt, 0.0), cfg.v_max)
    heading = wrap_angle(state.heading + action.steer_sign * cfg.steer_rate * cfg.dt)
    x = state.position[0] + speed * cfg.dt * math.cos(heading)
    y = state.position[1] + speed * cfg.dt * math.sin(heading)
    rel = track_relative(track, (x, y), heading)
    next_state = VehicleState(position=(x, y), heading=heading, speed=speed, step_index=state.step_index + 1)
    collided = rel.off_track
    done = collided or next_state.step_index >= cfg.max_steps
    return next_state, rel, collided, done


def reset(track: TrackSpec, cfg: SimConfig, seed: int | None = None) -> VehicleState:
    """Place the vehicle on the centerline at speed 0, heading along the track.

    Without a seed the start is the first centerline point. With a seed the
    start is jittered uniformly along the first 10% of the track length,
    deterministically per seed.
    """
    if seed is None:
        s = 0.0
    else:
        s = float(np.random.default_rng(seed).uniform(0.0, 0.1 * track.total_length))
    tx, ty = track.tangent_at(s)
    return VehicleState(
        position=track.point_at(s),
        heading=wrap_angle(math.atan2(ty, tx)),
        speed=0.0,
        step_index=0,
    )


def oval_track(
    total_length: float = 500.0,
    width: float = 8.0,
    corner_radius: float = 60.0,
    points_per_arc: int = 36,
) -> TrackSpec:
    """Closed oval: two straights joined by two semicircular arcs.

    The polyline is scaled so its total length is exactly ``total_length``
    (arc sampling shortens chords slightly, so the effective corner radius
    ends up marginally above ``corner_radius``).
    """
    arc_len = math.pi * corner_radius
    straight = (total_length - 2.0 * arc_len) / 2.0
    if straight <= 0:
        raise ValueError("corner_radius too large for the requested total_length")
    pts: list[tuple[float, float]] = [(0.0, 0.0), (straight, 0.0)]
    for k in range(1, points_per_arc + 1):
        theta = -math.pi / 2.0 + math.pi * k / points_per_arc
        pts.append((straight + corner_radius * math.cos(theta), corner_radius + corner_radius * math.sin(theta)))
    pts.append((0.0, 2.0 * corner_radius))
    for k in range(1, points_per_arc):
        theta = math.pi / 2.0 + math.pi * k / points_per_arc
        pts.append((corner_radius * math.cos(theta), corner_radius + corner_radius * math.sin(theta)))
    raw = TrackSpec(centerline=tuple(pts), width=width, closed=True)
    scale = total_length / raw.total_length
    scaled = tuple((x * scale, y * scale) for x, y in pts)
    return TrackSpec(centerline=scaled, width=width, closed=True)


def _reject_json_constant(name: str) -> float:
    raise ValueError(f"non-finite JSON number {name!r} is not permitted")


def load_track(path: str | Path) -> TrackSpec:
    """Load a track from JSON: {"centerline": [[x, y], ...], "width": w, "closed": bool}.

    Rejects missing/extra fields, non-numeric entries, and NaN/Infinity with a
    diagnostic naming the offending field.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"), parse_constant=_reject_json_constant)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top-level value must be an object")
    unknown = set(raw) - {"centerline", "width", "closed"}
    if unknown:
        raise ValueError(f"{path}: unknown field {sorted(unknown)[0]!r}")
    for field in ("centerline", "width"):
        if field not in raw:
            raise ValueError(f"{path}: missing field {field!r}")
    centerline = raw["centerline"]
    if not isinstance(centerline, list):
        raise ValueError(f"{path}: centerline must be a list of [x, y] pairs")
    points = []
    for i, entry in enumerate(centerline):
        if not (isinstance(entry, list) and len(entry) == 2):
            raise ValueError(f"{path}: centerline[{i}] must be an [x, y] pair")
        for j, coord in enumerate(entry):
            if not isinstance(coord, (int, float)) or isinstance(coord, bool) or not math.isfinite(coord):
                raise ValueError(f"{path}: centerline[{i}][{j}] must be a finite number, got {coord!r}")
        points.append((float(entry[0]), float(entry[1])))
    width = raw["width"]
    if not isinstance(width, (int, float)) or isinstance(width, bool) or not math.isfinite(width):
        raise ValueError(f"{path}: width must be a finite number, got {width!r}")
    closed = raw.get("closed", False)
    if not isinstance(closed, bool):
        raise ValueError(f"{path}: closed must be a boolean, got {closed!r}")
    try:
        return TrackSpec(centerline=tuple(points), width=float(width), closed=closed)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def save_track(track: TrackSpec, path: str | Path) -> None:
    """Write a track as UTF-8 JSON in the format accepted by load_track."""
    payload = {
        "centerline": [[x, y] for x, y in track.centerline],
        "width": track.width,
        "closed": track.closed,
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")
