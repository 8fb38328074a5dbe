"""Offline evaluation: steering-angle labels vs the agent's collapsed actions.

Continuous steering-angle labels (degrees, negative = left) collapse to three
classes at the +/-15 degree thresholds; the agent's 9 actions collapse to the
same three classes by dropping the throttle component. Accuracy is the
fraction of records where the two agree.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .network import NetworkParams, forward
from .render import FrameStack, RenderConfig, SemanticFrame, read_pgm, render, write_pgm
from .sim import (
    Action,
    SimConfig,
    TrackSpec,
    VehicleState,
    project_to_track,
    reset,
    step,
    wrap_angle,
)

MANIFEST_COLUMNS = ("frame_id", "angle_degrees", "frame_path")

STRAIGHT_MAX_DEGREES = 15.0


class SteeringClass(IntEnum):
    LEFT = 0
    STRAIGHT = 1
    RIGHT = 2


def angle_to_class(angle_degrees: float) -> SteeringClass:
    """Map a signed steering angle to a class; [-15, 15] inclusive is straight."""
    if not math.isfinite(angle_degrees):
        raise ValueError(f"steering angle must be finite, got {angle_degrees!r}")
    if angle_degrees < -STRAIGHT_MAX_DEGREES:
        return SteeringClass.LEFT
    if angle_degrees > STRAIGHT_MAX_DEGREES:
        return SteeringClass.RIGHT
    return SteeringClass.STRAIGHT


def collapse_action(action: Action) -> SteeringClass:
    """Drop the throttle component: each steering direction covers 3 actions."""
    return (SteeringClass.STRAIGHT, SteeringClass.LEFT, SteeringClass.RIGHT)[action % 3]


def predict(params: NetworkParams, stack: FrameStack) -> Action:
    """Greedy action: argmax over the policy, ties broken by lowest index."""
    out = forward(params, stack)
    return Action(int(np.argmax(out.policy)))


@dataclass(frozen=True)
class EvalRecord:
    """One labeled frame. The frame comes from a PGM file or a simulator state."""

    frame_id: str
    angle_degrees: float
    frame_path: str | None = None
    sim_state: VehicleState | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.angle_degrees):
            raise ValueError(f"record {self.frame_id!r}: angle must be finite")
        if self.frame_path is None and self.sim_state is None:
            raise ValueError(f"record {self.frame_id!r}: needs a frame path or a simulator state")


@dataclass
class EvalReport:
    """Accuracy and the 3x3 confusion matrix (rows: true class, cols: predicted)."""

    n_records: int
    n_correct: int
    accuracy: float
    confusion: np.ndarray
    n_skipped: int = 0

    def format_table(self) -> str:
        names = [c.name for c in SteeringClass]
        lines = [
            f"records scored: {self.n_records}   skipped: {self.n_skipped}",
            f"correct: {self.n_correct}   accuracy: {self.accuracy:.4f}",
            "confusion (rows=label, cols=prediction):",
            "  " + "".join(f"{n:>10}" for n in [""] + names),
        ]
        for i, name in enumerate(names):
            lines.append("  " + f"{name:>10}" + "".join(f"{int(self.confusion[i, j]):>10}" for j in range(3)))
        return "\n".join(lines)


PredictFn = Callable[[FrameStack, EvalRecord], Action]


def _id_prefix(frame_id: str) -> str:
    return frame_id.rsplit("_", 1)[0]


class _FrameLoader:
    """Loads record frames (PGM or rendered from state), keeping a small cache."""

    def __init__(self, render_cfg: RenderConfig, track: TrackSpec | None) -> None:
        self._render_cfg = render_cfg
        self._track = track
        self._cache: dict[str, SemanticFrame] = {}
        self._order: list[str] = []

    def load(self, record: EvalRecord) -> SemanticFrame:
        cached = self._cache.get(record.frame_id)
        if cached is not None:
            return cached
        if record.frame_path is not None:
            frame = read_pgm(record.frame_path)
        else:
            if self._track is None:
                raise ValueError(f"record {record.frame_id!r} carries a simulator state but no track was given")
            frame = render(self._track, record.sim_state, self._render_cfg)
        self._cache[record.frame_id] = frame
        self._order.append(record.frame_id)
        if len(self._order) > 8:
            self._cache.pop(self._order.pop(0), None)
        return frame


def _build_stack(
    manifest: Sequence[EvalRecord],
    index: int,
    loader: _FrameLoader,
) -> FrameStack:
    """4-frame window ending at record ``index``.

    Uses up to 3 immediately preceding records sharing the id prefix; missing
    or unreadable predecessors are padded by replicating the oldest available
    frame (a lone frame becomes four copies of itself).
    """
    current = loader.load(manifest[index])
    frames: list[SemanticFrame] = [current]
    prefix = _id_prefix(manifest[index].frame_id)
    for j in (index - 1, index - 2, index - 3):
        if j < 0 or _id_prefix(manifest[j].frame_id) != prefix:
            break
        try:
            frames.insert(0, loader.load(manifest[j]))
        except (OSError, ValueError):
            break
    while len(frames) < 4:
        frames.insert(0, frames[0])
    return FrameStack(frames=tuple(frames))


def evaluate(
    params: NetworkParams | None,
    manifest: Sequence[EvalRecord],
    render_cfg: RenderConfig,
    *,
    track: TrackSpec | None = None,
    predict_fn: PredictFn | None = None,
) -> EvalReport:
    """Score a manifest: predicted steering class vs the labeled class per record.

    ``predict_fn`` replaces the network prediction when given (used for
    baseline and oracle predictors); otherwise ``params`` must be provided.
    Records whose own frame cannot be read are skipped and tallied.
    """
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    if predict_fn is None:
        if params is None:
            raise ValueError("evaluate needs network parameters or an explicit predict_fn")
        net_params = params

        def predict_fn(stack: FrameStack, record: EvalRecord) -> Action:
            return predict(net_params, stack)

    loader = _FrameLoader(render_cfg, track)
    confusion = np.zeros((3, 3), dtype=np.int64)
    n_correct = 0
    n_scored = 0
    n_skipped = 0
    with threadpool_limits(limits=1):  # many tiny matmuls; BLAS threading only hurts
        for i, record in enumerate(manifest):
            label = angle_to_class(record.angle_degrees)
            try:
                stack = _build_stack(manifest, i, loader)
            except (OSError, ValueError):
                n_skipped += 1
                continue
            predicted = collapse_action(predict_fn(stack, record))
            confusion[int(label), int(predicted)] += 1
            n_scored += 1
            if predicted == label:
                n_correct += 1
    accuracy = n_correct / n_scored if n_scored else 0.0
    return EvalReport(
        n_records=n_scored,
        n_correct=n_correct,
        accuracy=accuracy,
        confusion=confusion,
        n_skipped=n_skipped,
    )


def pure_pursuit_angle(
    track: TrackSpec,
    state: VehicleState,
    lookahead: float = 8.0,
) -> float:
    """Steering-angle label in degrees for the scripted driver, negative = left.

    The label is the bearing from the vehicle heading to a centerline point
    ``lookahead`` meters further along the track, negated so that a target on
    the left yields a negative angle.
    """
    proj = project_to_track(track, state.position)
    target = track.point_at(proj.arclength + lookahead)
    bearing = wrap_angle(
        math.atan2(target[1] - state.position[1], target[0] - state.position[0]) - state.heading
    )
    return -math.degrees(bearing)


def _controller_action(angle_degrees: float, speed: float, target_speed: float, deadband: float = 0.5) -> Action:
    """Discrete action tracking the pure-pursuit angle at a target cruise speed."""
    if angle_degrees < -deadband:
        steer = 1  # left
    elif angle_degrees > deadband:
        steer = 2  # right
    else:
        steer = 0
    throttle = 0 if speed < target_speed else 2  # accelerate, else coast
    return Action(throttle * 3 + steer)


def generate_eval_manifest(
    track: TrackSpec,
    n: int,
    seed: int,
    out_dir: str | Path,
    sim_cfg: SimConfig | None = None,
    render_cfg: RenderConfig | None = None,
    target_speed: float = 10.0,
    lookahead: float = 8.0,
) -> list[EvalRecord]:
    """Drive a scripted pure-pursuit controller and record labeled frames.

    Writes PGM frames under ``out_dir/frames`` and a manifest CSV with paths
    relative to ``out_dir``, so the output is byte-identical per seed. Returns
    the records with both the file path and the simulator state filled in.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    sim_cfg = sim_cfg or SimConfig()
    render_cfg = render_cfg or RenderConfig()
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    reset_rng = np.random.default_rng(seed)

    records: list[EvalRecord] = []
    state = reset(track, sim_cfg, seed=int(reset_rng.integers(0, 2**63 - 1)))
    for i in range(n):
        frame = render(track, state, render_cfg)
        angle = pure_pursuit_angle(track, state, lookahead)
        frame_id = f"drive_{i:06d}"
        rel_path = f"frames/{frame_id}.pgm"
        write_pgm(frame, out_dir / rel_path)
        records.append(
            EvalRecord(frame_id=frame_id, angle_degrees=angle, frame_path=str(out_dir / rel_path), sim_state=state)
        )
        action = _controller_action(angle, state.speed, target_speed)
        state, _, _, done = step(state, action, track, sim_cfg)
        if done:
            state = reset(track, sim_cfg, seed=int(reset_rng.integers(0, 2**63 - 1)))
    write_manifest(records, out_dir / "manifest.csv", relative_to=out_dir)
    return records


def write_manifest(records: Sequence[EvalRecord], path: str | Path, relative_to: str | Path | None = None) -> None:
    """Write the manifest CSV; frame paths become relative to ``relative_to`` when given."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(",".join(MANIFEST_COLUMNS) + "\n")
        for record in records:
            if record.frame_path is None:
                raise ValueError(f"record {record.frame_id!r} has no frame path to write")
            frame_path = record.frame_path
            if relative_to is not None:
                frame_path = str(Path(frame_path).relative_to(relative_to))
            handle.write(f"{record.frame_id},{record.angle_degrees!r},{frame_path}\n")


def read_manifest(path: str | Path) -> list[EvalRecord]:
    """Read a manifest CSV; frame paths resolve relative to the manifest's directory."""
    path = Path(path)
    base = path.parent
    records: list[EvalRecord] = []
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty manifest") from None
        if tuple(header) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(MANIFEST_COLUMNS)}, got {','.join(header)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}: line {line_no}: expected 3 fields, got {len(row)}")
            frame_id, angle_text, frame_path = row
            try:
                angle = float(angle_text)
            except ValueError:
                raise ValueError(f"{path}: line {line_no}: angle_degrees is not a number: {angle_text!r}") from None
            if not math.isfinite(angle):
                raise ValueError(f"{path}: line {line_no}: angle_degrees must be finite")
            resolved = frame_path if Path(frame_path).is_absolute() else str(base / frame_path)
            records.append(EvalRecord(frame_id=frame_id, angle_degrees=angle, frame_path=resolved))
    if not records:
        raise ValueError(f"{path}: empty manifest")
    return records


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    """Machine-readable report: metric,value rows plus the confusion counts."""
    names = [c.name.lower() for c in SteeringClass]
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        handle.write("metric,value\n")
        handle.write(f"n_records,{report.n_records}\n")
        handle.write(f"n_correct,{report.n_correct}\n")
        handle.write(f"n_skipped,{report.n_skipped}\n")
        handle.write(f"accuracy,{report.accuracy!r}\n")
        for i, true_name in enumerate(names):
            for j, pred_name in enumerate(names):
                handle.write(f"confusion_{true_name}_{pred_name},{int(report.confusion[i, j])}\n")
