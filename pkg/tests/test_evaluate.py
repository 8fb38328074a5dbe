import math

import numpy as np
import pytest

from semdrive.evaluate import (
    EvalRecord,
    SteeringClass,
    angle_to_class,
    collapse_action,
    evaluate,
    generate_eval_manifest,
    predict,
    pure_pursuit_angle,
    read_manifest,
    write_report_csv,
)
from semdrive.network import init_params, reduced_architecture
from semdrive.render import RenderConfig
from semdrive.sim import Action, TrackSpec, VehicleState, oval_track

SMALL_ARCH = reduced_architecture()
SMALL_RENDER = RenderConfig(resolution=8)
STRAIGHT = TrackSpec(centerline=((0.0, 0.0), (2000.0, 0.0)), width=8.0)


def class_action(steering_class):
    """Coast action for a steering class (collapses back to the same class)."""
    return {
        SteeringClass.STRAIGHT: Action.STRAIGHT,
        SteeringClass.LEFT: Action.LEFT,
        SteeringClass.RIGHT: Action.RIGHT,
    }[steering_class]


def state_record(i, angle, prefix=None):
    """Synthetic record backed by a simulator state on the straight track."""
    prefix = prefix or f"rec{i}"
    state = VehicleState(position=(float(10 + i % 50), 0.0), heading=0.0, speed=0.0)
    return EvalRecord(frame_id=f"{prefix}_{i:06d}", angle_degrees=angle, sim_state=state)


class TestAngleToClass:
    def test_dataset_style_angles(self):
        assert angle_to_class(45.18) == SteeringClass.RIGHT
        assert angle_to_class(-95.7) == SteeringClass.LEFT
        assert angle_to_class(-12.4) == SteeringClass.STRAIGHT
        assert angle_to_class(-8.97) == SteeringClass.STRAIGHT

    def test_closed_interval_boundaries(self):
        assert angle_to_class(-15.0) == SteeringClass.STRAIGHT
        assert angle_to_class(15.0) == SteeringClass.STRAIGHT
        assert angle_to_class(0.0) == SteeringClass.STRAIGHT
        assert angle_to_class(math.nextafter(15.0, 16.0)) == SteeringClass.RIGHT
        assert angle_to_class(math.nextafter(-15.0, -16.0)) == SteeringClass.LEFT

    def test_piecewise_scan(self):
        for k in range(-1800, 1801):
            angle = k / 10.0
            want = (
                SteeringClass.LEFT if angle < -15.0
                else SteeringClass.RIGHT if angle > 15.0
                else SteeringClass.STRAIGHT
            )
            assert angle_to_class(angle) == want

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="finite"):
            angle_to_class(math.nan)
        with pytest.raises(ValueError, match="finite"):
            angle_to_class(math.inf)


class TestCollapseAction:
    def test_examples(self):
        assert collapse_action(Action.LEFT_ACCEL) == SteeringClass.LEFT
        assert collapse_action(Action.STRAIGHT) == SteeringClass.STRAIGHT
        assert collapse_action(Action.RIGHT_BRAKE) == SteeringClass.RIGHT

    def test_three_fold_partition(self):
        counts = {c: 0 for c in SteeringClass}
        for action in Action:
            counts[collapse_action(action)] += 1
        assert all(v == 3 for v in counts.values())


class TestPredict:
    def test_zero_network_tie_breaks_to_action_zero(self):
        params = init_params(0, SMALL_ARCH)
        for arr in params.layers.values():
            arr[...] = 0.0
        stack_arr = np.random.default_rng(0).random((4, 8, 8), dtype=np.float32)
        from semdrive.render import FrameStack, SemanticFrame
        frames = tuple(SemanticFrame(8, 8, stack_arr[i]) for i in range(4))
        assert predict(params, FrameStack(frames=frames)) == Action.STRAIGHT_ACCEL

    def test_unique_max_selected(self):
        params = init_params(0, SMALL_ARCH)
        for arr in params.layers.values():
            arr[...] = 0.0
        params.layers["policy.bias"][4] = 1.0
        from semdrive.render import FrameStack, SemanticFrame
        stack_arr = np.zeros((4, 8, 8), dtype=np.float32)
        frames = tuple(SemanticFrame(8, 8, stack_arr[i]) for i in range(4))
        assert predict(params, FrameStack(frames=frames)) == Action(4)

    def test_logit_scaling_preserves_argmax(self):
        from semdrive.network import forward
        params = init_params(3, SMALL_ARCH)
        scaled = params.copy()
        scaled.layers["policy.weight"] *= np.float32(4.0)
        scaled.layers["policy.bias"] *= np.float32(4.0)
        rng = np.random.default_rng(1)
        for _ in range(10):
            x = rng.random((4, 8, 8), dtype=np.float32)
            a = int(np.argmax(forward(params, x).policy))
            b = int(np.argmax(forward(scaled, x).policy))
            assert a == b

    def test_deterministic(self):
        params = init_params(2, SMALL_ARCH)
        from semdrive.render import FrameStack, SemanticFrame
        stack_arr = np.random.default_rng(4).random((4, 8, 8), dtype=np.float32)
        frames = tuple(SemanticFrame(8, 8, stack_arr[i]) for i in range(4))
        stack = FrameStack(frames=frames)
        assert predict(params, stack) == predict(params, stack)


class TestEvaluate:
    def test_oracle_policy_scores_perfectly(self, tmp_path):
        track = oval_track(total_length=120.0, corner_radius=15.0, points_per_arc=12)
        records = generate_eval_manifest(track, 60, seed=4, out_dir=tmp_path,
                                         render_cfg=SMALL_RENDER)

        def oracle(stack, record):
            return class_action(angle_to_class(pure_pursuit_angle(track, record.sim_state)))

        report = evaluate(None, records, SMALL_RENDER, track=track, predict_fn=oracle)
        assert report.accuracy == 1.0
        assert report.n_records == 60
        assert report.n_skipped == 0

    def test_constant_straight_on_straight_labels(self):
        records = [state_record(i, angle=0.0) for i in range(20)]
        report = evaluate(None, records, SMALL_RENDER, track=STRAIGHT,
                          predict_fn=lambda stack, rec: Action.STRAIGHT)
        assert report.accuracy == 1.0

    def test_uniform_random_on_balanced_manifest(self):
        angles = [-30.0, 0.0, 30.0]
        records = [state_record(i, angle=angles[i % 3]) for i in range(600)]
        rng = np.random.default_rng(8)
        report = evaluate(None, records, SMALL_RENDER, track=STRAIGHT,
                          predict_fn=lambda stack, rec: Action(int(rng.integers(0, 9))))
        assert abs(report.accuracy - 1.0 / 3.0) <= 0.06

    def test_confusion_sums_to_records(self):
        angles = [-30.0, 0.0, 30.0]
        records = [state_record(i, angle=angles[i % 3]) for i in range(30)]
        rng = np.random.default_rng(9)
        report = evaluate(None, records, SMALL_RENDER, track=STRAIGHT,
                          predict_fn=lambda stack, rec: Action(int(rng.integers(0, 9))))
        assert int(report.confusion.sum()) == report.n_records
        recomputed = int(np.trace(report.confusion))
        assert recomputed == report.n_correct
        assert report.accuracy == pytest.approx(report.n_correct / report.n_records)

    def test_corrupt_pgm_skipped_and_tallied(self, tmp_path):
        track = oval_track(total_length=120.0, corner_radius=15.0, points_per_arc=12)
        records = generate_eval_manifest(track, 10, seed=4, out_dir=tmp_path,
                                         render_cfg=SMALL_RENDER)
        # strip sim states so loading must go through the files
        records = [EvalRecord(r.frame_id, r.angle_degrees, frame_path=r.frame_path) for r in records]
        (tmp_path / "frames" / "drive_000004.pgm").write_bytes(b"garbage")
        report = evaluate(None, records, SMALL_RENDER,
                          predict_fn=lambda stack, rec: Action.STRAIGHT)
        assert report.n_records == 9
        assert report.n_skipped == 1
        assert int(report.confusion.sum()) == 9

    def test_empty_manifest_rejected(self):
        with pytest.raises(ValueError, match="empty manifest"):
            evaluate(None, [], SMALL_RENDER, predict_fn=lambda s, r: Action.STRAIGHT)

    def test_needs_params_or_predictor(self):
        with pytest.raises(ValueError, match="predict_fn"):
            evaluate(None, [state_record(0, 0.0)], SMALL_RENDER, track=STRAIGHT)

    def test_network_prediction_path(self, tmp_path):
        track = oval_track(total_length=120.0, corner_radius=15.0, points_per_arc=12)
        records = generate_eval_manifest(track, 8, seed=4, out_dir=tmp_path,
                                         render_cfg=SMALL_RENDER)
        params = init_params(0, SMALL_ARCH)
        report = evaluate(params, records, SMALL_RENDER)
        assert 0.0 <= report.accuracy <= 1.0
        assert report.n_records == 8


class TestWindowConstruction:
    def test_consecutive_frames_feed_the_stack(self, tmp_path):
        from semdrive.render import SemanticFrame, write_pgm

        # five frames with distinct constant levels: 0, 0.45, 0.9, 0.7, 0
        levels = [0.0, 0.45, 0.9, 0.7, 0.0]
        records = []
        for i, level in enumerate(levels):
            path = tmp_path / f"f{i}.pgm"
            write_pgm(SemanticFrame(8, 8, np.full((8, 8), level, dtype=np.float32)), path)
            records.append(EvalRecord(f"clip_{i:03d}", 0.0, frame_path=str(path)))
        seen = []

        def spy(stack, record):
            seen.append(stack.as_array().copy())
            return Action.STRAIGHT

        evaluate(None, records, SMALL_RENDER, predict_fn=spy)
        # record 0: its own frame replicated 4x
        assert [float(seen[0][k][0, 0]) for k in range(4)] == pytest.approx([0.0] * 4)
        # record 1: one predecessor, padded by replicating the oldest
        assert [float(seen[1][k][0, 0]) for k in range(4)] == pytest.approx([0.0, 0.0, 0.0, 0.45])
        # record 4: full window of the last four frames, oldest first
        assert [float(seen[4][k][0, 0]) for k in range(4)] == pytest.approx([0.45, 0.9, 0.7, 0.0])

    def test_prefix_change_resets_window(self):
        records = [
            state_record(0, 0.0, prefix="a"),
            state_record(1, 0.0, prefix="a"),
            state_record(2, 0.0, prefix="b"),
        ]
        stacks = []

        def spy(stack, record):
            stacks.append(stack.as_array().copy())
            return Action.STRAIGHT

        evaluate(None, records, SMALL_RENDER, track=STRAIGHT, predict_fn=spy)
        # record 2 has a different prefix: its window is its own frame replicated
        assert np.array_equal(stacks[2][0], stacks[2][3])


class TestGenerateManifest:
    def test_deterministic_per_seed(self, tmp_path):
        track = oval_track(total_length=120.0, corner_radius=15.0, points_per_arc=12)
        a_dir = tmp_path / "a"
        b_dir = tmp_path / "b"
        generate_eval_manifest(track, 12, seed=5, out_dir=a_dir, render_cfg=SMALL_RENDER)
        generate_eval_manifest(track, 12, seed=5, out_dir=b_dir, render_cfg=SMALL_RENDER)
        assert (a_dir / "manifest.csv").read_bytes() == (b_dir / "manifest.csv").read_bytes()
        for name in sorted(p.name for p in (a_dir / "frames").iterdir()):
            assert (a_dir / "frames" / name).read_bytes() == (b_dir / "frames" / name).read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        track = oval_track(total_length=120.0, corner_radius=15.0, points_per_arc=12)
        a = generate_eval_manifest(track, 12, seed=5, out_dir=tmp_path / "a", render_cfg=SMALL_RENDER)
        b = generate_eval_manifest(track, 12, seed=6, out_dir=tmp_path / "b", render_cfg=SMALL_RENDER)
        assert any(ra.angle_degrees != rb.angle_degrees for ra, rb in zip(a, b))

    def test_straight_track_labels_all_straight(self, tmp_path):
        records = generate_eval_manifest(STRAIGHT, 40, seed=3, out_dir=tmp_path,
                                         render_cfg=SMALL_RENDER)
        assert all(angle_to_class(r.angle_degrees) == SteeringClass.STRAIGHT for r in records)

    def test_left_only_loop_has_no_right_labels(self, tmp_path):
        # counter-clockwise oval: every curve bends left
        track = oval_track(total_length=120.0, corner_radius=15.0, points_per_arc=12)
        records = generate_eval_manifest(track, 300, seed=3, out_dir=tmp_path,
                                         render_cfg=SMALL_RENDER, target_speed=6.0)
        classes = {angle_to_class(r.angle_degrees) for r in records}
        assert SteeringClass.RIGHT not in classes
        # sanity: the generator's own steering trace shows left pressure somewhere
        assert min(r.angle_degrees for r in records) < 0.0

    def test_row_count_and_files(self, tmp_path):
        track = oval_track(total_length=120.0, corner_radius=15.0, points_per_arc=12)
        records = generate_eval_manifest(track, 17, seed=1, out_dir=tmp_path,
                                         render_cfg=SMALL_RENDER)
        assert len(records) == 17
        assert len(list((tmp_path / "frames").iterdir())) == 17
        lines = (tmp_path / "manifest.csv").read_text().strip().splitlines()
        assert len(lines) == 18  # header + rows

    def test_rejects_bad_n(self, tmp_path):
        with pytest.raises(ValueError, match="n must be"):
            generate_eval_manifest(STRAIGHT, 0, seed=1, out_dir=tmp_path)


class TestManifestIO:
    def test_round_trip(self, tmp_path):
        track = oval_track(total_length=120.0, corner_radius=15.0, points_per_arc=12)
        records = generate_eval_manifest(track, 5, seed=2, out_dir=tmp_path,
                                         render_cfg=SMALL_RENDER)
        loaded = read_manifest(tmp_path / "manifest.csv")
        assert [r.frame_id for r in loaded] == [r.frame_id for r in records]
        assert [r.angle_degrees for r in loaded] == [r.angle_degrees for r in records]
        # paths resolve relative to the manifest directory
        for r in loaded:
            assert (tmp_path / "frames" / f"{r.frame_id}.pgm").exists()

    def test_malformed_angle_reports_line(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("frame_id,angle_degrees,frame_path\nf_0,not_a_number,frames/x.pgm\n")
        with pytest.raises(ValueError, match="line 2"):
            read_manifest(path)

    def test_wrong_field_count_reports_line(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("frame_id,angle_degrees,frame_path\nf_0,1.0,frames/x.pgm\nf_1,2.0\n")
        with pytest.raises(ValueError, match="line 3"):
            read_manifest(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("id,angle,path\n")
        with pytest.raises(ValueError, match="header"):
            read_manifest(path)

    def test_empty_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("frame_id,angle_degrees,frame_path\n")
        with pytest.raises(ValueError, match="empty manifest"):
            read_manifest(path)

    def test_report_csv(self, tmp_path):
        records = [state_record(i, angle=0.0) for i in range(4)]
        report = evaluate(None, records, SMALL_RENDER, track=STRAIGHT,
                          predict_fn=lambda s, r: Action.STRAIGHT)
        out = tmp_path / "report.csv"
        write_report_csv(report, out)
        text = out.read_text()
        assert "accuracy,1.0" in text
        assert "confusion_straight_straight,4" in text
