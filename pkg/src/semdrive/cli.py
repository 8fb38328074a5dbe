"""Command-line entry point: train, eval, gen-dataset, report.

Exit codes: 0 on success, 1 on runtime failure, 2 on invalid input or
configuration. The SEMDRIVE_LOG environment variable (error|info|debug)
controls log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from .evaluate import evaluate, generate_eval_manifest, read_manifest, write_report_csv
from .network import load_checkpoint
from .render import RenderConfig
from .sim import RewardParams, SimConfig, load_track
from .trainer import OptimizerConfig, TrainerConfig, WorkerError, train

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2

_CONFIG_SECTIONS = {
    "trainer": TrainerConfig,
    "optimizer": OptimizerConfig,
    "sim": SimConfig,
    "render": RenderConfig,
    "reward": RewardParams,
}
_TOP_LEVEL_KEYS = {"track", "out", "seed", "checkpoint_every"} | set(_CONFIG_SECTIONS)


@dataclasses.dataclass
class RunConfig:
    """Everything a training run needs, assembled from the config file plus overrides."""

    track_path: Path
    out_dir: Path
    trainer: TrainerConfig
    optimizer: OptimizerConfig
    sim: SimConfig
    render: RenderConfig
    reward: RewardParams
    checkpoint_every: int = 500

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "track": str(self.track_path),
            "out": str(self.out_dir),
            "seed": self.trainer.seed,
            "checkpoint_every": self.checkpoint_every,
            "trainer": dataclasses.asdict(self.trainer),
            "optimizer": dataclasses.asdict(self.optimizer),
            "sim": dataclasses.asdict(self.sim),
            "render": dataclasses.asdict(self.render),
            "reward": dataclasses.asdict(self.reward),
        }


def _build_section(name: str, cls: type, data: dict[str, Any]) -> Any:
    if not isinstance(data, dict):
        raise ValueError(f"config section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ValueError(f"config field {name}.{key} is unknown")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ValueError(f"config section {name!r}: {exc}") from exc


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    raw: dict[str, Any] = {}
    if args.config is not None:
        config_path = Path(args.config)
        if not config_path.is_file():
            raise ValueError(f"config file not found: {config_path}")
        try:
            raw = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{config_path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ValueError(f"{config_path}: top-level config must be an object")
        unknown = set(raw) - _TOP_LEVEL_KEYS
        if unknown:
            raise ValueError(f"{config_path}: unknown config key {sorted(unknown)[0]!r}")

    sections = {name: dict(raw.get(name, {})) for name in _CONFIG_SECTIONS}
    if "seed" in raw:
        sections["trainer"].setdefault("seed", raw["seed"])
    if args.seed is not None:
        sections["trainer"]["seed"] = args.seed
    if args.workers is not None:
        sections["trainer"]["n_workers"] = args.workers
    if args.total_steps is not None:
        sections["trainer"]["total_steps"] = args.total_steps
    if "total_steps" not in sections["trainer"]:
        raise ValueError("config field trainer.total_steps is required (or pass --total-steps)")

    track = args.track if args.track is not None else raw.get("track")
    if track is None:
        raise ValueError("a track file is required (config key 'track' or --track)")
    track_path = Path(track)
    if not track_path.is_file():
        raise ValueError(f"track file not found: {track_path}")
    out = args.out if args.out is not None else raw.get("out")
    if out is None:
        raise ValueError("an output directory is required (config key 'out' or --out)")

    checkpoint_every = raw.get("checkpoint_every", 500)
    if not (isinstance(checkpoint_every, int) and not isinstance(checkpoint_every, bool) and checkpoint_every >= 0):
        raise ValueError(f"config field checkpoint_every must be an integer >= 0, got {checkpoint_every!r}")

    built = {name: _build_section(name, cls, sections[name]) for name, cls in _CONFIG_SECTIONS.items()}
    return RunConfig(
        track_path=track_path,
        out_dir=Path(out),
        trainer=built["trainer"],
        optimizer=built["optimizer"],
        sim=built["sim"],
        render=built["render"],
        reward=built["reward"],
        checkpoint_every=checkpoint_every,
    )


def cmd_train(args: argparse.Namespace) -> int:
    try:
        run = _load_run_config(args)
        track = load_track(run.track_path)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        run.out_dir.mkdir(parents=True, exist_ok=True)
        (run.out_dir / "config.json").write_text(
            json.dumps(run.to_json_dict(), indent=2) + "\n", encoding="utf-8"
        )
        report = train(
            run.trainer,
            track,
            run.sim,
            run.render,
            run.reward,
            run.optimizer,
            metrics_path=run.out_dir / "metrics.csv",
            checkpoint_path=run.out_dir / "checkpoint_final.json",
            checkpoint_every=run.checkpoint_every,
        )
    except WorkerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(
        f"trained {report.env_steps} env steps, {len(report.records)} episodes, "
        f"{report.applied_updates} updates ({report.skipped_updates} skipped); "
        f"outputs in {run.out_dir}"
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        params = load_checkpoint(args.checkpoint)
        manifest = read_manifest(args.manifest)
        render_cfg = RenderConfig(resolution=args.resolution)
        if (params.arch.in_height, params.arch.in_width) != (render_cfg.resolution, render_cfg.resolution):
            raise ValueError(
                f"checkpoint expects {params.arch.in_height}x{params.arch.in_width} frames "
                f"but the evaluation resolution is {render_cfg.resolution}"
            )
        report = evaluate(params, manifest, render_cfg)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(report.format_table())
    out_path = Path(args.out) if args.out else Path(args.manifest).with_name("eval_report.csv")
    try:
        write_report_csv(report, out_path)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"report written to {out_path}")
    return EXIT_OK


def cmd_gen_dataset(args: argparse.Namespace) -> int:
    try:
        track = load_track(args.track)
        render_cfg = RenderConfig(resolution=args.resolution)
        if args.n < 1:
            raise ValueError(f"--n must be >= 1, got {args.n}")
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        records = generate_eval_manifest(track, args.n, args.seed, args.out, render_cfg=render_cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {len(records)} frames and manifest.csv to {args.out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    path = Path(args.metrics)
    if not path.is_file():
        print(f"error: metrics file not found: {path}", file=sys.stderr)
        return EXIT_INVALID
    rewards: list[float] = []
    entropies: list[float] = []
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            print(f"error: {path}: empty metrics file", file=sys.stderr)
            return EXIT_INVALID
        try:
            reward_col = header.index("total_reward")
            entropy_col = header.index("entropy")
        except ValueError:
            print(f"error: {path}: header must contain total_reward and entropy", file=sys.stderr)
            return EXIT_INVALID
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rewards.append(float(row[reward_col]))
                entropies.append(float(row[entropy_col]))
            except (ValueError, IndexError):
                print(f"error: {path}: line {line_no}: malformed row", file=sys.stderr)
                return EXIT_INVALID
    if not rewards:
        print(f"error: {path}: no episode rows", file=sys.stderr)
        return EXIT_INVALID

    lines = ["window,episodes,reward_mean,reward_min,reward_max,entropy_mean,entropy_min,entropy_max"]
    for w, start in enumerate(range(0, len(rewards), args.window)):
        r = rewards[start : start + args.window]
        e = entropies[start : start + args.window]
        lines.append(
            f"{w},{len(r)},{sum(r) / len(r)!r},{min(r)!r},{max(r)!r},"
            f"{sum(e) / len(e)!r},{min(e)!r},{max(e)!r}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"summary written to {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semdrive", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run asynchronous actor-critic training")
    p_train.add_argument("--config", help="JSON config file")
    p_train.add_argument("--track", help="track JSON file (overrides config)")
    p_train.add_argument("--out", help="output directory (overrides config)")
    p_train.add_argument("--workers", type=int, help="number of worker threads")
    p_train.add_argument("--seed", type=int, help="root random seed")
    p_train.add_argument("--total-steps", type=int, dest="total_steps", help="global env-step budget")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint against a labeled manifest")
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint JSON file")
    p_eval.add_argument("--manifest", required=True, help="manifest CSV file")
    p_eval.add_argument("--out", help="report CSV path (default: next to the manifest)")
    p_eval.add_argument("--resolution", type=int, default=64, help="frame resolution")
    p_eval.set_defaults(func=cmd_eval)

    p_gen = sub.add_parser("gen-dataset", help="drive the scripted controller and record a dataset")
    p_gen.add_argument("--track", required=True, help="track JSON file")
    p_gen.add_argument("--n", type=int, required=True, help="number of frames")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--resolution", type=int, default=64)
    p_gen.set_defaults(func=cmd_gen_dataset)

    p_report = sub.add_parser("report", help="summarize a metrics CSV into reward/entropy windows")
    p_report.add_argument("--metrics", required=True, help="metrics CSV from train")
    p_report.add_argument("--out", help="summary CSV path (default: stdout)")
    p_report.add_argument("--window", type=int, default=100, help="episodes per window")
    p_report.set_defaults(func=cmd_report)
    return parser


def _configure_logging() -> None:
    level_name = os.environ.get("SEMDRIVE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level_name, logging.ERROR),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
