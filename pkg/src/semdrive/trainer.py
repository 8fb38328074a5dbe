"""Asynchronous advantage actor-critic training.

Several worker threads interact with private copies of the environment,
compute gradients against a snapshot of the shared network, and apply
RMSProp updates (with shared second-moment statistics) straight to the
global store, tolerating staleness. Published parameter arrays are never
mutated in place, so a snapshot is always internally consistent.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np
from threadpoolctl import threadpool_limits

from .network import (
    Architecture,
    DEFAULT_ARCHITECTURE,
    Gradients,
    LossStats,
    NetworkParams,
    RolloutBatch,
    forward,
    init_params,
    loss_and_grad,
    save_checkpoint,
)
from .render import FrameStack, RenderConfig, push_frame, render
from .sim import (
    Action,
    N_ACTIONS,
    RewardParams,
    SimConfig,
    TrackSpec,
    VehicleState,
    compute_reward,
    reset,
    step,
)

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("episode", "worker", "steps", "total_reward",
                   "policy_loss", "value_loss", "entropy", "wall_ms")


@dataclass(frozen=True)
class OptimizerConfig:
    """RMSProp settings shared by all workers."""

    learning_rate: float = 0.01
    decay: float = 0.9
    epsilon: float = 0.1

    def __post_init__(self) -> None:
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError(f"optimizer.learning_rate must be > 0, got {self.learning_rate!r}")
        if not (0.0 < self.decay < 1.0):
            raise ValueError(f"optimizer.decay must be in (0, 1), got {self.decay!r}")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError(f"optimizer.epsilon must be > 0, got {self.epsilon!r}")


@dataclass
class OptimizerState:
    """Per-parameter running average of squared gradients, shape-congruent with the network."""

    squares: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "OptimizerState":
        return cls(squares={name: np.zeros_like(arr) for name, arr in params.layers.items()})


@dataclass(frozen=True)
class TrainerConfig:
    """Worker count, rollout segmentation, and the global step budget."""

    total_steps: int
    n_workers: int = 12
    t_max: int = 5
    discount: float = 0.99
    seed: int = 0

    def __post_init__(self) -> None:
        if not (isinstance(self.total_steps, int) and self.total_steps >= 0):
            raise ValueError(f"trainer.total_steps must be an integer >= 0, got {self.total_steps!r}")
        if not (isinstance(self.n_workers, int) and self.n_workers >= 1):
            raise ValueError(f"trainer.n_workers must be an integer >= 1, got {self.n_workers!r}")
        if not (isinstance(self.t_max, int) and self.t_max >= 1):
            raise ValueError(f"trainer.t_max must be an integer >= 1, got {self.t_max!r}")
        if not (0.0 < self.discount <= 1.0):
            raise ValueError(f"trainer.discount must be in (0, 1], got {self.discount!r}")
        if not isinstance(self.seed, int):
            raise ValueError(f"trainer.seed must be an integer, got {self.seed!r}")


def n_step_returns(rewards: Sequence[float], bootstrap: float, discount: float) -> list[float]:
    """Discounted returns over a rollout segment, seeded by the bootstrap value.

    R_t = r_t + discount * R_{t+1}, with R_T = bootstrap; oldest first.
    """
    if len(rewards) == 0:
        raise ValueError("rewards must be non-empty")
    acc = float(bootstrap)
    out = [0.0] * len(rewards)
    for t in range(len(rewards) - 1, -1, -1):
        acc = float(rewards[t]) + discount * acc
        out[t] = acc
    return out


def advantages(returns: Sequence[float], values: Sequence[float]) -> list[float]:
    """Elementwise return minus value estimate."""
    if len(returns) != len(values):
        raise ValueError(f"returns ({len(returns)}) and values ({len(values)}) differ in length")
    return [float(r) - float(v) for r, v in zip(returns, values)]


def clip_gradients(grads: Gradients, max_norm: float) -> Gradients:
    """Scale all gradients so the global L2 norm does not exceed max_norm."""
    total = 0.0
    for arr in grads.values():
        flat = arr.ravel()
        total += float(np.dot(flat, flat))
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = np.float32(max_norm / norm)
    return {name: arr * scale for name, arr in grads.items()}


def rmsprop_step(
    squares: np.ndarray,
    theta: np.ndarray,
    grad: np.ndarray,
    cfg: OptimizerConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """One RMSProp update on a single array, preserving its dtype.

    s' = decay * s + (1 - decay) * g^2;  theta' = theta - lr * g / sqrt(s' + eps).
    """
    new_squares = cfg.decay * squares + (1.0 - cfg.decay) * grad * grad
    new_theta = theta - cfg.learning_rate * grad / np.sqrt(new_squares + cfg.epsilon)
    return new_squares, new_theta


def rmsprop_apply(
    opt: OptimizerState,
    params: NetworkParams,
    grads: Gradients,
    cfg: OptimizerConfig,
) -> tuple[OptimizerState, NetworkParams]:
    """Apply RMSProp across all layers, returning fresh state and parameters.

    If any gradient is non-finite the whole update is skipped (the inputs are
    returned unchanged) and the event is logged; this keeps the store free of
    non-finite values.
    """
    for name, theta in params.layers.items():
        grad = grads.get(name)
        if grad is None or grad.shape != theta.shape:
            raise ValueError(
                f"gradient for {name} has shape {None if grad is None else grad.shape}, "
                f"expected {theta.shape}"
            )
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            logger.warning("skipping update: non-finite gradient in %s", name)
            return opt, params
    new_squares: dict[str, np.ndarray] = {}
    new_layers: dict[str, np.ndarray] = {}
    for name, theta in params.layers.items():
        new_squares[name], new_layers[name] = rmsprop_step(opt.squares[name], theta, grads[name], cfg)
    return OptimizerState(squares=new_squares), NetworkParams(arch=params.arch, layers=new_layers)


class ParamStore:
    """Shared global network and optimizer statistics.

    Snapshots copy only the layer dict (arrays are immutable once published)
    and updates swap whole arrays under a lock, so a reader never observes a
    partially updated layer.
    """

    def __init__(self, params: NetworkParams, opt_cfg: OptimizerConfig) -> None:
        params.validate()
        self._params = params
        self._opt = OptimizerState.zeros_like(params)
        self._opt_cfg = opt_cfg
        self._lock = threading.Lock()
        self.applied_updates = 0
        self.skipped_updates = 0

    def snapshot(self) -> NetworkParams:
        with self._lock:
            return NetworkParams(arch=self._params.arch, layers=dict(self._params.layers))

    def apply(self, grads: Gradients) -> bool:
        """Apply one update; returns False if it was skipped on a non-finite gradient."""
        with self._lock:
            new_opt, new_params = rmsprop_apply(self._opt, self._params, grads, self._opt_cfg)
            if new_params is self._params:
                self.skipped_updates += 1
                return False
            self._opt = new_opt
            self._params = new_params
            self.applied_updates += 1
            return True


class DrivingEnv:
    """One worker's private simulator + renderer, holding the current frame stack."""

    def __init__(
        self,
        track: TrackSpec,
        sim_cfg: SimConfig,
        render_cfg: RenderConfig,
        reward_params: RewardParams,
        seed: int | np.random.SeedSequence = 0,
    ) -> None:
        self.track = track
        self.sim_cfg = sim_cfg
        self.render_cfg = render_cfg
        self.reward_params = reward_params
        self._reset_rng = np.random.default_rng(seed)
        self.state: VehicleState | None = None
        self.stack: FrameStack | None = None

    def reset(self) -> FrameStack:
        """Start a new episode at a jittered start drawn from the env's seed stream."""
        seed = int(self._reset_rng.integers(0, 2**63 - 1))
        self.state = reset(self.track, self.sim_cfg, seed=seed)
        frame = render(self.track, self.state, self.render_cfg)
        self.stack = FrameStack.initial(frame)
        return self.stack

    def step(self, action: Action) -> tuple[FrameStack, float, bool]:
        if self.state is None or self.stack is None:
            raise RuntimeError("environment must be reset before stepping")
        next_state, rel, collided, done = step(self.state, action, self.track, self.sim_cfg)
        reward = compute_reward(next_state.speed, rel.alpha, rel.dist_center, collided, self.reward_params)
        frame = render(self.track, next_state, self.render_cfg)
        self.state = next_state
        self.stack = push_frame(self.stack, frame)
        return self.stack, reward, done


@dataclass
class RolloutBuffer:
    """One worker's rollout segment: trajectories plus the bootstrap value."""

    stacks: list[np.ndarray] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    policy_probs: list[float] = field(default_factory=list)
    terminal: bool = False
    bootstrap_value: float = 0.0

    def __len__(self) -> int:
        return len(self.rewards)


def _sample_action(policy: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(policy)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, len(policy) - 1)


def collect_rollout(
    env: DrivingEnv,
    params: NetworkParams,
    t_max: int,
    rng: np.random.Generator,
    greedy: bool = False,
) -> RolloutBuffer:
    """Run up to t_max environment steps sampling actions from the policy.

    Stops early at episode end (terminal, bootstrap 0); otherwise bootstraps
    with the snapshot's value of the state after the last step. With
    ``greedy`` the action is the policy argmax instead of a sample.
    """
    if env.stack is None:
        raise RuntimeError("environment must be reset before collecting")
    buf = RolloutBuffer()
    for _ in range(t_max):
        stack_arr = env.stack.as_array()
        out = forward(params, stack_arr)
        if greedy:
            action = int(np.argmax(out.policy))
        else:
            action = _sample_action(out.policy, rng)
        _, reward, done = env.step(Action(action))
        buf.stacks.append(stack_arr)
        buf.actions.append(action)
        buf.rewards.append(reward)
        buf.values.append(out.value)
        buf.policy_probs.append(float(out.policy[action]))
        if done:
            buf.terminal = True
            buf.bootstrap_value = 0.0
            return buf
    buf.bootstrap_value = forward(params, env.stack.as_array()).value
    return buf


@dataclass(frozen=True)
class EpisodeRecord:
    """One finished episode, as written to the metrics CSV."""

    episode: int
    worker: int
    steps: int
    total_reward: float
    policy_loss: float
    value_loss: float
    entropy: float
    wall_ms: float


@dataclass
class TrainingReport:
    """Everything train() produces: episode rows, final parameters, counters."""

    records: list[EpisodeRecord]
    final_params: NetworkParams
    env_steps: int
    applied_updates: int
    skipped_updates: int


class WorkerError(RuntimeError):
    """A worker thread failed; carries the worker id."""

    def __init__(self, worker: int, cause: BaseException) -> None:
        super().__init__(f"worker {worker} failed: {cause!r}")
        self.worker = worker
        self.cause = cause


class _StepBudget:
    """Global environment-step budget shared by the workers."""

    def __init__(self, total: int) -> None:
        self._remaining = total
        self._lock = threading.Lock()
        self.consumed = 0

    def reserve(self, n: int) -> int:
        with self._lock:
            take = min(n, self._remaining)
            self._remaining -= take
            self.consumed += take
            return take

    def give_back(self, n: int) -> None:
        if n <= 0:
            return
        with self._lock:
            self._remaining += n
            self.consumed -= n


class _MetricsWriter:
    """Episode rows, flushed as they arrive; safe to call from any worker."""

    def __init__(self, handle: TextIO | None) -> None:
        self._handle = handle
        self._lock = threading.Lock()
        if handle is not None:
            handle.write(",".join(METRICS_COLUMNS) + "\n")
            handle.flush()

    def write(self, record: EpisodeRecord) -> None:
        if self._handle is None:
            return
        row = (
            f"{record.episode},{record.worker},{record.steps},{record.total_reward!r},"
            f"{record.policy_loss!r},{record.value_loss!r},{record.entropy!r},{record.wall_ms!r}\n"
        )
        with self._lock:
            self._handle.write(row)
            self._handle.flush()


@dataclass
class _EpisodeAccumulator:
    reward: float = 0.0
    steps: int = 0
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    updates: int = 0
    started: float = 0.0

    def add_rollout(self, rewards: Sequence[float], stats: LossStats) -> None:
        self.reward += float(sum(rewards))
        self.steps += len(rewards)
        self.policy_loss += stats.policy_loss
        self.value_loss += stats.value_loss
        self.entropy += stats.entropy
        self.updates += 1

    def to_record(self, episode: int, worker: int) -> EpisodeRecord:
        n = max(self.updates, 1)
        return EpisodeRecord(
            episode=episode,
            worker=worker,
            steps=self.steps,
            total_reward=self.reward,
            policy_loss=self.policy_loss / n,
            value_loss=self.value_loss / n,
            entropy=self.entropy / n,
            wall_ms=(time.perf_counter() - self.started) * 1000.0,
        )


def _worker_loop(
    worker_id: int,
    env: DrivingEnv,
    rng: np.random.Generator,
    store: ParamStore,
    budget: _StepBudget,
    cfg: TrainerConfig,
    stop: threading.Event,
    records: list[EpisodeRecord],
    records_lock: threading.Lock,
    writer: _MetricsWriter,
    c_value: float,
    c_entropy: float,
    grad_clip: float,
    on_episode: Callable[[int], None] | None,
) -> None:
    env.reset()
    acc = _EpisodeAccumulator(started=time.perf_counter())
    episode = 0
    while not stop.is_set():
        quota = budget.reserve(cfg.t_max)
        if quota == 0:
            break
        snapshot = store.snapshot()
        buf = collect_rollout(env, snapshot, quota, rng)
        budget.give_back(quota - len(buf))
        returns = n_step_returns(buf.rewards, buf.bootstrap_value, cfg.discount)
        advs = advantages(returns, buf.values)
        batch = RolloutBatch(
            stacks=np.stack(buf.stacks),
            actions=np.asarray(buf.actions, dtype=np.int64),
            returns=np.asarray(returns, dtype=np.float64),
            advantages=np.asarray(advs, dtype=np.float64),
        )
        _, grads, stats = loss_and_grad(snapshot, batch, c_value=c_value, c_entropy=c_entropy)
        grads = clip_gradients(grads, grad_clip)
        store.apply(grads)
        acc.add_rollout(buf.rewards, stats)
        if buf.terminal:
            record = acc.to_record(episode, worker_id)
            with records_lock:
                records.append(record)
                finished = len(records)
            writer.write(record)
            if on_episode is not None:
                on_episode(finished)
            episode += 1
            env.reset()
            acc = _EpisodeAccumulator(started=time.perf_counter())


def train(
    cfg: TrainerConfig,
    track: TrackSpec,
    sim_cfg: SimConfig,
    render_cfg: RenderConfig,
    reward_params: RewardParams,
    opt_cfg: OptimizerConfig,
    *,
    arch: Architecture = DEFAULT_ARCHITECTURE,
    c_value: float = 0.5,
    c_entropy: float = 0.01,
    grad_clip: float = 40.0,
    metrics_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
) -> TrainingReport:
    """Run asynchronous training until the global step budget is consumed.

    Each worker loops: snapshot the global network, collect a rollout with it,
    compute n-step returns and advantages, take gradients on the snapshot, and
    apply them to the global store. Bit-reproducible for a fixed seed when
    n_workers == 1 (wall-clock columns aside). A worker failure aborts the run
    with a WorkerError identifying the worker.

    With ``checkpoint_every`` > 0 (and a ``checkpoint_path``), a snapshot is
    also written every that many finished episodes, alongside the final one.
    """
    root = np.random.SeedSequence(cfg.seed)
    children = root.spawn(cfg.n_workers + 1)
    params = init_params(int(children[-1].generate_state(1)[0]), arch)
    store = ParamStore(params, opt_cfg)
    budget = _StepBudget(cfg.total_steps)
    stop = threading.Event()
    records: list[EpisodeRecord] = []
    records_lock = threading.Lock()
    errors: dict[int, BaseException] = {}

    on_episode: Callable[[int], None] | None = None
    if checkpoint_path is not None and checkpoint_every > 0:
        checkpoint_path_ = Path(checkpoint_path)

        def on_episode(finished: int) -> None:
            if finished % checkpoint_every == 0:
                periodic = checkpoint_path_.with_name(
                    f"{checkpoint_path_.stem}_ep{finished:06d}{checkpoint_path_.suffix}"
                )
                save_checkpoint(store.snapshot(), periodic)

    handle = open(metrics_path, "w", encoding="utf-8", newline="") if metrics_path else None
    try:
        writer = _MetricsWriter(handle)
        threads: list[threading.Thread] = []
        for worker_id in range(cfg.n_workers):
            env_seq, action_seq = children[worker_id].spawn(2)
            env = DrivingEnv(track, sim_cfg, render_cfg, reward_params, seed=env_seq)
            rng = np.random.default_rng(action_seq)

            def run(worker_id: int = worker_id, env: DrivingEnv = env, rng: np.random.Generator = rng) -> None:
                try:
                    _worker_loop(worker_id, env, rng, store, budget, cfg, stop,
                                 records, records_lock, writer, c_value, c_entropy, grad_clip,
                                 on_episode)
                except BaseException as exc:  # surfaced as WorkerError below
                    errors[worker_id] = exc
                    stop.set()

            thread = threading.Thread(target=run, name=f"semdrive-worker-{worker_id}")
            threads.append(thread)
        # Worker threads already saturate the cores with many small matmuls;
        # BLAS-internal threading on top of that only adds contention.
        with threadpool_limits(limits=1):
            for thread in threads:
                thread.start()
            for thread in threads:
                thread.join()
    finally:
        if handle is not None:
            handle.close()

    if errors:
        worker_id = min(errors)
        raise WorkerError(worker_id, errors[worker_id]) from errors[worker_id]

    final_params = store.snapshot()
    if checkpoint_path is not None:
        save_checkpoint(final_params, checkpoint_path)
    return TrainingReport(
        records=records,
        final_params=final_params,
        env_steps=budget.consumed,
        applied_updates=store.applied_updates,
        skipped_updates=store.skipped_updates,
    )


def measure_random_baseline(
    track: TrackSpec,
    sim_cfg: SimConfig,
    reward_params: RewardParams,
    episodes: int,
    seed: int = 0,
) -> float:
    """Mean episode reward of a uniform-random policy (no rendering, no network)."""
    rng = np.random.default_rng(seed)
    reset_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    total = 0.0
    for _ in range(episodes):
        state = reset(track, sim_cfg, seed=int(reset_rng.integers(0, 2**63 - 1)))
        done = False
        while not done:
            action = Action(int(rng.integers(0, N_ACTIONS)))
            state, rel, collided, done = step(state, action, track, sim_cfg)
            total += compute_reward(state.speed, rel.alpha, rel.dist_center, collided, reward_params)
    return total / episodes
