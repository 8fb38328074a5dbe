"""Actor-critic network: forward pass, hand-derived backprop, loss construction.

The architecture is fixed (two valid convolutions, a dense trunk, and policy
and value heads sharing that trunk), so gradients are derived by hand rather
than through an autodiff engine. Parameters use 32-bit float storage; the
softmax, entropy, and loss bookkeeping run in float64 so probability
invariants hold tightly.
"""

from __future__ import annotations

import json
import math
import os
import re
import tempfile
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .render import FrameStack

Gradients = dict[str, np.ndarray]

LAYER_NAMES = (
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "fc.weight",
    "fc.bias",
    "policy.weight",
    "policy.bias",
    "value.weight",
    "value.bias",
)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    """Shape parameters of the network: conv -> conv -> dense trunk -> two heads."""

    in_channels: int = 4
    in_height: int = 64
    in_width: int = 64
    conv1_filters: int = 16
    conv1_kernel: int = 8
    conv1_stride: int = 4
    conv2_filters: int = 32
    conv2_kernel: int = 4
    conv2_stride: int = 2
    fc_units: int = 256
    n_actions: int = 9

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if not (isinstance(value, int) and value >= 1):
                raise ValueError(f"architecture field {name} must be a positive integer, got {value!r}")
        if self.conv1_kernel > min(self.in_height, self.in_width):
            raise ValueError("conv1 kernel larger than the input")
        if self.conv2_kernel > min(self.conv1_out_hw):
            raise ValueError("conv2 kernel larger than the conv1 output")

    @property
    def conv1_out_hw(self) -> tuple[int, int]:
        return (
            (self.in_height - self.conv1_kernel) // self.conv1_stride + 1,
            (self.in_width - self.conv1_kernel) // self.conv1_stride + 1,
        )

    @property
    def conv2_out_hw(self) -> tuple[int, int]:
        h1, w1 = self.conv1_out_hw
        return (
            (h1 - self.conv2_kernel) // self.conv2_stride + 1,
            (w1 - self.conv2_kernel) // self.conv2_stride + 1,
        )

    @property
    def flat_features(self) -> int:
        h2, w2 = self.conv2_out_hw
        return self.conv2_filters * h2 * w2

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "conv1.weight": (self.conv1_filters, self.in_channels, self.conv1_kernel, self.conv1_kernel),
            "conv1.bias": (self.conv1_filters,),
            "conv2.weight": (self.conv2_filters, self.conv1_filters, self.conv2_kernel, self.conv2_kernel),
            "conv2.bias": (self.conv2_filters,),
            "fc.weight": (self.fc_units, self.flat_features),
            "fc.bias": (self.fc_units,),
            "policy.weight": (self.n_actions, self.fc_units),
            "policy.bias": (self.n_actions,),
            "value.weight": (1, self.fc_units),
            "value.bias": (1,),
        }

    def arch_id(self) -> str:
        return (
            f"in{self.in_channels}x{self.in_height}x{self.in_width}"
            f"-conv{self.conv1_filters}k{self.conv1_kernel}s{self.conv1_stride}"
            f"-conv{self.conv2_filters}k{self.conv2_kernel}s{self.conv2_stride}"
            f"-fc{self.fc_units}-out{self.n_actions}"
        )


_ARCH_ID_RE = re.compile(
    r"^in(\d+)x(\d+)x(\d+)-conv(\d+)k(\d+)s(\d+)-conv(\d+)k(\d+)s(\d+)-fc(\d+)-out(\d+)$"
)


def parse_arch_id(arch_id: str) -> Architecture:
    match = _ARCH_ID_RE.match(arch_id)
    if match is None:
        raise ValueError(f"unrecognized architecture id {arch_id!r}")
    v = [int(g) for g in match.groups()]
    return Architecture(
        in_channels=v[0], in_height=v[1], in_width=v[2],
        conv1_filters=v[3], conv1_kernel=v[4], conv1_stride=v[5],
        conv2_filters=v[6], conv2_kernel=v[7], conv2_stride=v[8],
        fc_units=v[9], n_actions=v[10],
    )


DEFAULT_ARCHITECTURE = Architecture()


def reduced_architecture() -> Architecture:
    """Tiny variant (8x8 input, 2 filters per conv) for finite-difference checks."""
    return Architecture(
        in_channels=4, in_height=8, in_width=8,
        conv1_filters=2, conv1_kernel=3, conv1_stride=2,
        conv2_filters=2, conv2_kernel=2, conv2_stride=1,
        fc_units=8, n_actions=9,
    )


@dataclass
class NetworkParams:
    """Named parameter arrays, float32, in the fixed layer order."""

    arch: Architecture
    layers: dict[str, np.ndarray]

    def validate(self) -> None:
        shapes = self.arch.layer_shapes()
        if tuple(self.layers.keys()) != LAYER_NAMES:
            raise ValueError(f"layer names must be {LAYER_NAMES}, got {tuple(self.layers.keys())}")
        for name, arr in self.layers.items():
            if arr.shape != shapes[name]:
                raise ValueError(f"layer {name} has shape {arr.shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"layer {name} contains non-finite values")

    def copy(self) -> "NetworkParams":
        return NetworkParams(arch=self.arch, layers={k: v.copy() for k, v in self.layers.items()})

    @property
    def n_parameters(self) -> int:
        return sum(arr.size for arr in self.layers.values())


def init_params(seed: int, arch: Architecture = DEFAULT_ARCHITECTURE) -> NetworkParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    shapes = arch.layer_shapes()
    layers: dict[str, np.ndarray] = {}
    for name in LAYER_NAMES:
        shape = shapes[name]
        if name.endswith(".bias"):
            layers[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            layers[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return NetworkParams(arch=arch, layers=layers)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis, computed in float64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def policy_entropy(policy: np.ndarray) -> np.ndarray:
    """Shannon entropy along the last axis; zero-probability entries contribute 0."""
    p = np.asarray(policy, dtype=np.float64)
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -plogp.sum(axis=-1)


@lru_cache(maxsize=16)
def _im2col_indices(channels: int, height: int, width: int, kernel: int, stride: int) -> np.ndarray:
    """Flat gather indices turning a (C*H*W,) image into (positions, C*k*k) patches."""
    out_h = (height - kernel) // stride + 1
    out_w = (width - kernel) // stride + 1
    c = np.arange(channels).reshape(-1, 1, 1)
    di = np.arange(kernel).reshape(1, -1, 1)
    dj = np.arange(kernel).reshape(1, 1, -1)
    offsets = (c * height * width + di * width + dj).reshape(1, -1)
    i = np.arange(out_h).reshape(-1, 1) * stride
    j = np.arange(out_w).reshape(1, -1) * stride
    starts = (i * width + j).reshape(-1, 1)
    return (starts + offsets).astype(np.intp)


@dataclass
class _ForwardCache:
    """Intermediate activations kept for backprop, batch-first."""

    x_flat: np.ndarray
    cols1: np.ndarray
    pre1: np.ndarray
    cols2: np.ndarray
    pre2: np.ndarray
    flat: np.ndarray
    pre_fc: np.ndarray
    act_fc: np.ndarray
    logits: np.ndarray     # (B, A) float32
    value: np.ndarray      # (B,) float32
    policy: np.ndarray     # (B, A) float64


@dataclass
class ForwardOutput:
    """Result of one forward evaluation."""

    policy: np.ndarray  # (n_actions,) float64, sums to 1
    value: float
    cache: _ForwardCache


def _forward_batch(params: NetworkParams, x: np.ndarray, check_finite: bool = False) -> _ForwardCache:
    # All matmuls run as 2D GEMMs with the batch and patch axes merged; the
    # batched 3D form is an order of magnitude slower for these sizes.
    arch = params.arch
    layers = params.layers
    batch = x.shape[0]
    x_flat = np.ascontiguousarray(x, dtype=np.float32).reshape(batch, -1)

    idx1 = _im2col_indices(arch.in_channels, arch.in_height, arch.in_width,
                           arch.conv1_kernel, arch.conv1_stride)
    p1, k1 = idx1.shape
    cols1 = x_flat[:, idx1]
    w1 = layers["conv1.weight"].reshape(arch.conv1_filters, -1)
    pre1 = (cols1.reshape(batch * p1, k1) @ w1.T).reshape(batch, p1, -1) + layers["conv1.bias"]
    if check_finite and not np.all(np.isfinite(pre1)):
        raise ValueError("non-finite values in conv1 output")
    act1 = np.maximum(pre1, 0.0)

    h1, w1_out = arch.conv1_out_hw
    act1_img = np.ascontiguousarray(act1.transpose(0, 2, 1)).reshape(batch, -1)
    idx2 = _im2col_indices(arch.conv1_filters, h1, w1_out,
                           arch.conv2_kernel, arch.conv2_stride)
    p2, k2 = idx2.shape
    cols2 = act1_img[:, idx2]
    w2 = layers["conv2.weight"].reshape(arch.conv2_filters, -1)
    pre2 = (cols2.reshape(batch * p2, k2) @ w2.T).reshape(batch, p2, -1) + layers["conv2.bias"]
    if check_finite and not np.all(np.isfinite(pre2)):
        raise ValueError("non-finite values in conv2 output")
    act2 = np.maximum(pre2, 0.0)

    flat = np.ascontiguousarray(act2.transpose(0, 2, 1)).reshape(batch, arch.flat_features)
    pre_fc = flat @ layers["fc.weight"].T + layers["fc.bias"]
    if check_finite and not np.all(np.isfinite(pre_fc)):
        raise ValueError("non-finite values in fc output")
    act_fc = np.maximum(pre_fc, 0.0)

    logits = act_fc @ layers["policy.weight"].T + layers["policy.bias"]
    value = (act_fc @ layers["value.weight"].T + layers["value.bias"])[:, 0]
    if check_finite and not (np.all(np.isfinite(logits)) and np.all(np.isfinite(value))):
        raise ValueError("non-finite values in head outputs")
    policy = softmax(logits)
    return _ForwardCache(
        x_flat=x_flat, cols1=cols1, pre1=pre1, cols2=cols2, pre2=pre2,
        flat=flat, pre_fc=pre_fc, act_fc=act_fc, logits=logits,
        value=value, policy=policy,
    )


def _stack_to_input(params: NetworkParams, stack: FrameStack | np.ndarray) -> np.ndarray:
    arch = params.arch
    arr = stack.as_array() if isinstance(stack, FrameStack) else np.asarray(stack, dtype=np.float32)
    expected = (arch.in_channels, arch.in_height, arch.in_width)
    if arr.shape != expected:
        raise ValueError(f"input shape {arr.shape} does not match network input {expected}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("network input contains non-finite values")
    return arr


def forward(params: NetworkParams, stack: FrameStack | np.ndarray) -> ForwardOutput:
    """Evaluate policy and value for one frame stack.

    Pure: identical parameters and input give bitwise-identical output.
    """
    arr = _stack_to_input(params, stack)
    cache = _forward_batch(params, arr[None])
    return ForwardOutput(policy=cache.policy[0], value=float(cache.value[0]), cache=cache)


def _backward_batch(
    params: NetworkParams,
    cache: _ForwardCache,
    d_logits: np.ndarray,
    d_value: np.ndarray,
) -> Gradients:
    """Backpropagate head gradients to every parameter. Input gradients are not needed."""
    arch = params.arch
    layers = params.layers
    batch = cache.x_flat.shape[0]
    d_logits = d_logits.astype(np.float32)
    d_value = d_value.astype(np.float32)

    grads: Gradients = {}
    grads["policy.weight"] = d_logits.T @ cache.act_fc
    grads["policy.bias"] = d_logits.sum(axis=0)
    grads["value.weight"] = d_value[None, :] @ cache.act_fc
    grads["value.bias"] = d_value.sum(axis=0, keepdims=True)

    d_act_fc = d_logits @ layers["policy.weight"] + d_value[:, None] * layers["value.weight"][0]
    d_pre_fc = d_act_fc * (cache.pre_fc > 0.0)
    grads["fc.weight"] = d_pre_fc.T @ cache.flat
    grads["fc.bias"] = d_pre_fc.sum(axis=0)

    h2, w2 = arch.conv2_out_hw
    p2 = h2 * w2
    f2 = arch.conv2_filters
    d_flat = d_pre_fc @ layers["fc.weight"]
    d_act2 = np.ascontiguousarray(d_flat.reshape(batch, f2, p2).transpose(0, 2, 1))
    d_pre2 = d_act2 * (cache.pre2 > 0.0)
    w2_mat = layers["conv2.weight"].reshape(f2, -1)
    k2 = w2_mat.shape[1]
    d_pre2_2d = d_pre2.reshape(batch * p2, f2)
    grads["conv2.weight"] = (d_pre2_2d.T @ cache.cols2.reshape(batch * p2, k2)).reshape(
        layers["conv2.weight"].shape
    )
    grads["conv2.bias"] = d_pre2_2d.sum(axis=0)

    # Scatter patch gradients back onto the conv1 activation image; patches
    # overlap when stride < kernel, hence the accumulating add.
    h1, w1_out = arch.conv1_out_hw
    p1 = h1 * w1_out
    f1 = arch.conv1_filters
    d_cols2 = d_pre2_2d @ w2_mat
    idx2 = _im2col_indices(f1, h1, w1_out, arch.conv2_kernel, arch.conv2_stride)
    d_act1_img = np.zeros(batch * f1 * p1, dtype=np.float32)
    flat_idx = (np.arange(batch)[:, None] * (f1 * p1) + idx2.reshape(1, -1)).ravel()
    np.add.at(d_act1_img, flat_idx, d_cols2.ravel())
    d_act1 = np.ascontiguousarray(d_act1_img.reshape(batch, f1, p1).transpose(0, 2, 1))
    d_pre1 = d_act1 * (cache.pre1 > 0.0)
    k1 = cache.cols1.shape[2]
    d_pre1_2d = d_pre1.reshape(batch * p1, f1)
    grads["conv1.weight"] = (d_pre1_2d.T @ cache.cols1.reshape(batch * p1, k1)).reshape(
        layers["conv1.weight"].shape
    )
    grads["conv1.bias"] = d_pre1_2d.sum(axis=0)

    return {name: grads[name].astype(np.float32, copy=False) for name in LAYER_NAMES}


@dataclass
class RolloutBatch:
    """One rollout segment prepared for a loss evaluation.

    Returns and advantages are precomputed by the trainer; the advantage is
    treated as a constant here (no gradient flows through it).
    """

    stacks: np.ndarray      # (T, C, H, W) float32
    actions: np.ndarray     # (T,) int
    returns: np.ndarray     # (T,) float64
    advantages: np.ndarray  # (T,) float64

    def __post_init__(self) -> None:
        t = self.stacks.shape[0]
        if t == 0:
            raise ValueError("rollout batch must be non-empty")
        for name in ("actions", "returns", "advantages"):
            if getattr(self, name).shape != (t,):
                raise ValueError(f"batch field {name} must have length {t}")


@dataclass(frozen=True)
class LossStats:
    """Per-batch loss decomposition (means over the batch)."""

    policy_loss: float
    value_loss: float
    entropy: float


def loss_and_grad(
    params: NetworkParams,
    batch: RolloutBatch,
    c_value: float = 0.5,
    c_entropy: float = 0.01,
) -> tuple[float, Gradients, LossStats]:
    """Actor-critic loss and its exact parameter gradients.

    Per step: -log pi(a_t|s_t) * A_t + c_value * (R_t - V_t)^2
    - c_entropy * H(pi(.|s_t)), averaged over the batch. The value head
    receives gradient only from the squared term.

    Raises ValueError naming the layer if a non-finite intermediate appears.
    """
    cache = _forward_batch(params, batch.stacks, check_finite=True)
    t = batch.stacks.shape[0]
    idx = np.arange(t)
    actions = batch.actions.astype(np.intp)

    pi = cache.policy  # (T, A) float64
    pi_taken = pi[idx, actions]
    if np.any(pi_taken <= 0.0):
        raise ValueError("non-finite values in policy log-probabilities")
    log_pi_taken = np.log(pi_taken)
    entropy = policy_entropy(pi)
    value = cache.value.astype(np.float64)
    td = batch.returns - value

    policy_term = float(-(log_pi_taken * batch.advantages).sum() / t)
    value_term = float((td * td).sum() / t)
    entropy_term = float(entropy.sum() / t)
    loss = policy_term + c_value * value_term - c_entropy * entropy_term

    # d/dlogit_j of -log pi(a) is pi_j - 1[j == a]; d/dlogit_j of -H is
    # pi_j * (log pi_j + H).
    log_pi = np.where(pi > 0.0, np.log(np.where(pi > 0.0, pi, 1.0)), 0.0)
    d_logits = batch.advantages[:, None] * pi
    d_logits[idx, actions] -= batch.advantages
    d_logits += c_entropy * pi * (log_pi + entropy[:, None])
    d_logits /= t
    d_value = (-2.0 * c_value / t) * td

    grads = _backward_batch(params, cache, d_logits, d_value)
    stats = LossStats(policy_loss=policy_term, value_loss=value_term, entropy=entropy_term)
    return float(loss), grads, stats


def save_checkpoint(params: NetworkParams, path: str | Path) -> None:
    """Write parameters as versioned JSON, atomically (write-temp-then-rename)."""
    params.validate()
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": params.arch.arch_id(),
        "layers": [
            {"name": name, "shape": list(arr.shape), "data": arr.astype(np.float64).ravel().tolist()}
            for name, arr in params.layers.items()
        ],
    }
    path = Path(path)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            json.dump(payload, handle)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def load_checkpoint(path: str | Path) -> NetworkParams:
    """Load a checkpoint, validating version, architecture, shapes, and finiteness."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid checkpoint JSON: {exc.msg}") from exc
    if not isinstance(payload, dict):
        raise ValueError(f"{path}: checkpoint must be a JSON object")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    try:
        arch = parse_arch_id(payload.get("arch", ""))
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc
    entries = payload.get("layers")
    if not isinstance(entries, list):
        raise ValueError(f"{path}: missing layer list")
    shapes = arch.layer_shapes()
    layers: dict[str, np.ndarray] = {}
    for entry in entries:
        name = entry.get("name")
        if name not in shapes:
            raise ValueError(f"{path}: unknown layer {name!r}")
        expected = shapes[name]
        if tuple(entry.get("shape", ())) != expected:
            raise ValueError(f"{path}: layer {name} has shape {entry.get('shape')}, expected {list(expected)}")
        data = np.asarray(entry.get("data"), dtype=np.float64)
        if data.size != int(np.prod(expected)):
            raise ValueError(f"{path}: layer {name} has {data.size} values, expected {int(np.prod(expected))}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"{path}: layer {name} contains non-finite values")
        layers[name] = data.astype(np.float32).reshape(expected)
    missing = [name for name in LAYER_NAMES if name not in layers]
    if missing:
        raise ValueError(f"{path}: missing layer {missing[0]!r}")
    params = NetworkParams(arch=arch, layers={name: layers[name] for name in LAYER_NAMES})
    params.validate()
    return params
