"""Policy, memory unit, and evolvable loss network.

The policy is a Gaussian MLP: state-dependent mean from a tanh MLP, with a
state-independent learnable log-std vector. The memory unit is a single tanh
layer driven by a constant all-ones input, so its output is purely a function
of its own parameters. The loss network runs two strided 1-D convolutions
plus a dense layer over the experience buffer to produce a 32-wide context
vector, then scores each step of the update window with a small dense head.

Parameters live in plain float64 ndarrays; graph-building forwards (for
gradient-based updates and sensitivity analysis) mirror the fast ndarray
forwards op for op.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

MEM_WIDTH = 32
CONTEXT_WIDTH = 32
CONV1_KERNEL, CONV1_STRIDE, CONV1_CHANNELS = 8, 7, 10
CONV2_KERNEL, CONV2_STRIDE, CONV2_CHANNELS = 4, 2, 10
HEAD_HIDDEN = 16
LOG_2PI = float(np.log(2.0 * np.pi))

CHECKPOINT_MAGIC = b"EPGC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# parameter packing


def flatten_arrays(arrays) -> np.ndarray:
    """Concatenate ndarrays into one flat float64 vector (bit-exact copy)."""
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def unflatten_arrays(flat: np.ndarray, shapes) -> list[np.ndarray]:
    """Split a flat vector back into views with the given shapes."""
    out = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(flat[offset:offset + size].reshape(shape))
        offset += size
    if offset != flat.size:
        raise ValueError(f"flat vector has {flat.size} values, layout needs {offset}")
    return out


# ---------------------------------------------------------------------------
# feature layout


@dataclass(frozen=True)
class FeatureLayout:
    """Channel plan for one buffer/window row fed to the loss network."""

    obs_dim: int
    act_dim: int
    reward_observing: bool

    @property
    def reward_channels(self) -> int:
        return 1 if self.reward_observing else 0

    @property
    def buffer_channels(self) -> int:
        # state | action | done | reward? | mem | policy mean | policy std
        return (self.obs_dim + self.act_dim + 1 + self.reward_channels
                + MEM_WIDTH + 2 * self.act_dim)

    @property
    def head_channels(self) -> int:
        return self.buffer_channels + CONTEXT_WIDTH

    def buffer_slices(self) -> dict[str, slice]:
        """Channel-kind slices of a buffer-matrix row, in storage order."""
        spans = [("state", self.obs_dim), ("action", self.act_dim), ("done", 1)]
        if self.reward_observing:
            spans.append(("reward", 1))
        spans += [("mem", MEM_WIDTH),
                  ("policy_mean", self.act_dim), ("policy_std", self.act_dim)]
        out, lo = {}, 0
        for name, width in spans:
            out[name] = slice(lo, lo + width)
            lo += width
        return out

    def to_dict(self) -> dict:
        return {"obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "reward_observing": self.reward_observing}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLayout":
        return cls(obs_dim=int(d["obs_dim"]), act_dim=int(d["act_dim"]),
                   reward_observing=bool(d["reward_observing"]))


def conv_output_length(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


def context_flat_length(n_buffer: int) -> int:
    l1 = conv_output_length(n_buffer, CONV1_KERNEL, CONV1_STRIDE)
    l2 = conv_output_length(l1, CONV2_KERNEL, CONV2_STRIDE)
    return l2 * CONV2_CHANNELS


# ---------------------------------------------------------------------------
# policy


@dataclass
class PolicyParams:
    """Tanh MLP mean network plus a log-std vector for the diagonal Gaussian."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    log_std: np.ndarray

    @property
    def obs_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def act_dim(self) -> int:
        return self.log_std.shape[0]

    def to_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        out.append(self.log_std)
        return out

    def shapes(self) -> list[tuple]:
        return [a.shape for a in self.to_arrays()]

    def flat(self) -> np.ndarray:
        return flatten_arrays(self.to_arrays())

    @classmethod
    def from_flat(cls, flat: np.ndarray, shapes) -> "PolicyParams":
        arrays = unflatten_arrays(flat, shapes)
        weights = [arrays[i] for i in range(0, len(arrays) - 1, 2)]
        biases = [arrays[i] for i in range(1, len(arrays) - 1, 2)]
        return cls(weights=weights, biases=biases, log_std=arrays[-1])


def policy_param_count(obs_dim: int, act_dim: int, hidden) -> int:
    dims = [obs_dim, *hidden, act_dim]
    n = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))
    return n + act_dim  # log-std vector


def init_policy(obs_dim: int, act_dim: int, hidden, rng: np.random.Generator,
                log_std_init: float = 0.0) -> PolicyParams:
    """Fan-in scaled random weights, zero biases, constant initial log-std."""
    dims = [obs_dim, *hidden, act_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return PolicyParams(weights=weights, biases=biases,
                        log_std=np.full(act_dim, log_std_init))


def policy_forward(params: PolicyParams, state) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of the action distribution at one state."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (params.obs_dim,):
        raise ValueError(f"state shape {state.shape} != ({params.obs_dim},)")
    h = state
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ w + b)
    mean = h @ params.weights[-1] + params.biases[-1]
    return mean, np.exp(params.log_std)


def policy_mean_batch(params: PolicyParams, states: np.ndarray) -> np.ndarray:
    h = states
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ w + b)
    return h @ params.weights[-1] + params.biases[-1]


def policy_mean_graph(weight_ts, bias_ts, states: np.ndarray) -> ad.Tensor:
    """Graph twin of policy_mean_batch over leaf tensors of the same arrays."""
    n = states.shape[0]
    h = ad.constant(states)
    for w, b in zip(weight_ts[:-1], bias_ts[:-1]):
        h = ad.tanh(ad.add(ad.matmul(h, w), ad.tile_rows(b, n)))
    return ad.add(ad.matmul(h, weight_ts[-1]), ad.tile_rows(bias_ts[-1], n))


def policy_logprob(params: PolicyParams, state, action) -> float:
    """Diagonal Gaussian log density of an action at a state."""
    mean, std = policy_forward(params, state)
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (params.act_dim,):
        raise ValueError(f"action shape {action.shape} != ({params.act_dim},)")
    z = (action - mean) / std
    return float(-0.5 * np.sum(z * z + 2.0 * params.log_std + LOG_2PI))


def logprob_rows_graph(mean_t: ad.Tensor, log_std_t: ad.Tensor,
                       actions: np.ndarray) -> ad.Tensor:
    """Per-row log densities as a column vector, differentiable in mean/log-std."""
    n, k = actions.shape
    std_rows = ad.exp(ad.tile_rows(log_std_t, n))
    z = ad.div(ad.sub(ad.constant(actions), mean_t), std_rows)
    penalty = ad.tile_rows(ad.add(ad.mul(log_std_t, ad.constant(np.full(k, 2.0))),
                                  ad.constant(np.full(k, LOG_2PI))), n)
    terms = ad.add(ad.square(z), penalty)
    row_sums = ad.matmul(terms, ad.constant(np.ones((k, 1))))
    return ad.mul(row_sums, ad.constant(-0.5))


def gaussian_kl_mean(mu1: np.ndarray, log_std1: np.ndarray,
                     mu2: np.ndarray, log_std2: np.ndarray) -> float:
    """Mean over rows of closed-form diagonal-Gaussian KL(1 || 2)."""
    var1 = np.exp(2.0 * log_std1)
    var2 = np.exp(2.0 * log_std2)
    per_dim = (log_std2 - log_std1 + (var1 + (mu1 - mu2) ** 2) / (2.0 * var2) - 0.5)
    return float(np.mean(per_dim.sum(axis=1)))


def policy_kl(before: PolicyParams, after: PolicyParams, states: np.ndarray) -> float:
    """Mean closed-form KL(before || after) of the action Gaussians over states."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] < 1:
        raise ValueError("policy_kl needs at least one probe state")
    mu1 = policy_mean_batch(before, states)
    mu2 = policy_mean_batch(after, states)
    return gaussian_kl_mean(mu1, before.log_std, mu2, after.log_std)


# ---------------------------------------------------------------------------
# memory unit


@dataclass
class MemoryState:
    """Single tanh layer over a constant ones input: writable bias memory."""

    weight: np.ndarray  # (1, MEM_WIDTH)
    bias: np.ndarray    # (MEM_WIDTH,)

    def to_arrays(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def shapes(self) -> list[tuple]:
        return [self.weight.shape, self.bias.shape]

    @classmethod
    def from_flat(cls, flat: np.ndarray, shapes) -> "MemoryState":
        w, b = unflatten_arrays(flat, shapes)
        return cls(weight=w, bias=b)


def init_memory() -> MemoryState:
    return MemoryState(weight=np.zeros((1, MEM_WIDTH)), bias=np.zeros(MEM_WIDTH))


def memory_forward(mem: MemoryState) -> np.ndarray:
    return np.tanh(np.ones(1) @ mem.weight + mem.bias)


def memory_forward_graph(weight_t: ad.Tensor, bias_t: ad.Tensor) -> ad.Tensor:
    ones = ad.constant(np.ones((1, 1)))
    pre = ad.add(ad.reshape(ad.matmul(ones, weight_t), (MEM_WIDTH,)), bias_t)
    return ad.tanh(pre)


# ---------------------------------------------------------------------------
# loss network


@dataclass
class LossParams:
    """Evolved loss: two temporal conv layers + context fc + dense scoring head."""

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    n_buffer: int = field(default=0)

    @property
    def buffer_channels(self) -> int:
        return self.conv1_w.shape[0] // CONV1_KERNEL

    @property
    def head_channels(self) -> int:
        return self.head_w.shape[0]

    def to_arrays(self) -> list[np.ndarray]:
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b,
                self.fc_w, self.fc_b, self.head_w, self.head_b,
                self.out_w, self.out_b]

    def shapes(self) -> list[tuple]:
        return [a.shape for a in self.to_arrays()]

    def flat(self) -> np.ndarray:
        return flatten_arrays(self.to_arrays())

    @classmethod
    def from_flat(cls, flat: np.ndarray, shapes, n_buffer: int) -> "LossParams":
        arrays = unflatten_arrays(flat, shapes)
        return cls(*arrays, n_buffer=n_buffer)


def loss_shapes(layout: FeatureLayout, n_buffer: int) -> list[tuple]:
    cb, ch = layout.buffer_channels, layout.head_channels
    return [
        (CONV1_KERNEL * cb, CONV1_CHANNELS), (CONV1_CHANNELS,),
        (CONV2_KERNEL * CONV1_CHANNELS, CONV2_CHANNELS), (CONV2_CHANNELS,),
        (context_flat_length(n_buffer), CONTEXT_WIDTH), (CONTEXT_WIDTH,),
        (ch, HEAD_HIDDEN), (HEAD_HIDDEN,),
        (HEAD_HIDDEN, 1), (1,),
    ]


def loss_param_count(layout: FeatureLayout, n_buffer: int) -> int:
    return sum(int(np.prod(s)) for s in loss_shapes(layout, n_buffer))


def _orthogonal(rng: np.random.Generator, rows: int, cols: int,
                gain: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_loss(layout: FeatureLayout, n_buffer: int,
              rng: np.random.Generator) -> LossParams:
    """Orthogonal conv/fc/hidden weights; zero head output so the fresh loss
    is neutral and learning starts from the guidance signal."""
    shapes = loss_shapes(layout, n_buffer)
    arrays = []
    for i, shape in enumerate(shapes):
        if len(shape) == 1:
            arrays.append(np.zeros(shape))
        elif i == 8:  # final head layer
            arrays.append(np.zeros(shape))
        else:
            arrays.append(_orthogonal(rng, *shape))
    return LossParams(*arrays, n_buffer=n_buffer)


def _as_tensor(x) -> ad.Tensor:
    return x if isinstance(x, ad.Tensor) else ad.constant(np.asarray(x, dtype=np.float64))


def loss_context(loss: LossParams, buffer_matrix) -> ad.Tensor:
    """Context vector from the full buffer: conv -> conv -> dense, leaky ReLU."""
    x = _as_tensor(buffer_matrix)
    n, c = x.data.shape
    if n != loss.n_buffer or c != loss.buffer_channels:
        raise ad.ShapeError(
            f"loss_context: buffer is {x.data.shape}, expected "
            f"({loss.n_buffer}, {loss.buffer_channels})")
    h = ad.leaky_relu(ad.conv1d(x, ad.constant(loss.conv1_w),
                                ad.constant(loss.conv1_b),
                                CONV1_KERNEL, CONV1_STRIDE))
    h = ad.leaky_relu(ad.conv1d(h, ad.constant(loss.conv2_w),
                                ad.constant(loss.conv2_b),
                                CONV2_KERNEL, CONV2_STRIDE))
    flat = ad.reshape(h, (1, h.data.size))
    ctx = ad.add(ad.matmul(flat, ad.constant(loss.fc_w)),
                 ad.reshape(ad.constant(loss.fc_b), (1, CONTEXT_WIDTH)))
    return ad.reshape(ctx, (CONTEXT_WIDTH,))


def loss_per_step(loss: LossParams, features) -> ad.Tensor:
    """Per-row loss values for a window of feature rows (head channels wide)."""
    f = _as_tensor(features)
    if f.data.ndim != 2 or f.data.shape[1] != loss.head_channels:
        raise ad.ShapeError(
            f"loss_per_step: features are {f.data.shape}, expected "
            f"(rows, {loss.head_channels})")
    n = f.data.shape[0]
    h = ad.leaky_relu(ad.add(ad.matmul(f, ad.constant(loss.head_w)),
                             ad.tile_rows(ad.constant(loss.head_b), n)))
    out = ad.add(ad.matmul(h, ad.constant(loss.out_w)),
                 ad.tile_rows(ad.constant(loss.out_b), n))
    return ad.reshape(out, (n,))


# ---------------------------------------------------------------------------
# checkpoint container: named float64 arrays + JSON header, little-endian


def save_params_file(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    order = list(arrays)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "order": order,
        "shapes": {k: list(arrays[k].shape) for k in order},
        "meta": meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in order:
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_params_file(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported format version")
        arrays = {}
        for k in header["order"]:
            shape = tuple(header["shapes"][k])
            size = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * size)
            arrays[k] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return arrays, header["meta"]
