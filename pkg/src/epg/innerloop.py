"""One agent lifetime: rollouts, the M-step update cycle, and evaluation.

The agent acts for a fixed number of steps, storing normalized transitions
in a ring buffer. Every ``update_freq`` steps the last window is scored by
the (fixed) loss network, mixed with a windowed REINFORCE guidance term, and
the policy and memory parameters take Adam steps on shuffled minibatches
that cover the window exactly once. The context vector and memory output
are recomputed once per window from the buffer snapshot; within a window
the context is a constant while the memory output stays differentiable, so
gradient reaches the memory parameters through the loss inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .envs import MdpInstance
from .nets import FeatureLayout, LossParams, MemoryState, PolicyParams
from .optim import AdamState, RunningNormalizer, adam_step


class NumericFailure(RuntimeError):
    """Inner-loop training produced a non-finite loss or parameter."""


@dataclass
class InnerLoopConfig:
    steps: int                   # lifetime length U
    update_freq: int             # window size M
    buffer_size: int             # ring capacity N
    minibatch_size: int = 32
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    discount: float = 0.99
    eval_trajectories: int = 3

    def validate(self) -> None:
        if self.update_freq % self.minibatch_size != 0:
            raise ValueError("update_freq must be a multiple of the minibatch size")
        if self.steps % self.update_freq != 0:
            raise ValueError("update_freq must divide the step count")
        if self.update_freq > self.buffer_size:
            raise ValueError("update_freq cannot exceed the buffer size")


@dataclass
class InnerLoopReport:
    """Everything a worker hands back to the coordinator."""

    kls: np.ndarray
    episode_returns: np.ndarray
    episode_end_steps: np.ndarray
    final_return: float
    policy: PolicyParams
    memory: MemoryState
    buffer_matrix: np.ndarray | None = None
    param_trace: list = field(default_factory=list)


class ExperienceBuffer:
    """Fixed-capacity ring of transitions, initialized to zero tuples."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.cursor = 0

    def add(self, state, action, reward: float, done: bool) -> None:
        i = self.cursor
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.dones[i] = 1.0 if done else 0.0
        self.cursor = (i + 1) % self.capacity

    def _ordered(self, arr: np.ndarray) -> np.ndarray:
        return np.concatenate([arr[self.cursor:], arr[:self.cursor]], axis=0)

    def chronological(self):
        """All N rows oldest-first; unwritten rows are the zero tuples."""
        return (self._ordered(self.states), self._ordered(self.actions),
                self._ordered(self.rewards), self._ordered(self.dones))

    def last_window(self, m: int):
        s, a, r, d = self.chronological()
        return s[-m:], a[-m:], r[-m:], d[-m:]


def reward_to_go(rewards: np.ndarray, dones: np.ndarray, gamma: float) -> np.ndarray:
    """Discounted suffix sums, restarting after each terminal step."""
    out = np.empty_like(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        if dones[i]:
            acc = 0.0
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def guidance_advantages(rewards: np.ndarray, dones: np.ndarray,
                        gamma: float) -> np.ndarray:
    """Window-local advantages: reward-to-go, centered and scaled."""
    togo = reward_to_go(rewards, dones, gamma)
    centered = togo - togo.mean()
    return centered / max(float(centered.std()), 1e-8)


def guidance_loss(window, policy: PolicyParams, gamma: float) -> float:
    """Negated advantage-weighted log-likelihood of the window's actions."""
    states, actions, rewards, dones = window
    adv = guidance_advantages(np.asarray(rewards, dtype=np.float64),
                              np.asarray(dones, dtype=np.float64), gamma)
    logps = np.array([nets.policy_logprob(policy, s, a)
                      for s, a in zip(states, actions)])
    return float(-(adv * logps).sum())


def mixed_loss(epg_loss: float, guidance: float, alpha: float) -> float:
    """Convex combination of the learned loss and the guidance surrogate."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * epg_loss + alpha * guidance


def minibatch_partition(window_size: int, batch_size: int,
                        rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled minibatches covering each window index exactly once."""
    perm = rng.permutation(window_size)
    return [perm[i:i + batch_size] for i in range(0, window_size, batch_size)]


def evaluate_policy(policy: PolicyParams, mdp: MdpInstance, n_traj: int,
                    rng: np.random.Generator,
                    normalizer: RunningNormalizer | None = None) -> float:
    """Mean undiscounted return of stochastic rollouts (capped at the horizon)."""
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    std = np.exp(policy.log_std)
    total = 0.0
    for _ in range(n_traj):
        raw = mdp.reset(rng)
        ep = 0.0
        for _ in range(mdp.horizon):
            obs = normalizer.normalize(raw) if normalizer is not None else raw
            mean, _ = nets.policy_forward(policy, obs)
            action = mean + std * rng.standard_normal(policy.act_dim)
            raw, r, done = mdp.step(action)
            ep += r
            if done:
                break
        total += ep
    return total / n_traj


def _assemble_buffer_matrix(layout: FeatureLayout, states, actions_n, rewards,
                            dones, mem_out, mu, sigma) -> np.ndarray:
    n = states.shape[0]
    x = np.empty((n, layout.buffer_channels))
    sl = layout.buffer_slices()
    x[:, sl["state"]] = states
    x[:, sl["action"]] = actions_n
    x[:, sl["done"]] = dones[:, None]
    if layout.reward_observing:
        x[:, sl["reward"]] = rewards[:, None]
    x[:, sl["mem"]] = mem_out
    x[:, sl["policy_mean"]] = mu
    x[:, sl["policy_std"]] = sigma
    return x


def run_inner_loop(loss: LossParams, mdp: MdpInstance, init_policy: PolicyParams,
                   cfg: InnerLoopConfig, alpha: float, seed,
                   init_memory: MemoryState | None = None,
                   trace_path=None, record_buffer: bool = False,
                   keep_param_trace: bool = False) -> InnerLoopReport:
    """Train a fresh policy for one lifetime and evaluate the result.

    Raises NumericFailure if the loss or the parameters leave the finite
    range; the caller decides what fitness a failed worker reports.
    """
    cfg.validate()
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    layout = FeatureLayout(mdp.observation_dim, mdp.action_dim,
                           mdp.reward_observing)
    if loss.buffer_channels != layout.buffer_channels:
        raise ValueError(
            f"loss expects {loss.buffer_channels} buffer channels, task layout "
            f"has {layout.buffer_channels}")
    if loss.n_buffer != cfg.buffer_size:
        raise ValueError(
            f"loss was built for buffer size {loss.n_buffer}, config says "
            f"{cfg.buffer_size}")

    rng = np.random.default_rng(seed)
    mem = init_memory if init_memory is not None else nets.init_memory()

    # Policy and memory share one flat vector (and one Adam state); the
    # structured views below alias it, so in-place writes update both.
    pol_shapes = init_policy.shapes()
    mem_shapes = mem.shapes()
    n_pol = init_policy.flat().size
    flat = np.concatenate([init_policy.flat(), nets.flatten_arrays(mem.to_arrays())])
    policy = PolicyParams.from_flat(flat[:n_pol], pol_shapes)
    mem = MemoryState.from_flat(flat[n_pol:], mem_shapes)
    adam = AdamState.zeros(flat.size, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)

    obs_norm = RunningNormalizer(mdp.observation_dim)
    act_norm = RunningNormalizer(mdp.action_dim)
    rew_norm = RunningNormalizer(1)
    buffer = ExperienceBuffer(cfg.buffer_size, mdp.observation_dim, mdp.action_dim)

    kls: list[float] = []
    episode_returns: list[float] = []
    episode_end_steps: list[int] = []
    trace_rows: list[tuple] = []
    param_trace: list[np.ndarray] = []
    ep_raw = 0.0
    last_matrix = None
    obs = None

    # The structured arrays are views into ``flat``, so these references stay
    # current across parameter updates; only the std cache must refresh.
    layers = list(zip(policy.weights, policy.biases))
    std = np.exp(policy.log_std)
    act_dim = mdp.action_dim
    reward_buf = np.zeros(1)

    for t in range(1, cfg.steps + 1):
        if mdp.needs_reset or obs is None:
            raw = mdp.reset(rng)
            obs_norm.update(raw)
            obs = obs_norm.normalize(raw)
        h = obs
        for w, b_ in layers[:-1]:
            h = np.tanh(h @ w + b_)
        mean = h @ layers[-1][0] + layers[-1][1]
        action = mean + std * rng.standard_normal(act_dim)
        raw_next, r_raw, done = mdp.step(action)
        act_norm.update(action)
        reward_buf[0] = r_raw
        rew_norm.update(reward_buf)
        buffer.add(obs, action, rew_norm.normalize(reward_buf)[0], done)
        ep_raw += r_raw
        if done:
            episode_returns.append(ep_raw)
            episode_end_steps.append(t)
            ep_raw = 0.0
        else:
            obs_norm.update(raw_next)
            obs = obs_norm.normalize(raw_next)

        if t % cfg.update_freq == 0:
            kl, adam, matrix = _update_window(
                loss, layout, policy, mem, flat, adam,
                buffer, act_norm, cfg, alpha, rng, record_buffer)
            std = np.exp(policy.log_std)
            if matrix is not None:
                last_matrix = matrix
            kls.append(kl)
            trace_rows.append((len(kls), kl,
                               episode_returns[-1] if episode_returns else ""))
            if keep_param_trace:
                param_trace.append(flat.copy())

    final_return = evaluate_policy(policy, mdp, cfg.eval_trajectories, rng,
                                   normalizer=obs_norm)
    if not np.isfinite(final_return):
        raise NumericFailure("non-finite evaluation return")

    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["update_index", "kl", "episode_return"])
            writer.writerows(trace_rows)

    return InnerLoopReport(
        kls=np.array(kls),
        episode_returns=np.array(episode_returns),
        episode_end_steps=np.array(episode_end_steps, dtype=int),
        final_return=float(final_return),
        policy=PolicyParams.from_flat(flat[:n_pol].copy(), pol_shapes),
        memory=MemoryState.from_flat(flat[n_pol:].copy(), mem_shapes),
        buffer_matrix=last_matrix,
        param_trace=param_trace,
    )


def _update_window(loss, layout, policy, mem, flat, adam,
                   buffer, act_norm, cfg, alpha, rng, record_buffer):
    m = cfg.update_freq
    states_w, actions_w, rewards_w, dones_w = buffer.last_window(m)
    log_std_before = policy.log_std.copy()

    sigma = np.exp(policy.log_std)
    matrix = None
    f_ctx = None
    if alpha < 1.0:
        snap_s, snap_a, snap_r, snap_d = buffer.chronological()
        mem_out = nets.memory_forward(mem)
        mu_all = nets.policy_mean_batch(policy, snap_s)
        matrix = _assemble_buffer_matrix(
            layout, snap_s, act_norm.normalize(snap_a), snap_r, snap_d,
            mem_out, mu_all, np.broadcast_to(sigma, (buffer.capacity, len(sigma))))
        f_ctx = nets.loss_context(loss, matrix).data
        if not np.all(np.isfinite(f_ctx)):
            raise NumericFailure("non-finite context vector")
        mu_before = mu_all[-m:].copy()  # window rows are the buffer's newest
    else:
        mu_before = nets.policy_mean_batch(policy, states_w)

    # Constant feature columns of the window rows: state | action | done | reward?
    pre_w = layout.obs_dim + layout.act_dim + 1 + layout.reward_channels
    f0 = np.empty((m, pre_w))
    f0[:, :layout.obs_dim] = states_w
    f0[:, layout.obs_dim:layout.obs_dim + layout.act_dim] = act_norm.normalize(actions_w)
    f0[:, layout.obs_dim + layout.act_dim] = dones_w
    if layout.reward_observing:
        f0[:, -1] = rewards_w

    adv = (guidance_advantages(rewards_w, dones_w, cfg.discount)
           if alpha > 0.0 else None)

    for mb in minibatch_partition(m, cfg.minibatch_size, rng):
        b = len(mb)
        w_ts = [ad.Tensor(w) for w in policy.weights]
        b_ts = [ad.Tensor(b_) for b_ in policy.biases]
        log_std_t = ad.Tensor(policy.log_std)
        mem_w_t = ad.Tensor(mem.weight)
        mem_b_t = ad.Tensor(mem.bias)

        mu_t = nets.policy_mean_graph(w_ts, b_ts, states_w[mb])

        total = None
        if alpha < 1.0:
            sigma_rows = ad.exp(ad.tile_rows(log_std_t, b))
            mem_rows = ad.tile_rows(nets.memory_forward_graph(mem_w_t, mem_b_t), b)
            feats = ad.concat([
                ad.constant(f0[mb]),
                mem_rows,
                ad.constant(np.tile(f_ctx, (b, 1))),
                mu_t,
                sigma_rows,
            ], axis=1)
            total = ad.sum_all(nets.loss_per_step(loss, feats))
        if alpha > 0.0:
            logp = nets.logprob_rows_graph(mu_t, log_std_t, actions_w[mb])
            guid = ad.neg(ad.reshape(ad.matmul(ad.constant(adv[mb][None, :]), logp),
                                     ()))
            if total is None:
                total = guid
            else:
                total = ad.add(ad.mul(total, ad.constant(1.0 - alpha)),
                               ad.mul(guid, ad.constant(alpha)))

        if not np.isfinite(total.item()):
            raise NumericFailure("non-finite window loss")
        ad.backward(total)
        # Gradient order must mirror the flat layout: interleaved policy
        # weights/biases, then log-std, then the memory layer.
        ordered = []
        for i in range(len(policy.weights)):
            ordered.append(w_ts[i].grad if w_ts[i].grad is not None
                           else np.zeros_like(policy.weights[i]))
            ordered.append(b_ts[i].grad if b_ts[i].grad is not None
                           else np.zeros_like(policy.biases[i]))
        ordered.append(log_std_t.grad if log_std_t.grad is not None
                       else np.zeros_like(policy.log_std))
        ordered.append(mem_w_t.grad if mem_w_t.grad is not None
                       else np.zeros_like(mem.weight))
        ordered.append(mem_b_t.grad if mem_b_t.grad is not None
                       else np.zeros_like(mem.bias))
        g = nets.flatten_arrays(ordered)

        new_flat, adam = adam_step(adam, flat, g, cfg.lr)
        flat[:] = new_flat
        if not np.all(np.isfinite(flat)):
            raise NumericFailure("non-finite parameters after update")

    mu_after = nets.policy_mean_batch(policy, states_w)
    kl = nets.gaussian_kl_mean(mu_before, log_std_before, mu_after, policy.log_std)
    if not np.isfinite(kl) or kl < -1e-12:
        raise NumericFailure(f"invalid KL value {kl}")
    return max(kl, 0.0), adam, (matrix if record_buffer else None)
