"""ES outer loop: perturb the loss, run worker lifetimes, rank, ascend.

Each epoch draws V Gaussian noise vectors from a (master seed, epoch) stream,
assigns worker w the vector ceil(wV/W), runs W independent inner loops on
freshly sampled tasks, aggregates final returns per noise vector, replaces
them with centered ranks, and applies the smoothed-gradient ascent step
through momentum-free Adam with L2 decay on the loss parameters.

The coordinator owns the evolved vector, the Adam moments, and the optional
policy pool; workers are stateless and fully determined by (master seed,
epoch, worker index) plus the perturbed parameters they receive, so any
execution backend from sequential to one-process-per-core yields identical
results.
"""

from __future__ import annotations

import json
import multiprocessing
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import nets
from .config import EpgConfig
from .envs import TaskDistribution, sample_task
from .innerloop import InnerLoopConfig, NumericFailure, run_inner_loop
from .nets import FeatureLayout, LossParams, PolicyParams
from .optim import AdamState, adam_step

_NOISE_STREAM = 0xE5
_INIT_STREAM = 0x1A


def assign_noise(w: int, n_workers: int, n_vectors: int) -> int:
    """Noise-vector index (1-based) for worker w: ceil(w * V / W)."""
    if not 1 <= w <= n_workers:
        raise ValueError(f"worker index {w} outside 1..{n_workers}")
    if n_workers % n_vectors != 0:
        raise ValueError("noise vector count must divide the worker count")
    return -((-w * n_vectors) // n_workers)


def noise_table(master_seed: int, epoch: int, n_vectors: int, dim: int,
                mirrored: bool = False) -> np.ndarray:
    """Regenerable (V, dim) standard-normal table for one epoch."""
    rng = np.random.default_rng(
        np.random.SeedSequence((master_seed, epoch, _NOISE_STREAM)))
    if mirrored:
        if n_vectors % 2 != 0:
            raise ValueError("mirrored sampling needs an even vector count")
        half = rng.standard_normal((n_vectors // 2, dim))
        return np.concatenate([half, -half], axis=0)
    return rng.standard_normal((n_vectors, dim))


def aggregate_fitness(returns: np.ndarray, n_vectors: int) -> np.ndarray:
    """Per-vector fitness: mean over the block of W/V workers sharing it."""
    returns = np.asarray(returns, dtype=np.float64)
    if returns.size % n_vectors != 0:
        raise ValueError("worker count is not a multiple of the vector count")
    group = returns.size // n_vectors
    return returns.reshape(n_vectors, group).sum(axis=1) / group


def rank_transform(fitnesses: np.ndarray) -> np.ndarray:
    """Centered ranks in [-0.5, 0.5]; ties broken by lower index ranked lower.

    Values are computed as (2r - (V-1)) / (2(V-1)) so the value multiset is
    exactly sign-symmetric in floating point and its true sum is exactly 0.
    """
    f = np.asarray(fitnesses, dtype=np.float64)
    if f.size < 2:
        raise ValueError("rank transform needs at least two fitnesses")
    order = np.argsort(f, kind="stable")
    ranks = np.empty(f.size, dtype=np.int64)
    ranks[order] = np.arange(f.size)
    return (2 * ranks - (f.size - 1)) / (2.0 * (f.size - 1))


def es_gradient(noise: np.ndarray, shaped: np.ndarray, sigma: float) -> np.ndarray:
    """Smoothed-objective ascent direction (1/(V sigma)) * sum shaped_v eps_v."""
    v = noise.shape[0]
    return (noise.T @ np.asarray(shaped, dtype=np.float64)) / (v * sigma)


def es_update(phi: np.ndarray, noise: np.ndarray, shaped: np.ndarray,
              sigma: float, lr: float, adam: AdamState,
              l2_coeff: float) -> tuple[np.ndarray, AdamState]:
    """One ascent step on the loss parameters through momentum-free Adam."""
    g = es_gradient(noise, shaped, sigma)
    g = g - l2_coeff * phi
    if not np.all(np.isfinite(g)):
        raise NumericFailure("non-finite ES gradient")
    return adam_step(adam, phi, -g, lr)


class PolicyPool:
    """Bounded FIFO of trained policy vectors from past epochs."""

    def __init__(self, capacity: int = 64):
        self.items: deque[np.ndarray] = deque(maxlen=capacity)

    def add(self, flat: np.ndarray) -> None:
        self.items.append(np.asarray(flat, dtype=np.float64).copy())

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.items[int(rng.integers(len(self.items)))].copy()

    def __len__(self) -> int:
        return len(self.items)


def fitness_with_failures(raw: list) -> np.ndarray:
    """Replace failed workers (None) by the epoch's minimum observed fitness."""
    ok = [r for r in raw if r is not None]
    floor = min(ok) if ok else 0.0
    return np.array([floor if r is None else r for r in raw], dtype=np.float64)


# ---------------------------------------------------------------------------
# worker dispatch


def _worker_run(payload: dict):
    """Run one inner-loop lifetime; returns (fitness, trained policy or None).

    Everything stochastic derives from the payload's lifetime key, so the
    result is independent of which process executes it. The coordinator keys
    lifetimes by within-group position, giving every noise vector the same
    set of task/init/rollout draws: fitness ranks then compare identical
    lifetimes under different perturbations instead of task luck.
    """
    seq = np.random.SeedSequence(
        (payload["master_seed"], payload["epoch"], payload["lifetime"]))
    task_seq, policy_seq, run_seq = seq.spawn(3)
    mdp = sample_task(payload["dist"], task_seq)
    layout = FeatureLayout(mdp.observation_dim, mdp.action_dim,
                           mdp.reward_observing)
    loss = LossParams.from_flat(payload["loss_flat"],
                                nets.loss_shapes(layout, payload["n_buffer"]),
                                payload["n_buffer"])
    hidden = payload["policy_hidden"]
    if payload["policy_init_flat"] is not None:
        proto = nets.init_policy(mdp.observation_dim, mdp.action_dim, hidden,
                                 np.random.default_rng(0))
        policy = PolicyParams.from_flat(payload["policy_init_flat"],
                                        proto.shapes())
    else:
        policy = nets.init_policy(mdp.observation_dim, mdp.action_dim, hidden,
                                  np.random.default_rng(policy_seq),
                                  payload["log_std_init"])
    cfg = InnerLoopConfig(**payload["inner_cfg"])
    try:
        report = run_inner_loop(loss, mdp, policy, cfg, payload["alpha"], run_seq)
    except NumericFailure as exc:
        return None, None, str(exc)
    trained = report.policy.flat() if payload["return_policy"] else None
    return report.final_return, trained, ""


@dataclass
class TrainResult:
    loss: LossParams
    policy_init: PolicyParams | None
    log: list[dict]
    checkpoint_path: str | None


def _inner_cfg_dict(cfg: EpgConfig) -> dict:
    return dict(steps=cfg.inner_steps, update_freq=cfg.update_freq,
                buffer_size=cfg.buffer_size, minibatch_size=cfg.minibatch_size,
                lr=cfg.lr_inner, discount=cfg.discount,
                eval_trajectories=cfg.eval_trajectories)


def train_epg(cfg: EpgConfig, dist: TaskDistribution, master_seed: int,
              out_dir=None, n_jobs: int = 1, resume=None, config_hash: str = "",
              log_file=None, progress=None) -> TrainResult:
    """Evolve a loss function over cfg.epochs ES epochs.

    ``resume`` names a checkpoint stem written by a previous call; training
    continues from the stored epoch with identical results to an
    uninterrupted run. ``log_file`` receives one CSV row per epoch.
    """
    errors = cfg.validate()
    if errors:
        raise ValueError("; ".join(errors))

    probe = sample_task(dist, 0)
    layout = FeatureLayout(probe.observation_dim, probe.action_dim,
                           probe.reward_observing)
    shapes = nets.loss_shapes(layout, cfg.buffer_size)
    dim_phi = nets.loss_param_count(layout, cfg.buffer_size)
    hidden = tuple(cfg.policy_hidden)
    proto_policy = nets.init_policy(probe.observation_dim, probe.action_dim,
                                    hidden, np.random.default_rng(0),
                                    cfg.policy_log_std_init)
    dim_theta = proto_policy.flat().size if cfg.evolve_policy_init else 0

    init_rng = np.random.default_rng(
        np.random.SeedSequence((master_seed, _INIT_STREAM)))
    evolved = nets.init_loss(layout, cfg.buffer_size, init_rng).flat()
    if cfg.evolve_policy_init:
        theta0 = nets.init_policy(probe.observation_dim, probe.action_dim,
                                  hidden, init_rng, cfg.policy_log_std_init)
        evolved = np.concatenate([evolved, theta0.flat()])
    adam = AdamState.zeros(evolved.size, beta1=0.0, beta2=0.999)
    pool = PolicyPool(cfg.pool_capacity) if cfg.policy_pool else None
    start_epoch = 1

    if resume is not None:
        evolved, adam, start_epoch, pool = _load_coordinator(
            resume, evolved.size, cfg, master_seed)
        start_epoch += 1

    alpha_sched = cfg.alpha_schedule()
    lr_sched = cfg.lr_outer_schedule()
    inner_cfg = _inner_cfg_dict(cfg)
    log_rows: list[dict] = []

    pool_proc = None
    if n_jobs > 1:
        pool_proc = multiprocessing.get_context("fork").Pool(n_jobs)
    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            t0 = time.perf_counter()
            alpha = alpha_sched.value(epoch - 1)
            lr = lr_sched.value(epoch - 1)
            noise = noise_table(master_seed, epoch, cfg.noise_vectors,
                                evolved.size, cfg.mirrored_sampling)

            group = cfg.workers // cfg.noise_vectors
            payloads = []
            for w in range(1, cfg.workers + 1):
                v = assign_noise(w, cfg.workers, cfg.noise_vectors)
                perturbed = evolved + cfg.sigma * noise[v - 1]
                init_flat = None
                if cfg.evolve_policy_init:
                    init_flat = perturbed[dim_phi:]
                elif pool is not None and len(pool) > 0:
                    pool_rng = np.random.default_rng(
                        np.random.SeedSequence((master_seed, epoch, w, 0x90)))
                    if pool_rng.uniform() < cfg.pool_probability:
                        init_flat = pool.sample(pool_rng)
                payloads.append(dict(
                    master_seed=master_seed, epoch=epoch,
                    lifetime=(w - 1) % group,
                    dist=dist, n_buffer=cfg.buffer_size,
                    loss_flat=perturbed[:dim_phi],
                    policy_init_flat=init_flat,
                    policy_hidden=hidden, log_std_init=cfg.policy_log_std_init,
                    inner_cfg=inner_cfg, alpha=alpha,
                    return_policy=pool is not None))

            if pool_proc is not None:
                results = pool_proc.map(_worker_run, payloads, chunksize=1)
            else:
                results = [_worker_run(p) for p in payloads]

            returns = fitness_with_failures([r[0] for r in results])
            if pool is not None:
                for fitness, trained, _ in results:
                    if trained is not None:
                        pool.add(trained)

            fitness = aggregate_fitness(returns, cfg.noise_vectors)
            # No relative rank exists for a single vector or for exactly tied
            # fitnesses (matched lifetimes tie bit-exactly while the guidance
            # weight is 1); the update then reduces to the L2 pull.
            if cfg.noise_vectors == 1 or np.all(fitness == fitness[0]):
                shaped = np.zeros(cfg.noise_vectors)
            else:
                shaped = rank_transform(fitness)
            evolved, adam = es_update(evolved, noise, shaped, cfg.sigma, lr,
                                      adam, cfg.l2_coeff)

            row = dict(epoch=epoch,
                       mean_fitness=float(returns.mean()),
                       std_fitness=float(returns.std()),
                       min_fitness=float(returns.min()),
                       max_fitness=float(returns.max()),
                       alpha=alpha, lr_out=lr,
                       wall_seconds=time.perf_counter() - t0)
            log_rows.append(row)
            if log_file is not None:
                log_file.write(_log_row_csv(row))
                log_file.flush()
            if progress is not None:
                progress(row)
            if out_dir is not None and cfg.checkpoint_every > 0 \
                    and epoch % cfg.checkpoint_every == 0 and epoch < cfg.epochs:
                _save_coordinator(out_dir, f"ckpt_ep{epoch:06d}", evolved,
                                  dim_phi, layout, cfg, adam, epoch,
                                  master_seed, pool, config_hash)
    finally:
        if pool_proc is not None:
            pool_proc.close()
            pool_proc.join()

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = _save_coordinator(
            out_dir, "checkpoint", evolved, dim_phi, layout, cfg, adam,
            cfg.epochs, master_seed, pool, config_hash)

    loss = LossParams.from_flat(evolved[:dim_phi].copy(), shapes, cfg.buffer_size)
    policy_init = None
    if cfg.evolve_policy_init:
        policy_init = PolicyParams.from_flat(evolved[dim_phi:].copy(),
                                             proto_policy.shapes())
    return TrainResult(loss=loss, policy_init=policy_init, log=log_rows,
                       checkpoint_path=checkpoint_path)


def train_epg_plus_init(cfg: EpgConfig, dist: TaskDistribution, master_seed: int,
                        **kwargs) -> TrainResult:
    """Variant that evolves the policy initialization alongside the loss."""
    if not cfg.evolve_policy_init:
        cfg = cfg.replace(evolve_policy_init=True)
    return train_epg(cfg, dist, master_seed, **kwargs)


LOG_COLUMNS = ["epoch", "mean_fitness", "std_fitness", "min_fitness",
               "max_fitness", "alpha", "lr_out", "wall_seconds"]


def _log_row_csv(row: dict) -> str:
    return ",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                    for c in LOG_COLUMNS) + "\n"


# ---------------------------------------------------------------------------
# checkpointing


def _loss_arrays(loss_flat: np.ndarray, layout: FeatureLayout,
                 n_buffer: int) -> dict:
    loss = LossParams.from_flat(loss_flat, nets.loss_shapes(layout, n_buffer),
                                n_buffer)
    names = ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b",
             "head_w", "head_b", "out_w", "out_b"]
    return {f"loss/{n}": a for n, a in zip(names, loss.to_arrays())}


def _save_coordinator(out_dir, stem, evolved, dim_phi, layout, cfg, adam,
                      epoch, master_seed, pool, config_hash) -> str:
    import os

    os.makedirs(out_dir, exist_ok=True)
    params_path = os.path.join(out_dir, stem + ".ckpt")
    arrays = _loss_arrays(evolved[:dim_phi], layout, cfg.buffer_size)
    if cfg.evolve_policy_init:
        arrays["policy_init/flat"] = evolved[dim_phi:]
    meta = {
        "layout": layout.to_dict(),
        "n_buffer": cfg.buffer_size,
        "update_freq": cfg.update_freq,
        "policy_hidden": list(cfg.policy_hidden),
        "log_std_init": cfg.policy_log_std_init,
        "evolve_policy_init": cfg.evolve_policy_init,
        "epoch": epoch,
        "config_hash": config_hash,
    }
    nets.save_params_file(params_path, arrays, meta)
    state = {
        "epoch": epoch,
        "master_seed": master_seed,
        "adam": {"m": adam.m.tolist(), "v": adam.v.tolist(), "t": adam.t,
                 "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "pool": [p.tolist() for p in pool.items] if pool is not None else None,
        "config_hash": config_hash,
    }
    with open(os.path.join(out_dir, stem + ".state.json"), "w") as fh:
        json.dump(state, fh)
    return params_path


def _load_coordinator(stem_path: str, dim: int, cfg: EpgConfig,
                      master_seed: int):
    """Restore (evolved, adam, epoch, pool) from a checkpoint stem or path."""
    if stem_path.endswith(".ckpt"):
        stem_path = stem_path[:-len(".ckpt")]
    arrays, meta = nets.load_params_file(stem_path + ".ckpt")
    with open(stem_path + ".state.json") as fh:
        state = json.load(fh)
    if state["master_seed"] != master_seed:
        raise ValueError("checkpoint was written under a different master seed")
    loss_flat = nets.flatten_arrays(
        [arrays[k] for k in arrays if k.startswith("loss/")])
    parts = [loss_flat]
    if meta.get("evolve_policy_init"):
        parts.append(arrays["policy_init/flat"])
    evolved = np.concatenate(parts)
    if evolved.size != dim:
        raise ValueError(
            f"checkpoint parameter count {evolved.size} != expected {dim}")
    adam = AdamState(m=np.array(state["adam"]["m"]),
                     v=np.array(state["adam"]["v"]),
                     t=int(state["adam"]["t"]),
                     beta1=float(state["adam"]["beta1"]),
                     beta2=float(state["adam"]["beta2"]),
                     eps=float(state["adam"]["eps"]))
    pool = None
    if state.get("pool") is not None:
        pool = PolicyPool(cfg.pool_capacity)
        for item in state["pool"]:
            pool.add(np.array(item))
    return evolved, adam, int(state["epoch"]), pool


def load_loss_checkpoint(path) -> tuple[LossParams, PolicyParams | None, dict]:
    """Read a checkpoint file back into structured parameters."""
    arrays, meta = nets.load_params_file(path)
    layout = FeatureLayout.from_dict(meta["layout"])
    n_buffer = int(meta["n_buffer"])
    names = ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b",
             "head_w", "head_b", "out_w", "out_b"]
    loss = LossParams(*[arrays[f"loss/{n}"] for n in names], n_buffer=n_buffer)
    expected = nets.loss_shapes(layout, n_buffer)
    if loss.shapes() != expected:
        raise ValueError(f"{path}: loss shapes do not match the stored layout")
    policy = None
    if meta.get("evolve_policy_init"):
        proto = nets.init_policy(layout.obs_dim, layout.act_dim,
                                 tuple(meta["policy_hidden"]),
                                 np.random.default_rng(0))
        policy = PolicyParams.from_flat(arrays["policy_init/flat"],
                                        proto.shapes())
    return loss, policy, meta
