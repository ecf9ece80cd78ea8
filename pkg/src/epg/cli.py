"""Experiment runner: train, test-time-train, sensitivity analysis, plotting.

Exit codes: 0 on success, 2 for configuration/usage errors, 3 for numeric
failures. The EPG_OUT_DIR environment variable overrides the output
directory of every command. Every artifact carries the configuration hash
in a header comment for provenance.
"""

from __future__ import annotations

import argparse
import csv
import multiprocessing
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import nets, plots
from .config import ConfigError, ExperimentConfig, config_hash, load_config
from .envs import sample_task
from .innerloop import InnerLoopConfig, NumericFailure, run_inner_loop
from .nets import FeatureLayout, LossParams
from .outerloop import LOG_COLUMNS, load_loss_checkpoint, train_epg

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_TEST_STREAM = 0x7E

SENSITIVITY_KINDS = ["state", "action", "done", "reward", "policy_output"]


def _resolve_out_dir(cfg_dir: str, flag_dir: str | None) -> str:
    env = os.environ.get("EPG_OUT_DIR")
    if env:
        return env
    if flag_dir:
        return flag_dir
    return cfg_dir


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.n_jobs = args.workers
    errors = cfg.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def _inner_cfg(cfg: ExperimentConfig) -> InnerLoopConfig:
    e = cfg.epg
    return InnerLoopConfig(steps=e.inner_steps, update_freq=e.update_freq,
                           buffer_size=e.buffer_size,
                           minibatch_size=e.minibatch_size, lr=e.lr_inner,
                           discount=e.discount,
                           eval_trajectories=e.eval_trajectories)


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    chash = config_hash(cfg)
    out_dir = _resolve_out_dir(cfg.out_dir, args.out)
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.csv")

    resume = args.resume
    mode = "a" if resume else "w"
    with open(log_path, mode, newline="") as log_file:
        if not resume:
            log_file.write(f"# config={chash}\n")
            log_file.write(f"# started={time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
            log_file.write(",".join(LOG_COLUMNS) + "\n")
        progress = _print_progress if args.verbose else None
        result = train_epg(cfg.epg, cfg.distribution(), cfg.seed,
                           out_dir=out_dir, n_jobs=cfg.n_jobs, resume=resume,
                           config_hash=chash, log_file=log_file,
                           progress=progress)
    print(f"wrote {result.checkpoint_path} and {log_path}")
    return EXIT_OK


def _print_progress(row: dict) -> None:
    print(f"epoch {row['epoch']:5d}  mean {row['mean_fitness']:9.3f}  "
          f"std {row['std_fitness']:8.3f}  alpha {row['alpha']:.3f}  "
          f"lr {row['lr_out']:.2e}  {row['wall_seconds']:.1f}s", flush=True)


# ---------------------------------------------------------------------------
# test-time training


def _load_test_loss(args, cfg: ExperimentConfig, layout: FeatureLayout):
    """Resolve the loss to evaluate plus an optional evolved policy init."""
    n_buffer = cfg.epg.buffer_size
    if args.guidance_only or args.random_loss:
        seed_tag = 0 if args.guidance_only else cfg.seed
        rng = np.random.default_rng(np.random.SeedSequence((seed_tag, 0x3F)))
        loss = nets.init_loss(layout, n_buffer, rng)
        if args.random_loss:
            # a control loss that actually produces gradients
            loss.out_w[:] = rng.standard_normal(loss.out_w.shape) / 4.0
        return loss, None
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required unless --guidance-only "
                          "or --random-loss is given")
    loss, policy_init, meta = load_loss_checkpoint(args.checkpoint)
    stored = FeatureLayout.from_dict(meta["layout"])
    if stored.buffer_channels != layout.buffer_channels:
        raise ConfigError(
            f"checkpoint layout has {stored.buffer_channels} buffer channels "
            f"({stored.to_dict()}), the configured task needs "
            f"{layout.buffer_channels} ({layout.to_dict()})")
    if loss.n_buffer != n_buffer:
        raise ConfigError(
            f"checkpoint buffer size {loss.n_buffer} != configured {n_buffer}")
    return loss, policy_init


def _test_worker(payload: dict):
    seq = np.random.SeedSequence(
        (payload["master_seed"], payload["index"], _TEST_STREAM))
    task_seq, policy_seq, run_seq = seq.spawn(3)
    mdp = sample_task(payload["dist"], task_seq)
    if payload["policy_init_flat"] is not None:
        proto = nets.init_policy(mdp.observation_dim, mdp.action_dim,
                                 payload["policy_hidden"],
                                 np.random.default_rng(0))
        policy = nets.PolicyParams.from_flat(payload["policy_init_flat"],
                                             proto.shapes())
    else:
        policy = nets.init_policy(mdp.observation_dim, mdp.action_dim,
                                  payload["policy_hidden"],
                                  np.random.default_rng(policy_seq),
                                  payload["log_std_init"])
    loss = LossParams.from_flat(
        payload["loss_flat"],
        nets.loss_shapes(FeatureLayout(mdp.observation_dim, mdp.action_dim,
                                       mdp.reward_observing),
                         payload["n_buffer"]),
        payload["n_buffer"])
    cfg = InnerLoopConfig(**payload["inner_cfg"])
    try:
        report = run_inner_loop(loss, mdp, policy, cfg, payload["alpha"],
                                run_seq, record_buffer=payload["record_buffer"])
    except NumericFailure as exc:
        return dict(index=payload["index"], failed=True, error=str(exc))
    return dict(index=payload["index"], failed=False,
                kls=report.kls, episode_returns=report.episode_returns,
                episode_end_steps=report.episode_end_steps,
                final_return=report.final_return,
                buffer_matrix=report.buffer_matrix,
                env_steps=mdp.total_steps)


def _write_trace(path, report: dict, update_freq: int, chash: str) -> None:
    events: dict[int, dict] = {}
    for step, ret in zip(report["episode_end_steps"], report["episode_returns"]):
        events.setdefault(int(step), {})["episode_return"] = ret
    for i, kl in enumerate(report["kls"], start=1):
        ev = events.setdefault(i * update_freq, {})
        ev["update_index"] = i
        ev["kl"] = kl
    with open(path, "w", newline="") as fh:
        fh.write(f"# config={chash}\n")
        writer = csv.writer(fh)
        writer.writerow(["step", "episode_return", "update_index", "kl"])
        for step in sorted(events):
            ev = events[step]
            writer.writerow([step,
                             _cell(ev.get("episode_return")),
                             _cell(ev.get("update_index")),
                             _cell(ev.get("kl"))])


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return int(value)
    return repr(float(value))


def read_trace(path) -> dict:
    """Parse a test trace CSV into returns and KL series."""
    returns, kls = [], []
    with open(path) as fh:
        rows = [line for line in fh if not line.startswith("#")]
    for row in csv.DictReader(rows):
        if row["episode_return"]:
            returns.append((float(row["step"]), float(row["episode_return"])))
        if row["kl"]:
            kls.append((float(row["update_index"]), float(row["kl"])))
    return {"returns": returns, "kls": kls}


def _buffer_columns(layout: FeatureLayout) -> list[str]:
    cols = []
    for kind, sl in layout.buffer_slices().items():
        width = sl.stop - sl.start
        if width == 1:
            cols.append(kind)
        else:
            cols.extend(f"{kind}{i}" for i in range(width))
    return cols


def _write_buffer_csv(path, layout, matrix: np.ndarray, update_freq: int,
                      chash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config={chash}\n")
        fh.write(f"# n_buffer={matrix.shape[0]} update_freq={update_freq}\n")
        writer = csv.writer(fh)
        writer.writerow(["timestep"] + _buffer_columns(layout))
        for i, row in enumerate(matrix):
            writer.writerow([i] + [repr(float(v)) for v in row])


def read_buffer_csv(path, layout: FeatureLayout) -> np.ndarray:
    with open(path) as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.reader(rows)
    header = next(reader)
    expected = ["timestep"] + _buffer_columns(layout)
    if header != expected:
        raise ConfigError(
            f"buffer trace has {len(header) - 1} channel columns, the "
            f"checkpoint layout needs {len(expected) - 1} "
            f"(expected header {expected[:6]}...)")
    data = np.array([[float(v) for v in row[1:]] for row in reader])
    return data


def cmd_test(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    chash = config_hash(cfg)
    out_dir = _resolve_out_dir(cfg.out_dir, args.out)
    os.makedirs(out_dir, exist_ok=True)

    dist = cfg.distribution(mirror=True if args.mirror else None)
    probe = sample_task(dist, 0)
    layout = FeatureLayout(probe.observation_dim, probe.action_dim,
                           probe.reward_observing)
    loss, policy_init = _load_test_loss(args, cfg, layout)
    alpha = 1.0 if args.guidance_only else 0.0

    inner_cfg = _inner_cfg(cfg)
    payloads = [dict(master_seed=cfg.seed, index=k, dist=dist,
                     n_buffer=cfg.epg.buffer_size, loss_flat=loss.flat(),
                     policy_init_flat=(policy_init.flat()
                                       if policy_init is not None else None),
                     policy_hidden=tuple(cfg.epg.policy_hidden),
                     log_std_init=cfg.epg.policy_log_std_init,
                     inner_cfg=inner_cfg.__dict__, alpha=alpha,
                     record_buffer=args.record_buffer)
                for k in range(args.seeds)]
    if cfg.n_jobs > 1:
        with multiprocessing.get_context("fork").Pool(cfg.n_jobs) as pool:
            results = pool.map(_test_worker, payloads, chunksize=1)
    else:
        results = [_test_worker(p) for p in payloads]

    failures = [r for r in results if r.get("failed")]
    if failures:
        for r in failures:
            print(f"seed {r['index']}: numeric failure: {r['error']}",
                  file=sys.stderr)
        return EXIT_NUMERIC

    tag = "baseline" if args.guidance_only else ("control" if args.random_loss
                                                 else "epg")
    traces = []
    for r in results:
        trace_path = os.path.join(out_dir, f"test_{tag}_seed{r['index']:03d}.csv")
        _write_trace(trace_path, r, cfg.epg.update_freq, chash)
        traces.append(read_trace(trace_path))
        if args.record_buffer and r["buffer_matrix"] is not None:
            _write_buffer_csv(
                os.path.join(out_dir, f"buffer_{tag}_seed{r['index']:03d}.csv"),
                layout, r["buffer_matrix"], cfg.epg.update_freq, chash)

    finals = np.array([r["final_return"] for r in results])
    steps = np.array([r["env_steps"] for r in results])
    finals_path = os.path.join(out_dir, f"test_{tag}_finals.csv")
    with open(finals_path, "w", newline="") as fh:
        fh.write(f"# config={chash}\n")
        writer = csv.writer(fh)
        writer.writerow(["seed", "final_return", "env_steps"])
        for k, (fr, st) in enumerate(zip(finals, steps)):
            writer.writerow([k, repr(float(fr)), int(st)])

    summary_path = os.path.join(out_dir, f"test_{tag}_summary.csv")
    _write_summary(summary_path, traces, finals, chash)

    svg_path = os.path.join(out_dir, f"test_{tag}_plot.svg")
    with open(svg_path, "w") as fh:
        fh.write(plots.emit_plot(traces, chash))

    print(f"{tag}: {args.seeds} seeds, median final return "
          f"{np.median(finals):.3f} (IQR {np.percentile(finals, 25):.3f} .. "
          f"{np.percentile(finals, 75):.3f}); wrote {summary_path}")
    return EXIT_OK


def _write_summary(path, traces: list[dict], finals: np.ndarray,
                   chash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config={chash}\n")
        writer = csv.writer(fh)
        writer.writerow(["metric", "x", "median", "q25", "q75"])
        for metric, key in [("episode_return", "returns"), ("kl", "kls")]:
            rows = plots.collect_series([t[key] for t in traces])
            for x, med, q25, q75 in rows:
                writer.writerow([metric, _cell(x), _cell(med), _cell(q25),
                                 _cell(q75)])
        writer.writerow(["final_return", "", _cell(np.median(finals)),
                         _cell(np.percentile(finals, 25)),
                         _cell(np.percentile(finals, 75))])


# ---------------------------------------------------------------------------
# sensitivity analysis


def sensitivity_norms(loss: LossParams, layout: FeatureLayout,
                      matrix: np.ndarray, t_index: int,
                      update_freq: int) -> tuple[list[str], np.ndarray]:
    """Gradient norm of the chosen step's loss w.r.t. every buffer input.

    Differentiates L at buffer row ``t_index`` (which must lie in the final
    update window) through both the direct head inputs and the temporal-conv
    context, returning an (input kind, timestep) magnitude table.
    """
    n = loss.n_buffer
    if matrix.shape != (n, layout.buffer_channels):
        raise ConfigError(
            f"buffer matrix is {matrix.shape}, loss expects "
            f"({n}, {layout.buffer_channels})")
    lo = n - update_freq
    if not lo <= t_index < n:
        raise ConfigError(
            f"t index {t_index} outside the head window [{lo}, {n - 1}]")

    x = ad.Tensor(matrix.copy())
    ctx = nets.loss_context(loss, x)
    sl = layout.buffer_slices()
    mem_end = sl["mem"].stop
    row = ad.slice_rows(x, t_index, t_index + 1)
    feats = ad.concat([ad.slice_cols(row, 0, mem_end),
                       ad.reshape(ctx, (1, nets.CONTEXT_WIDTH)),
                       ad.slice_cols(row, mem_end, layout.buffer_channels)],
                      axis=1)
    l_t = ad.sum_all(nets.loss_per_step(loss, feats))
    ad.backward(l_t)
    grad = x.grad if x.grad is not None else np.zeros_like(matrix)

    kinds, mags = [], []
    for kind in SENSITIVITY_KINDS:
        if kind == "reward" and not layout.reward_observing:
            continue
        if kind == "policy_output":
            cols = np.r_[np.arange(sl["policy_mean"].start, sl["policy_mean"].stop),
                         np.arange(sl["policy_std"].start, sl["policy_std"].stop)]
        else:
            cols = np.arange(sl[kind].start, sl[kind].stop)
        kinds.append(kind)
        mags.append(np.sqrt((grad[:, cols] ** 2).sum(axis=1)))
    return kinds, np.array(mags)


def cmd_analyze_sensitivity(args) -> int:
    loss, _, meta = load_loss_checkpoint(args.checkpoint)
    layout = FeatureLayout.from_dict(meta["layout"])
    update_freq = int(meta["update_freq"])
    matrix = read_buffer_csv(args.buffer, layout)
    kinds, mags = sensitivity_norms(loss, layout, matrix, args.t, update_freq)

    out_dir = _resolve_out_dir(os.path.dirname(args.buffer) or ".", args.out)
    os.makedirs(out_dir, exist_ok=True)
    chash = meta.get("config_hash", "")
    csv_path = os.path.join(out_dir, f"sensitivity_t{args.t}.csv")
    with open(csv_path, "w", newline="") as fh:
        fh.write(f"# config={chash}\n")
        writer = csv.writer(fh)
        writer.writerow(["timestep", "channel_kind", "grad_norm"])
        for row, kind in enumerate(kinds):
            for i in range(mags.shape[1]):
                writer.writerow([i, kind, repr(float(mags[row, i]))])
    svg_path = os.path.join(out_dir, f"sensitivity_t{args.t}.svg")
    with open(svg_path, "w") as fh:
        fh.write(plots.emit_heat_strip(kinds, mags, marker=args.t,
                                       config_hash=chash))
    print(f"wrote {csv_path} and {svg_path}; peak |grad| = {mags.max():.3e} "
          f"at the evaluated step {args.t}" if mags.max() > 0 else
          f"wrote {csv_path} and {svg_path}; all sensitivities are zero")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot


def cmd_plot(args) -> int:
    traces = [read_trace(p) for p in args.traces]
    svg = plots.emit_plot(traces)
    with open(args.output, "w") as fh:
        fh.write(svg)
    print(f"wrote {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epg",
        description="Evolve a loss function whose gradient trains policies.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the ES outer loop")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--workers", type=int, help="worker processes")
    p.add_argument("--resume", help="checkpoint stem to continue from")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("test", help="test-time training on fresh tasks")
    p.add_argument("config")
    p.add_argument("--checkpoint")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--guidance-only", action="store_true",
                   help="policy-gradient baseline: alpha=1, untrained loss")
    p.add_argument("--random-loss", action="store_true",
                   help="never-trained loss control at alpha=0")
    p.add_argument("--mirror", action="store_true",
                   help="flip the task distribution's sampling support")
    p.add_argument("--record-buffer", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("analyze-sensitivity",
                       help="gradient magnitude of one step's loss per input")
    p.add_argument("checkpoint")
    p.add_argument("buffer", help="buffer trace CSV from test --record-buffer")
    p.add_argument("--t", type=int, required=True, help="buffer row to analyze")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_sensitivity)

    p = sub.add_parser("plot", help="render trace CSVs to a median/IQR SVG")
    p.add_argument("traces", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
