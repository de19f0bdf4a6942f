"""``tactobench`` command line: train, eval, sweep and bench.

Exit codes: 0 success, 1 runtime failure (including an interrupted run),
2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import signal
import sys
import time

import numpy as np

from .config import ConfigError, RunConfig, dump_config, get_preset, load_config, parse_config
from .env import VecEnv
from .morphology import get_morphology
from .physics import available_backends, max_threads
from .ppo import CheckpointError, PPOTrainer, load_checkpoint, save_checkpoint, stream_rng
from .sweep import SearchSpace, best_trial, run_sweep
from .tasks import PERIOD6_SCHEDULE, replay_contact_schedule

log = logging.getLogger("tactobench")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
METRICS_FILE = "metrics.jsonl"
LATEST_CKPT = "checkpoint_latest.tbck"
FINAL_CKPT = "checkpoint_final.tbck"
BENCH_STREAM = 7


class UsageError(Exception):
    pass


# -- run plumbing ----------------------------------------------------------------
class RunLock:
    """Exclusive ownership of an output directory via ``.lock``."""

    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, ".lock")
        self.held = False

    def __enter__(self):
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                if self._stale():
                    os.unlink(self.path)
                    continue
                raise RuntimeError(f"output directory is locked by another run ({self.path})")
            with os.fdopen(fd, "w") as f:
                f.write(str(os.getpid()))
            self.held = True
            return self
        raise RuntimeError(f"could not acquire {self.path}")

    def _stale(self) -> bool:
        try:
            pid = int(open(self.path).read().strip() or 0)
            os.kill(pid, 0)
        except (ValueError, ProcessLookupError):
            return True
        except (PermissionError, OSError):
            return False
        return pid == os.getpid()

    def __exit__(self, *exc):
        if self.held:
            os.unlink(self.path)
            self.held = False


def build_trainer(cfg: RunConfig, threads: int | None = None) -> PPOTrainer:
    e = cfg.env
    ek = {"joint_noise": e.joint_noise, "bounce_height": e.bounce_height,
          "baoding_jitter": e.baoding_jitter}
    return PPOTrainer(get_morphology(e.morphology), cfg.task, cfg.physics, cfg.ppo, cfg.network,
                      n_train=e.n_train, n_eval=e.n_eval, seed=e.seed, mode=e.observation_mode,
                      stack_k=e.stack_k, env_kwargs=ek, backend=cfg.backend,
                      n_threads=threads or cfg.threads)


def checkpoint_trainer(tr: PPOTrainer, cfg: RunConfig, path: str, extra: dict | None = None) -> None:
    arrays, meta = tr.state()
    meta["config_yaml"] = dump_config(cfg)
    meta["preset"] = cfg.name
    meta.update(extra or {})
    save_checkpoint(path, arrays, meta)


def _round(x):
    if isinstance(x, float):
        return None if not np.isfinite(x) else x
    return x


def _truncate_metrics(path: str, max_iteration: int) -> None:
    """Drop records past ``max_iteration`` and any torn final line."""
    if not os.path.exists(path):
        return
    keep = []
    with open(path) as f:
        for line in f:
            try:
                rec = json.loads(line)
            except ValueError:
                break
            if rec.get("iteration", 0) <= max_iteration:
                keep.append(line if line.endswith("\n") else line + "\n")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.writelines(keep)
    os.replace(tmp, path)


class _Interrupt:
    def __init__(self):
        self.signum = None
        self._old = {}

    def __enter__(self):
        for s in (signal.SIGINT, signal.SIGTERM):
            self._old[s] = signal.signal(s, self._handle)
        return self

    def _handle(self, signum, frame):
        self.signum = signum

    def __exit__(self, *exc):
        for s, h in self._old.items():
            signal.signal(s, h)


def train_run(cfg: RunConfig, out_dir: str, resume: bool = False, threads: int | None = None,
              max_iterations: int | None = None, quiet: bool = False) -> int:
    """Train to ``cfg.total_env_steps``; returns an exit code.

    Writes ``metrics.jsonl`` (one record per iteration), ``config.yaml``,
    a periodic ``checkpoint_latest.tbck`` and the final checkpoint.
    """
    os.makedirs(out_dir, exist_ok=True)
    with RunLock(out_dir), _Interrupt() as intr:
        tr = build_trainer(cfg, threads)
        metrics_path = os.path.join(out_dir, METRICS_FILE)
        latest = os.path.join(out_dir, LATEST_CKPT)
        if resume and os.path.exists(latest):
            arrays, meta = load_checkpoint(latest)
            tr.load_state(arrays, meta)
            _truncate_metrics(metrics_path, tr.iteration)
            next_eval, next_ckpt = meta["next_eval"], meta["next_ckpt"]
        else:
            if os.path.exists(metrics_path):
                os.unlink(metrics_path)
            next_eval, next_ckpt = cfg.eval_interval, cfg.checkpoint_interval
        with open(os.path.join(out_dir, "config.yaml"), "w") as f:
            f.write(dump_config(cfg))
        t0 = time.perf_counter()
        done_iters = 0
        stopped_early = False
        with open(metrics_path, "a") as mf:
            while tr.env_steps < cfg.total_env_steps:
                rec = tr.train_iteration()
                done_iters += 1
                last = tr.env_steps >= cfg.total_env_steps
                ev = None
                if tr.env_steps >= next_eval or last:
                    ev = tr.evaluate(cfg.eval_episodes)
                    while next_eval <= tr.env_steps:
                        next_eval += cfg.eval_interval
                row = {
                    "iteration": rec["iteration"], "env_steps": rec["env_steps"],
                    "train_return": rec["train_return"], "train_episodes": rec["train_episodes"],
                    "train_bounces": rec["train_bounces"], "train_switches": rec["train_switches"],
                    "eval_return": ev.mean_return if ev else None,
                    "eval_return_std": ev.std_return if ev else None,
                    "eval_bounces": ev.mean_bounces if ev else None,
                    "eval_switches": ev.mean_switches if ev else None,
                    "eval_rotations": ev.mean_rotations if ev else None,
                    "policy_loss": rec.get("policy_loss"), "value_loss": rec.get("value_loss"),
                    "entropy": rec.get("entropy"), "aux_loss": rec.get("aux_loss"),
                    "approx_kl": rec.get("approx_kl"), "clip_fraction": rec.get("clip_fraction"),
                    "grad_norm": rec.get("grad_norm"), "learning_rate": rec["learning_rate"],
                    "rolled_back": rec["rolled_back"],
                    "wall_time_s": round(time.perf_counter() - t0, 3),
                }
                mf.write(json.dumps({k: _round(v) for k, v in row.items()}) + "\n")
                mf.flush()
                if not quiet and ev is not None:
                    print(f"steps {tr.env_steps:>10d}  eval return {ev.mean_return:8.2f}  "
                          f"train return {rec['train_return']:8.2f}", flush=True)
                reached = (ev is not None and cfg.target_eval_return is not None
                           and ev.mean_return >= cfg.target_eval_return)
                stop = intr.signum is not None or reached or (
                    max_iterations is not None and done_iters >= max_iterations)
                if tr.env_steps >= next_ckpt or stop or last:
                    while next_ckpt <= tr.env_steps:
                        next_ckpt += cfg.checkpoint_interval
                    checkpoint_trainer(tr, cfg, latest, {"next_eval": next_eval, "next_ckpt": next_ckpt})
                if reached:
                    stopped_early = True
                    break
                if stop:
                    break
        if intr.signum is not None:
            print(f"interrupted by signal {intr.signum}; checkpoint written to {latest}", file=sys.stderr)
            tr.close()
            return EXIT_RUNTIME
        if tr.env_steps >= cfg.total_env_steps or stopped_early:
            checkpoint_trainer(tr, cfg, os.path.join(out_dir, FINAL_CKPT),
                               {"next_eval": next_eval, "next_ckpt": next_ckpt})
        tr.close()
    return EXIT_OK


# -- evaluation --------------------------------------------------------------------
def eval_checkpoint(path: str, n_episodes: int, threads: int | None = None) -> dict:
    if n_episodes < 1:
        raise UsageError("--episodes must be >= 1")
    arrays, meta = load_checkpoint(path)
    cfg = parse_config(meta["config_yaml"], f"{path}#config")
    policy = meta.get("policy", {"kind": "network"})
    if policy.get("kind") == "contact_schedule":
        res = replay_contact_schedule(policy["schedule"], cfg.task, n_episodes)
        r = res["returns"]
        return {"task": "bounce", "policy": "scripted contact schedule (physics bypassed)",
                "n_episodes": n_episodes, "mean_return": float(r.mean()), "std_return": float(r.std()),
                "mean_bounces": float(res["bounces"].mean())}
    tr = build_trainer(cfg, threads)
    tr.load_state(arrays, meta)
    ev = tr.evaluate(n_episodes)
    tr.close()
    out = {"task": cfg.env.task, "policy": "network (deterministic mean action)", **ev.as_dict()}
    return out


def write_oracle_checkpoint(path: str, cfg: RunConfig | None = None) -> None:
    """Checkpoint that evaluates the period-6 contact schedule on Bounce."""
    cfg = cfg or get_preset("desk_paddle_bounce")
    save_checkpoint(path, {}, {"config_yaml": dump_config(cfg), "preset": cfg.name,
                               "policy": {"kind": "contact_schedule", "schedule": list(PERIOD6_SCHEDULE)}})


def format_eval(rep: dict) -> str:
    lines = [f"policy: {rep['policy']}",
             f"episodes: {rep['n_episodes']}",
             f"return: {rep['mean_return']:.2f} +/- {rep['std_return']:.2f}"]
    if rep["task"] == "bounce":
        lines.append(f"bounces: {rep['mean_bounces']:.2f}")
    else:
        lines.append(f"switches: {rep['mean_switches']:.2f}")
        lines.append(f"rotations: {rep['mean_rotations']:.2f}")
    return "\n".join(lines)


# -- sweep --------------------------------------------------------------------------
def eval_objective(metrics: list[dict], budget: int) -> float:
    """Mean eval return over evaluations in the last 10% of the budget."""
    pts = [m["eval_return"] for m in metrics
           if m.get("eval_return") is not None and m["env_steps"] >= 0.9 * budget]
    if not pts:
        pts = [m["eval_return"] for m in metrics if m.get("eval_return") is not None][-1:]
    if not pts:
        raise RuntimeError("trial produced no evaluation")
    return float(np.mean(pts))


def sweep_run(cfg: RunConfig, out_dir: str, threads: int | None = None) -> tuple:
    os.makedirs(out_dir, exist_ok=True)
    sc = cfg.sweep
    space = SearchSpace().override(sc.space)
    budget = sc.budget_env_steps
    with RunLock(out_dir):
        def objective(params: dict, seed: int, index: int) -> float:
            hp = dataclasses.replace(cfg.ppo, **params)
            tcfg = dataclasses.replace(cfg.with_seed(seed), ppo=hp, total_env_steps=budget,
                                       eval_interval=max(1, budget // 10), target_eval_return=None,
                                       checkpoint_interval=budget)
            problems = tcfg.validate()
            if problems:
                raise ValueError("; ".join(m for _, m in problems))
            tdir = os.path.join(out_dir, f"trial_{index:03d}")
            if os.path.exists(os.path.join(tdir, METRICS_FILE)):
                os.unlink(os.path.join(tdir, METRICS_FILE))
            code = train_run(tcfg, tdir, threads=threads, quiet=True)
            if code != EXIT_OK:
                raise RuntimeError(f"trial exited with code {code}")
            with open(os.path.join(tdir, METRICS_FILE)) as f:
                return eval_objective([json.loads(l) for l in f], budget)

        def report(rec):
            status = f"{rec.objective:.2f}" if rec.status == "done" else f"failed ({rec.error})"
            print(f"trial {rec.index:>3d}{' (warm-up)' if rec.warmup else ''}: {status}", flush=True)

        best, history = run_sweep(space, objective, n_trials=sc.n_trials, n_warmup=sc.n_warmup,
                                  seed=cfg.seed, history_path=os.path.join(out_dir, "sweep_history.jsonl"),
                                  on_trial=report)
    return best, history


# -- bench --------------------------------------------------------------------------
def _state_digest(env: VecEnv) -> str:
    h = hashlib.sha256()
    for k, v in sorted(env.state_arrays().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


def bench(cfg: RunConfig, threads: list[int] | None = None, backends: list[str] | None = None,
          n_envs: int | None = None, n_steps: int | None = None) -> tuple[list[dict], bool]:
    """Time a fixed random policy per (backend, thread count); digests must
    agree across thread counts within each backend."""
    b = cfg.bench
    n_envs = n_envs or b.n_envs
    n_steps = n_steps or b.n_steps
    threads = list(threads or b.threads)
    backends = [x for x in (backends or b.backends) if x in available_backends()]
    morph = get_morphology(cfg.env.morphology)
    actions = stream_rng(cfg.seed, BENCH_STREAM).uniform(-1, 1, (n_steps, n_envs, morph.n_actions))
    rows, ok = [], True
    for backend in backends:
        ref = None
        for n in threads:
            env = VecEnv(morph, cfg.task, cfg.physics, n_envs, seed=cfg.seed, mode=cfg.env.observation_mode,
                         stack_k=cfg.env.stack_k, backend=backend, n_threads=n)
            env.reset()
            env.step(actions[0])  # warm-up (thread pool start)
            t0 = time.perf_counter()
            for t in range(1, n_steps):
                env.step(actions[t])
            dt = time.perf_counter() - t0
            digest = _state_digest(env)
            env.close()
            ref = ref or digest
            same = digest == ref
            ok &= same
            steps = (n_steps - 1) * n_envs
            rows.append({"backend": backend, "threads": n, "env_steps_per_s": steps / dt,
                         "substeps_per_s": steps * cfg.physics.substeps_per_control / dt,
                         "digest": digest[:16], "match": same})
    return rows, ok


def format_bench(rows: list[dict]) -> str:
    head = f"{'backend':<9} {'threads':>7} {'ctrl steps/s':>14} {'substeps/s':>14}  digest            match"
    out = [head]
    for r in rows:
        out.append(f"{r['backend']:<9} {r['threads']:>7d} {r['env_steps_per_s']:>14,.0f} "
                   f"{r['substeps_per_s']:>14,.0f}  {r['digest']}  {'yes' if r['match'] else 'NO'}")
    return "\n".join(out)


# -- argument handling ----------------------------------------------------------------
def resolve_config(args) -> RunConfig:
    if args.config and args.preset:
        raise UsageError("use either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = get_preset(args.preset)
    else:
        cfg = get_preset("desk_paddle_bounce")
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = dataclasses.replace(cfg, threads=min(args.threads, max_threads()))
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    return cfg


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tactobench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--preset", help="named preset (see `tactobench presets`)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="physics worker threads")
        if out:
            sp.add_argument("--out", help="output directory")

    t = sub.add_parser("train", help="train a policy")
    common(t)
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--threads", type=int)
    e.add_argument("--json", action="store_true")
    s = sub.add_parser("sweep", help="hyperparameter sweep")
    common(s)
    b = sub.add_parser("bench", help="physics throughput and determinism check")
    common(b, out=False)
    b.add_argument("--thread-list", type=lambda s: [int(x) for x in s.split(",")])
    b.add_argument("--backend", action="append", choices=["compiled", "python"])
    b.add_argument("--envs", type=int)
    b.add_argument("--steps", type=int)
    b.add_argument("--json", action="store_true")
    sub.add_parser("presets", help="list preset names")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "presets":
            from .config import presets
            print("\n".join(sorted(presets())))
            return EXIT_OK
        if args.command == "eval":
            if args.threads is not None and args.threads < 1:
                raise UsageError("--threads must be >= 1")
            rep = eval_checkpoint(args.checkpoint, args.episodes, args.threads)
            print(json.dumps(rep, indent=2) if args.json else format_eval(rep))
            return EXIT_OK
        cfg = resolve_config(args)
        if args.command == "train":
            return train_run(cfg, cfg.output_dir, resume=args.resume)
        if args.command == "sweep":
            best, history = sweep_run(cfg, cfg.output_dir)
            if best is None:
                print("no successful trial", file=sys.stderr)
                return EXIT_RUNTIME
            print(f"best trial {best.index}: objective {best.objective:.2f} params {json.dumps(best.params)}")
            return EXIT_OK
        if args.command == "bench":
            rows, ok = bench(cfg, threads=args.thread_list, backends=args.backend,
                             n_envs=args.envs, n_steps=args.steps)
            print(json.dumps(rows, indent=2) if args.json else format_bench(rows))
            if not ok:
                print("determinism violation: final state differs across thread counts", file=sys.stderr)
                return EXIT_RUNTIME
            return EXIT_OK
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
