"""Compiled vs pure-Python physics backend: throughput and agreement.

    python benchmarks/bench_physics.py --envs 64,1024 --steps 100
"""
import argparse
import time

import numpy as np

from tactobench.morphology import get_morphology
from tactobench.physics import PhysicsConfig, available_backends
from tactobench.env import VecEnv
from tactobench.tasks import TaskConfig


def run(morph, backend, n_envs, n_steps, threads):
    env = VecEnv(morph, TaskConfig("bounce"), PhysicsConfig(), n_envs, seed=0, backend=backend,
                 n_threads=threads)
    env.reset()
    acts = np.random.default_rng(0).uniform(-1, 1, (n_steps, n_envs, morph.n_actions))
    env.step(acts[0])
    t0 = time.perf_counter()
    for a in acts[1:]:
        env.step(a)
    dt = time.perf_counter() - t0
    state = env.world.ball_pos.copy(), env.world.q.copy()
    env.close()
    return (n_steps - 1) * n_envs / dt, state


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--hands", default="paddle,shadow")
    p.add_argument("--envs", default="64,1024")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    backends = available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the python backend is available")
    print(f"{'hand':<8} {'envs':>6} " + " ".join(f"{b + ' steps/s':>18}" for b in backends)
          + f" {'speedup':>8} {'max |diff|':>11}")
    for hand in args.hands.split(","):
        morph = get_morphology(hand)
        for n in (int(x) for x in args.envs.split(",")):
            rates, states = {}, {}
            for b in backends:
                rates[b], states[b] = run(morph, b, n, args.steps, args.threads)
            diff = speed = float("nan")
            if len(backends) == 2:
                speed = rates["compiled"] / rates["python"]
                diff = max(float(np.max(np.abs(x - y)))
                           for x, y in zip(states["compiled"], states["python"]))
            print(f"{hand:<8} {n:>6} " + " ".join(f"{rates[b]:>18,.0f}" for b in backends)
                  + f" {speed:>7.1f}x {diff:>11.1e}")


if __name__ == "__main__":
    main()
