"""Hyperparameter search: uniform warm-up trials, then a Parzen-estimator
good/bad density split.

The history is a JSON-lines file, one record per finished trial.  It is
rewritten through a temp file and renamed after every trial, so an interrupted
sweep resumes from the last complete record.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

KINDS = ("uniform", "loguniform", "choice")


@dataclass(frozen=True)
class Dimension:
    name: str
    kind: str
    low: float = 0.0
    high: float = 1.0
    choices: tuple = ()

    def validate(self) -> list[str]:
        if self.kind not in KINDS:
            return [f"{self.name}: kind must be one of {KINDS}"]
        if self.kind == "choice":
            return [] if len(self.choices) >= 1 else [f"{self.name}: empty choice list"]
        if not self.low < self.high:
            return [f"{self.name}: bounds must satisfy low < high"]
        if self.kind == "loguniform" and self.low <= 0:
            return [f"{self.name}: log-uniform bounds must be positive"]
        return []

    # continuous dims live on [0, 1] internally
    def to_unit(self, x) -> float:
        if self.kind == "uniform":
            return (x - self.low) / (self.high - self.low)
        if self.kind == "loguniform":
            return (math.log(x) - math.log(self.low)) / (math.log(self.high) - math.log(self.low))
        return float(self.choices.index(x))

    def from_unit(self, u: float):
        if self.kind == "uniform":
            return float(min(max(self.low + u * (self.high - self.low), self.low), self.high))
        if self.kind == "loguniform":
            v = math.exp(math.log(self.low) + u * (math.log(self.high) - math.log(self.low)))
            return float(min(max(v, self.low), self.high))
        return self.choices[int(u)]

    def contains(self, x) -> bool:
        if self.kind == "choice":
            return x in self.choices
        return self.low <= x <= self.high


DEFAULT_DIMENSIONS = (
    Dimension("learning_rate", "loguniform", 1e-5, 1e-3),
    Dimension("gamma", "uniform", 0.95, 0.999),
    Dimension("gae_lambda", "uniform", 0.9, 1.0),
    Dimension("clip_epsilon", "uniform", 0.1, 0.3),
    Dimension("entropy_coef", "loguniform", 1e-4, 1e-1),
    Dimension("rollout_horizon", "choice", choices=(16, 32, 64)),
    Dimension("n_minibatches", "choice", choices=(2, 4, 8)),
)


@dataclass(frozen=True)
class SearchSpace:
    dimensions: tuple[Dimension, ...] = DEFAULT_DIMENSIONS

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dimensions]

    def validate(self) -> list[str]:
        p = [] if len(self.dimensions) == 7 else [f"search space needs exactly 7 dimensions, got {len(self.dimensions)}"]
        for d in self.dimensions:
            p += d.validate()
        if len(set(self.names)) != len(self.names):
            p.append("duplicate dimension names")
        return p

    def contains(self, params: dict) -> bool:
        return all(d.contains(params[d.name]) for d in self.dimensions)

    def sample_uniform(self, rng: np.random.Generator) -> dict:
        out = {}
        for d in self.dimensions:
            if d.kind == "choice":
                out[d.name] = d.choices[int(rng.integers(len(d.choices)))]
            else:
                out[d.name] = d.from_unit(float(rng.random()))
        return out

    def override(self, overrides: dict) -> "SearchSpace":
        """Replace fields of named dimensions, e.g. ``{"gamma": {"low": 0.9}}``."""
        dims = []
        for d in self.dimensions:
            o = dict(overrides.get(d.name, {}))
            if "choices" in o:
                o["choices"] = tuple(o["choices"])
            dims.append(replace(d, **o))
        unknown = set(overrides) - set(self.names)
        if unknown:
            raise ValueError(f"unknown search dimensions: {sorted(unknown)}")
        return SearchSpace(tuple(dims))


@dataclass
class TrialRecord:
    index: int
    params: dict
    objective: float | None
    seed: int
    status: str  # "done" | "failed"
    warmup: bool = False
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        return cls(**json.loads(line))


def trial_rng(seed: int, index: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, 6], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=np.array([0, 0, 0, index], dtype=np.uint64)))


def _silverman(x: np.ndarray) -> float:
    n = len(x)
    sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
    # floor keeps a collapsed good set from turning into a delta spike
    return max(1.06 * sd * n ** (-0.2), 0.05)


def _log_kde(u: np.ndarray, pts: np.ndarray, bw: float) -> np.ndarray:
    z = (u[:, None] - pts[None, :]) / bw
    ll = -0.5 * z * z - math.log(bw * math.sqrt(2 * math.pi))
    m = ll.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(ll - m).sum(axis=1, keepdims=True)))[:, 0] - math.log(len(pts))


def _log_cat(idx: np.ndarray, pts: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(pts.astype(int), minlength=k) + 1.0
    return np.log(counts / counts.sum())[idx.astype(int)]


def sample_trial(history: list[TrialRecord], space: SearchSpace, rng: np.random.Generator,
                 n_warmup: int = 8, quantile: float = 0.25, n_candidates: int = 24) -> dict:
    """Parameters for trial ``len(history)``.

    The first ``n_warmup`` trials (and any trial whose history cannot be split
    into >= 2 good points with distinct objectives) are uniform draws.
    """
    if len(history) < n_warmup:
        return space.sample_uniform(rng)
    done = [h for h in history if h.status == "done" and h.objective is not None
            and math.isfinite(h.objective)]
    failed = [h for h in history if h not in done]
    objs = [h.objective for h in done]
    if len(done) < 2 or max(objs) == min(objs):
        return space.sample_uniform(rng)
    order = sorted(range(len(done)), key=lambda i: (-done[i].objective, done[i].index))
    n_good = max(2, int(math.ceil(quantile * len(done))))
    if n_good >= len(done) + len(failed):
        return space.sample_uniform(rng)
    good = [done[i] for i in order[:n_good]]
    bad = [done[i] for i in order[n_good:]] + failed

    cands = np.empty((n_candidates, len(space.dimensions)))
    score = np.zeros(n_candidates)
    for j, d in enumerate(space.dimensions):
        gp = np.array([d.to_unit(h.params[d.name]) for h in good])
        bp = np.array([d.to_unit(h.params[d.name]) for h in bad])
        if d.kind == "choice":
            k = len(d.choices)
            w = np.bincount(gp.astype(int), minlength=k) + 1.0
            c = rng.choice(k, size=n_candidates, p=w / w.sum()).astype(float)
            score += _log_cat(c, gp, k) - _log_cat(c, bp, k)
        else:
            bw_g, bw_b = _silverman(gp), _silverman(bp)
            centres = gp[rng.integers(len(gp), size=n_candidates)]
            c = np.clip(centres + bw_g * rng.standard_normal(n_candidates), 0.0, 1.0)
            score += _log_kde(c, gp, bw_g) - _log_kde(c, bp, bw_b)
        cands[:, j] = c
    best = int(np.argmax(score))
    return {d.name: d.from_unit(cands[best, j]) for j, d in enumerate(space.dimensions)}


def read_history(path: str | os.PathLike) -> list[TrialRecord]:
    """Parse complete records; a torn final line is ignored."""
    if not os.path.exists(path):
        return []
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                out.append(TrialRecord.from_json(line))
            except (ValueError, TypeError):
                break
    return out


def write_history(path: str | os.PathLike, history: list[TrialRecord]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w") as f:
        for h in history:
            f.write(h.to_json() + "\n")
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def best_trial(history: list[TrialRecord]) -> TrialRecord | None:
    done = [h for h in history if h.status == "done" and h.objective is not None]
    if not done:
        return None
    return max(done, key=lambda h: (h.objective, -h.index))


Objective = Callable[[dict, int, int], float]


def run_sweep(space: SearchSpace, objective: Objective, *, n_trials: int = 40, n_warmup: int = 8,
              seed: int = 0, history_path: str | os.PathLike | None = None,
              on_trial: Callable[[TrialRecord], None] | None = None) -> tuple[TrialRecord | None, list[TrialRecord]]:
    """Run trials sequentially; ``objective(params, seed, index)`` returns the score.

    Existing records in ``history_path`` are kept and not re-run.  A trial
    that raises is recorded as failed and the sweep continues.
    """
    problems = space.validate()
    if problems:
        raise ValueError("; ".join(problems))
    history = read_history(history_path) if history_path else []
    history = history[:n_trials]
    for i in range(len(history), n_trials):
        params = sample_trial(history, space, trial_rng(seed, i), n_warmup=n_warmup)
        trial_seed = seed * 1000 + i
        try:
            obj = float(objective(params, trial_seed, i))
            if not math.isfinite(obj):
                raise ValueError(f"objective is not finite: {obj}")
            rec = TrialRecord(i, params, obj, trial_seed, "done", warmup=i < n_warmup)
        except Exception as e:  # noqa: BLE001 - any trial crash is recorded, not fatal
            rec = TrialRecord(i, params, None, trial_seed, "failed", warmup=i < n_warmup,
                              error=f"{type(e).__name__}: {e}")
        history.append(rec)
        if history_path:
            write_history(history_path, history)
        if on_trial:
            on_trial(rec)
    return best_trial(history), history


def random_search(space: SearchSpace, objective: Objective, n_trials: int, seed: int) -> list[TrialRecord]:
    """Baseline: every trial uniform (a sweep with all trials as warm-up)."""
    return run_sweep(space, objective, n_trials=n_trials, n_warmup=n_trials, seed=seed)[1]
