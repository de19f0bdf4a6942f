"""Synchronous PPO: collect a fixed horizon from the training batch, then
update; evaluation runs on its own env batch with frozen statistics."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..env import EVAL_STREAM, TRAIN_STREAM, VecEnv
from ..morphology import MorphologyConfig
from ..physics import PhysicsConfig
from ..tasks import TaskConfig
from .buffer import RolloutBuffer
from .nn import Adam, global_norm
from .normalizer import RunningNormState
from .policy import ActorCritic, LossCoefs, NetworkSpec

log = logging.getLogger(__name__)

# Philox key stream ids; 0 and 1 belong to the train/eval env resets
ACTION_STREAM, INIT_STREAM, AUX_INIT_STREAM, SHUFFLE_STREAM = 2, 3, 4, 5


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class PPOHyperparams:
    learning_rate: float = 3e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    rollout_horizon: int = 32
    n_epochs: int = 5
    n_minibatches: int = 4
    max_grad_norm: float = 1.0
    kl_target: float = 0.01
    aux_coef: float = 0.0
    # toggles for the individual tricks
    normalize_advantages: bool = True
    normalize_observations: bool = True
    clip_gradients: bool = True
    lr_min: float = 1e-6
    lr_max: float = 1e-2
    reward_scale: float = 1.0
    obs_clip: float = 5.0

    def validate(self, n_envs: int | None = None) -> list[str]:
        p = []
        if not (0 < self.gamma <= 1) or not (0 <= self.gae_lambda <= 1):
            p.append("gamma must be in (0, 1] and gae_lambda in [0, 1]")
        if self.learning_rate <= 0 or self.clip_epsilon <= 0 or self.value_coef <= 0:
            p.append("learning_rate, clip_epsilon and value_coef must be positive")
        if self.entropy_coef < 0 or self.kl_target < 0 or self.aux_coef < 0:
            p.append("entropy_coef, kl_target and aux_coef must be >= 0")
        if self.max_grad_norm <= 0:
            p.append("max_grad_norm must be positive")
        if self.rollout_horizon < 1 or self.n_epochs < 1 or self.n_minibatches < 1:
            p.append("rollout_horizon, n_epochs and n_minibatches must be >= 1")
        if n_envs is not None and (self.rollout_horizon * n_envs) % self.n_minibatches:
            p.append(f"n_minibatches={self.n_minibatches} does not divide "
                     f"rollout_horizon*n_envs={self.rollout_horizon * n_envs}")
        return p


@dataclass(frozen=True)
class NetworkConfig:
    hidden: tuple[int, ...] = (256, 256)
    activation: str = "elu"
    init_log_std: float = 0.0
    aux_enabled: bool = False
    aux_hidden: int = 64


def proprio_slice(morph: MorphologyConfig, frame_width: int, stack_k: int) -> slice:
    """Columns of the newest frame holding q, qdot, command error and last action."""
    base = (stack_k - 1) * frame_width
    return slice(base + morph.n_tactile, base + morph.frame_width)


@dataclass
class EvalResult:
    mean_return: float
    std_return: float
    mean_bounces: float
    mean_switches: float
    n_episodes: int
    returns: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def mean_rotations(self) -> float:
        return self.mean_switches / 2.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("returns")
        d["mean_rotations"] = self.mean_rotations
        return d


def evaluate_policy(env: VecEnv, policy: ActorCritic, params, norm: RunningNormState | None,
                    n_episodes: int, action_fn=None) -> EvalResult:
    """Run deterministic (mean) actions until ``n_episodes`` have completed.

    Env ``i`` contributes its first ``n_episodes // n_envs (+1 for the first
    n_episodes % n_envs envs)`` episodes, so short (failed) episodes are not
    over-represented.  ``action_fn(obs) -> actions`` overrides the policy.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    n = env.n_envs
    quota = np.full(n, n_episodes // n, dtype=np.int64)
    quota[: n_episodes % n] += 1
    got = np.zeros(n, dtype=np.int64)
    rets, bounces, switches = [], [], []
    frozen_before = None
    if norm is not None:
        frozen_before, norm.frozen = norm.frozen, True
    try:
        # every evaluation replays the same episode indices, so scores are comparable
        env.episode[:] = 0
        obs = env.reset()
        while (got < quota).any():
            if action_fn is not None:
                act = action_fn(obs)
            else:
                x = norm.normalize(obs) if norm is not None else obs
                u, _, _ = policy.act(params, x, None)
                act = np.tanh(u)
            res = env.step(act)
            obs = res.observations
            done = np.flatnonzero(res.info["done"])
            for j, i in enumerate(done):
                if got[i] < quota[i]:
                    rets.append(res.info["episode_return"][j])
                    bounces.append(res.info["episode_bounces"][j])
                    switches.append(res.info["episode_switches"][j])
                    got[i] += 1
    finally:
        if norm is not None:
            norm.frozen = frozen_before
    r = np.asarray(rets, dtype=np.float64)
    return EvalResult(float(r.mean()), float(r.std()), float(np.mean(bounces)),
                      float(np.mean(switches)), len(r), r)


class PPOTrainer:
    """Owns both env batches, the network, optimiser, normaliser and RNG streams."""

    def __init__(self, morph: MorphologyConfig, task: TaskConfig, physics: PhysicsConfig,
                 hp: PPOHyperparams, net: NetworkConfig, *, n_train: int, n_eval: int, seed: int,
                 mode: str = "blind", stack_k: int = 4, env_kwargs: dict | None = None,
                 backend: str | None = None, n_threads: int = 1):
        problems = hp.validate(n_train)
        if problems:
            raise ValueError("; ".join(problems))
        ek = env_kwargs or {}
        self.morph, self.task, self.hp, self.net, self.seed = morph, task, hp, net, seed
        self.train_env = VecEnv(morph, task, physics, n_train, seed=seed, stream=TRAIN_STREAM, mode=mode,
                                stack_k=stack_k, backend=backend, n_threads=n_threads, **ek)
        self.eval_env = VecEnv(morph, task, physics, n_eval, seed=seed, stream=EVAL_STREAM, mode=mode,
                               stack_k=stack_k, backend=backend, n_threads=n_threads, **ek)
        obs_dim = self.train_env.obs_width
        self.aux_cols = proprio_slice(morph, self.train_env.frame_width, stack_k)
        aux_dim = self.aux_cols.stop - self.aux_cols.start
        self.spec = NetworkSpec(obs_dim, morph.n_actions, tuple(net.hidden), net.activation,
                                net.init_log_std, net.aux_enabled, net.aux_hidden, aux_dim)
        self.policy = ActorCritic(self.spec)
        self.params = self.policy.init_params(stream_rng(seed, INIT_STREAM),
                                              stream_rng(seed, AUX_INIT_STREAM))
        self.opt = Adam(self.params, hp.learning_rate)
        self.norm = RunningNormState(obs_dim, clip=hp.obs_clip)
        self.act_rng = stream_rng(seed, ACTION_STREAM)
        self.shuffle_rng = stream_rng(seed, SHUFFLE_STREAM)
        self.buffer = RolloutBuffer(hp.rollout_horizon, n_train, obs_dim, morph.n_actions, aux_dim)
        self.obs: np.ndarray | None = None
        self.iteration = 0
        self.env_steps = 0
        self.samples_consumed = 0
        self.incidents: list[dict] = []

    # -- helpers -------------------------------------------------------------
    def _norm(self, obs: np.ndarray) -> np.ndarray:
        return self.norm.normalize(obs) if self.hp.normalize_observations else obs

    def coefs(self) -> LossCoefs:
        hp = self.hp
        return LossCoefs(hp.clip_epsilon, hp.value_coef, hp.entropy_coef,
                         hp.aux_coef if self.net.aux_enabled else 0.0)

    # -- collection ----------------------------------------------------------
    def collect(self) -> dict:
        hp, env, buf, pol = self.hp, self.train_env, self.buffer, self.policy
        if self.obs is None:
            self.obs = env.reset()
        buf.clear()
        ep_returns, ep_bounces, ep_switches = [], [], []
        for _ in range(hp.rollout_horizon):
            if hp.normalize_observations:
                self.norm.update(self.obs)
            x = self._norm(self.obs)
            u, logp, v = pol.act(self.params, x, self.act_rng)
            act = np.tanh(u)
            res = env.step(act)
            done = res.info["done"]
            final_v = np.zeros(env.n_envs)
            if done.any():
                final_v[done] = pol.value(self.params, self._norm(res.info["final_observation"]))
                ep_returns.extend(res.info["episode_return"].tolist())
                ep_bounces.extend(res.info["episode_bounces"].tolist())
                ep_switches.extend(res.info["episode_switches"].tolist())
            nxt = self._norm(res.observations)
            buf.add(obs=x, u=u, act=act, logp=logp, values=v, rewards=res.rewards * hp.reward_scale,
                    terminated=res.terminated, truncated=res.truncated, final_values=final_v,
                    aux_target=nxt[:, self.aux_cols], aux_mask=~done)
            self.obs = res.observations
        buf.bootstrap[...] = pol.value(self.params, self._norm(self.obs))
        self.env_steps += buf.n_samples
        return {
            "train_episodes": len(ep_returns),
            "train_return": float(np.mean(ep_returns)) if ep_returns else float("nan"),
            "train_bounces": float(np.mean(ep_bounces)) if ep_bounces else float("nan"),
            "train_switches": float(np.mean(ep_switches)) if ep_switches else float("nan"),
        }

    # -- update --------------------------------------------------------------
    def ppo_update(self) -> dict:
        hp, buf = self.hp, self.buffer
        adv, ret = buf.advantages(hp.gamma, hp.gae_lambda)
        adv, ret = adv.reshape(-1), ret.reshape(-1)
        if hp.normalize_advantages:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        data = {k: buf.flat(k) for k in ("obs", "u", "act", "aux_target", "aux_mask")}
        data["logp_old"] = buf.flat("logp")
        data["adv"], data["ret"] = adv, ret
        B = buf.n_samples
        mb = B // hp.n_minibatches
        coefs = self.coefs()
        snap_params = {k: v.copy() for k, v in self.params.items()}
        snap_opt = self.opt.snapshot()
        totals: dict[str, float] = {}
        n_mb = 0
        aborted = False
        consumed = 0
        for epoch in range(hp.n_epochs):
            perm = self.shuffle_rng.permutation(B)
            kls = []
            for m in range(hp.n_minibatches):
                idx = perm[m * mb:(m + 1) * mb]
                batch = {k: v[idx] for k, v in data.items()}
                loss, grads, stats = self.policy.loss_and_grads(self.params, batch, coefs)
                gn = global_norm(grads)
                if not (np.isfinite(loss) and np.isfinite(gn)):
                    aborted = True
                    break
                if hp.clip_gradients and gn > hp.max_grad_norm:
                    s = hp.max_grad_norm / (gn + 1e-12)
                    grads = {k: g * s for k, g in grads.items()}
                self.opt.step(self.params, grads)
                consumed += idx.size
                stats["grad_norm"] = gn
                for k, v in stats.items():
                    totals[k] = totals.get(k, 0.0) + v
                n_mb += 1
                kls.append(stats["approx_kl"])
            if aborted:
                break
            if hp.kl_target > 0:
                kl = float(np.mean(kls))
                if kl > 2.0 * hp.kl_target:
                    self.opt.lr = max(self.opt.lr / 2.0, hp.lr_min)
                elif kl < hp.kl_target / 2.0:
                    self.opt.lr = min(self.opt.lr * 2.0, hp.lr_max)
        if aborted:
            self.params.clear()
            self.params.update(snap_params)
            self.opt.restore(snap_opt)
            incident = {"iteration": self.iteration, "event": "non_finite_loss_rollback"}
            self.incidents.append(incident)
            log.warning("non-finite loss at iteration %d; update rolled back", self.iteration)
            consumed = 0
        out = {k: v / max(n_mb, 1) for k, v in totals.items()}
        out["rolled_back"] = aborted
        out["learning_rate"] = self.opt.lr
        out["samples_per_epoch"] = B
        self.samples_consumed += consumed
        buf.clear()
        return out

    def train_iteration(self) -> dict:
        rec = self.collect()
        rec.update(self.ppo_update())
        self.iteration += 1
        rec["iteration"] = self.iteration
        rec["env_steps"] = self.env_steps
        return rec

    def evaluate(self, n_episodes: int | None = None) -> EvalResult:
        return evaluate_policy(self.eval_env, self.policy, self.params,
                               self.norm if self.hp.normalize_observations else None,
                               n_episodes or self.eval_env.n_envs)

    # -- persistence ---------------------------------------------------------
    def state(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {f"params.{k}": v for k, v in self.params.items()}
        arrays.update({f"adam.{k}": v for k, v in self.opt.state_arrays().items()})
        arrays.update({f"norm.{k}": v for k, v in self.norm.state_arrays().items()})
        arrays.update({f"train_env.{k}": v for k, v in self.train_env.state_arrays().items()})
        arrays.update({f"eval_env.{k}": v for k, v in self.eval_env.state_arrays().items()})
        if self.obs is not None:
            arrays["obs"] = self.obs
        meta = {
            "iteration": self.iteration, "env_steps": self.env_steps,
            "samples_consumed": self.samples_consumed,
            "rng": {"action": _rng_state(self.act_rng), "shuffle": _rng_state(self.shuffle_rng)},
            "incidents": self.incidents,
        }
        return arrays, meta

    def load_state(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        groups: dict[str, dict[str, np.ndarray]] = {}
        for k, v in arrays.items():
            head, _, rest = k.partition(".")
            groups.setdefault(head, {})[rest] = v
        if set(groups.get("params", {})) != set(self.params):
            raise ValueError("checkpoint network does not match the configured architecture")
        for k, v in groups["params"].items():
            self.params[k] = np.array(v, dtype=np.float64)
        self.opt.load_state_arrays(groups["adam"])
        self.norm.load_state_arrays(groups["norm"])
        self.train_env.load_state_arrays(groups["train_env"])
        self.eval_env.load_state_arrays(groups["eval_env"])
        self.obs = np.array(arrays["obs"]) if "obs" in arrays else None
        self.iteration, self.env_steps = int(meta["iteration"]), int(meta["env_steps"])
        self.samples_consumed = int(meta["samples_consumed"])
        self.act_rng.bit_generator.state = _rng_from_json(meta["rng"]["action"])
        self.shuffle_rng.bit_generator.state = _rng_from_json(meta["rng"]["shuffle"])
        self.incidents = list(meta.get("incidents", []))

    def close(self) -> None:
        self.train_env.close()
        self.eval_env.close()


def _rng_state(rng: np.random.Generator) -> dict:
    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return {"__array__": x.dtype.str, "data": [int(i) for i in x.ravel()]}
        return int(x) if isinstance(x, (np.integer,)) else x
    return conv(rng.bit_generator.state)


def _rng_from_json(d: dict) -> dict:
    def conv(x):
        if isinstance(x, dict):
            if "__array__" in x:
                return np.array(x["data"], dtype=np.dtype(x["__array__"]))
            return {k: conv(v) for k, v in x.items()}
        return x
    return conv(d)
