"""Gaussian actor-critic on a shared encoder, with an optional
forward-dynamics auxiliary head.

Actions are ``tanh(u)`` with ``u ~ N(mean, exp(log_std))``.  The squashing
correction depends only on ``u``, so it cancels in PPO probability ratios;
the buffer keeps ``u`` and the Gaussian log-density.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MLP, Params, linear, linear_backward, linear_init

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class NetworkSpec:
    obs_dim: int
    act_dim: int
    hidden: tuple[int, ...] = (256, 256)
    activation: str = "elu"
    init_log_std: float = 0.0
    aux_enabled: bool = False
    aux_hidden: int = 64
    aux_target_dim: int = 0


@dataclass
class LossCoefs:
    clip_epsilon: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    aux_coef: float = 0.0


def gaussian_log_prob(u, mean, log_std):
    z = (u - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def squash_correction(u):
    """log |d tanh(u) / du| summed over action dims (numerically stable form)."""
    return np.sum(2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u)), axis=-1)


def gaussian_entropy(log_std) -> float:
    return float(np.sum(0.5 + 0.5 * LOG_2PI + log_std))


class ActorCritic:
    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.encoder = MLP("enc", [spec.obs_dim, *spec.hidden], spec.activation)
        h = spec.hidden[-1] if spec.hidden else spec.obs_dim
        self.feat_dim = h
        self.aux_mlp = MLP("aux", [h + spec.act_dim, spec.aux_hidden], spec.activation)

    def init_params(self, rng: np.random.Generator, aux_rng: np.random.Generator | None = None) -> Params:
        s = self.spec
        p: Params = {}
        self.encoder.init(p, rng)
        linear_init(p, "pi", self.feat_dim, s.act_dim, rng, gain=0.01)
        linear_init(p, "v", self.feat_dim, 1, rng)
        p["log_std"] = np.full(s.act_dim, s.init_log_std, dtype=np.float64)
        if s.aux_enabled:
            # own stream so enabling the head never shifts the other initial weights
            arng = aux_rng if aux_rng is not None else np.random.default_rng(0)
            self.aux_mlp.init(p, arng)
            linear_init(p, "aux_out", s.aux_hidden, s.aux_target_dim, arng)
        return p

    # -- inference -----------------------------------------------------------
    def forward(self, params: Params, obs: np.ndarray):
        feat, cache = self.encoder.forward(params, obs)
        mean = linear(params, "pi", feat)
        value = linear(params, "v", feat)[:, 0]
        log_std = np.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX)
        return {"feat": feat, "cache": cache, "mean": mean, "value": value, "log_std": log_std}

    def act(self, params: Params, obs: np.ndarray, rng: np.random.Generator | None):
        """Sample (or, with ``rng=None``, take the mean of) the pre-squash action."""
        out = self.forward(params, obs)
        mean, log_std = out["mean"], out["log_std"]
        if rng is None:
            u = mean
        else:
            u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return u, gaussian_log_prob(u, mean, log_std), out["value"]

    def value(self, params: Params, obs: np.ndarray) -> np.ndarray:
        return self.forward(params, obs)["value"]

    # -- training objective --------------------------------------------------
    def aux_predict(self, params: Params, feat, action):
        x = np.concatenate([feat, action], axis=1)
        h, cache = self.aux_mlp.forward(params, x)
        return linear(params, "aux_out", h), (x, h, cache)

    def loss_and_grads(self, params: Params, batch: dict, coefs: LossCoefs):
        """Clipped surrogate + value + entropy (+ aux) loss and its gradient.

        ``batch`` keys: obs, u, logp_old, adv, ret; for the aux term also
        act (squashed action), aux_target and aux_mask.
        """
        n = batch["obs"].shape[0]
        out = self.forward(params, batch["obs"])
        mean, log_std, value, feat = out["mean"], out["log_std"], out["value"], out["feat"]
        u, adv, ret = batch["u"], batch["adv"], batch["ret"]
        inv_std = np.exp(-log_std)
        z = (u - mean) * inv_std
        logp = np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)
        log_ratio = logp - batch["logp_old"]
        ratio = np.exp(log_ratio)
        eps = coefs.clip_epsilon
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
        surr1, surr2 = ratio * adv, clipped * adv
        policy_loss = -np.mean(np.minimum(surr1, surr2))
        value_loss = np.mean((value - ret) ** 2)
        entropy = gaussian_entropy(log_std)
        loss = policy_loss + coefs.value_coef * value_loss - coefs.entropy_coef * entropy

        grads: Params = {}
        # d policy_loss / d logp
        g_logp = -(adv * (surr1 <= surr2)) * ratio / n
        g_mean = g_logp[:, None] * z * inv_std
        g_log_std = np.sum(g_logp[:, None] * (z * z - 1.0), axis=0) - coefs.entropy_coef
        g_log_std = g_log_std * ((params["log_std"] >= LOG_STD_MIN) & (params["log_std"] <= LOG_STD_MAX))
        grads["log_std"] = g_log_std
        g_value = coefs.value_coef * 2.0 * (value - ret) / n
        g_feat = linear_backward(params, "pi", feat, g_mean, grads)
        g_feat = g_feat + linear_backward(params, "v", feat, g_value[:, None], grads)

        aux_loss = 0.0
        if self.spec.aux_enabled and coefs.aux_coef > 0.0:
            pred, (x, h, cache) = self.aux_predict(params, feat, batch["act"])
            mask = batch["aux_mask"].astype(np.float64)
            diff = (pred - batch["aux_target"]) * mask[:, None]
            denom = max(float(mask.sum()), 1.0) * pred.shape[1]
            aux_loss = float(np.sum(diff * diff) / denom)
            loss = loss + coefs.aux_coef * aux_loss
            g_pred = coefs.aux_coef * 2.0 * diff / denom
            g_h = linear_backward(params, "aux_out", h, g_pred, grads)
            g_x = self.aux_mlp.backward(params, cache, g_h, grads)
            g_feat = g_feat + g_x[:, : self.feat_dim]
        self.encoder.backward(params, out["cache"], g_feat, grads, need_input_grad=False)

        approx_kl = float(np.mean((ratio - 1.0) - log_ratio))
        stats = {
            "loss": float(loss), "policy_loss": float(policy_loss), "value_loss": float(value_loss),
            "entropy": entropy, "aux_loss": aux_loss, "approx_kl": approx_kl,
            "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
        }
        return float(loss), grads, stats


def aux_forward_dynamics_loss(pred: np.ndarray, next_frame_target: np.ndarray,
                              mask: np.ndarray | None = None) -> float:
    """Mean squared error of the predicted next proprioceptive block."""
    diff = np.asarray(pred, float) - np.asarray(next_frame_target, float)
    if mask is None:
        return float(np.mean(diff * diff))
    m = np.asarray(mask, float)
    return float(np.sum(diff * diff * m[:, None]) / (max(m.sum(), 1.0) * diff.shape[1]))
