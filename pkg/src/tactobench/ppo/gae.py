"""Generalised advantage estimation over time-major ``(T, n_envs)`` arrays."""
from __future__ import annotations

import numpy as np


def compute_gae(rewards, values, terminated, truncated, bootstrap, gamma: float, lam: float,
                final_values=None):
    """Return ``(advantages, returns)``.

    ``bootstrap`` is V(s_T) for the observation after the last stored step.
    At a truncated step the successor value comes from ``final_values[t]``
    (the value of the pre-reset observation) when given, otherwise from the
    stored ``values[t]``.  Terminated steps never bootstrap, and the
    recursion does not cross any episode boundary.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    term = np.asarray(terminated, dtype=bool)
    trunc = np.asarray(truncated, dtype=bool) & ~term
    T = r.shape[0]
    next_v = np.empty_like(v)
    next_v[:-1] = v[1:]
    next_v[-1] = np.asarray(bootstrap, dtype=np.float64)
    fv = v if final_values is None else np.asarray(final_values, dtype=np.float64)
    next_v = np.where(trunc, fv, next_v)
    delta = r + gamma * next_v * (~term) - v
    keep = gamma * lam * ~(term | trunc)
    adv = np.empty_like(v)
    acc = np.zeros(v.shape[1:])
    for t in range(T - 1, -1, -1):
        acc = delta[t] + keep[t] * acc
        adv[t] = acc
    return adv, adv + v
