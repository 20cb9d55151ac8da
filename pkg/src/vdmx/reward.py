"""Intrinsic rewards from the importance-weighted likelihood bound, and reward scaling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np
import torch

from .ndcore import ConfigError
from .vdm import VDM, TransitionBatch


@dataclass
class RewardConfig:
    k: int = 10
    normalize: bool = True
    gamma: float = 0.99

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"reward.k must be >= 1, got {self.k}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("reward discount must lie in [0, 1)")


def iw_bound(log_w: torch.Tensor) -> torch.Tensor:
    """-(logsumexp(log w) - log k) over the last axis."""
    k = log_w.shape[-1]
    return -(torch.logsumexp(log_w, dim=-1) - math.log(k))


@torch.no_grad()
def intrinsic_reward_k(model: VDM, t: TransitionBatch, k: int = 10,
                       generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Negated k-sample importance-weighted estimate of log p(s'|s,a), shape (B,).

    Latents are drawn from the posterior. For k = 1 this is the negated
    single-sample ELBO; it decreases towards -log p(s'|s,a) as k grows.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    return iw_bound(model.log_weights(t, k, generator))


@torch.no_grad()
def nested_rewards(model: VDM, t: TransitionBatch, ks: Iterable[int],
                   generator: Optional[torch.Generator] = None) -> Dict[int, torch.Tensor]:
    """r_k for several k from one shared draw, using the first k samples for each.

    Common random numbers make the differences r_m - r_k far less noisy than
    independent draws would.
    """
    ks = sorted(set(ks))
    if ks[0] < 1:
        raise ConfigError("all k must be >= 1")
    log_w = model.log_weights(t, ks[-1], generator)
    return {k: iw_bound(log_w[:, :k]) for k in ks}


class RunningMeanStd:
    """Streaming mean/variance with batched (Chan et al.) merges."""

    def __init__(self):
        self.mean = 0.0
        self.var = 0.0
        self.count = 0

    def update(self, x: np.ndarray):
        x = np.asarray(x, dtype=float).ravel()
        if x.size == 0:
            return
        b_mean, b_var, b_n = x.mean(), x.var(), x.size
        n = self.count + b_n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * b_n + delta * delta * self.count * b_n / n
        self.mean += delta * b_n / n
        self.var = m2 / n
        self.count = n

    @property
    def std(self) -> float:
        return math.sqrt(max(self.var, 0.0))


class RunningRewardStd:
    """Per-actor discounted reward sums and the running std of those sums.

    Accumulators reset after an episode boundary. Rewards are divided by the
    running std, floored at 1e-8.
    """

    def __init__(self, n_actors: int, gamma: float = 0.99):
        if not 0.0 <= gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        self.gamma = gamma
        self.acc = np.zeros(n_actors)
        self.stats = RunningMeanStd()

    @property
    def divisor(self) -> float:
        return max(self.stats.std, 1e-8)

    def state_dict(self) -> dict:
        return {"acc": self.acc.tolist(), "mean": self.stats.mean, "var": self.stats.var, "count": self.stats.count}

    def load_state_dict(self, d: dict):
        self.acc = np.array(d["acc"], dtype=float)
        self.stats.mean, self.stats.var, self.stats.count = d["mean"], d["var"], d["count"]


def normalize_rewards(raw: np.ndarray, dones: np.ndarray, state: RunningRewardStd) -> np.ndarray:
    """Scale a (T, N) block of rewards by the running std of discounted sums.

    The statistics are updated with the whole block before dividing, so one
    call is one normalisation step of the rollout loop.
    """
    raw = np.asarray(raw, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    flat = raw.ndim == 1
    if flat:
        raw, dones = raw[:, None], dones[:, None]
    sums = np.empty_like(raw)
    for t in range(raw.shape[0]):
        state.acc = state.gamma * state.acc + raw[t]
        sums[t] = state.acc
        state.acc = np.where(dones[t], 0.0, state.acc)
    state.stats.update(sums)
    out = raw / state.divisor
    return out[:, 0] if flat else out
