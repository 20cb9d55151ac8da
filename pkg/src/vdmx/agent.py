"""PPO actor-critic driven purely by intrinsic rewards."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .envs import Env, ObsNormalizer
from .ndcore import DTYPE, Adam, ConfigError, NonFiniteError, backward, dense

log = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    lr: float = 1e-4
    ent_coef: float = 1e-3
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    n_steps: int = 128
    n_actors: int = 8
    value_coef: float = 0.5
    hidden: int = 128

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ConfigError("ppo.gamma and ppo.lam must lie in [0, 1]")
        if self.clip <= 0:
            raise ConfigError("ppo.clip must be positive")
        if min(self.epochs, self.minibatches, self.n_steps, self.n_actors) < 1:
            raise ConfigError("ppo epochs, minibatches, n_steps and n_actors must be >= 1")


class PolicyNet(nn.Module):
    """Shared tanh trunk; softmax policy head and scalar value head.

    The policy head starts at zero so the initial policy is uniform.
    """

    def __init__(self, obs_dim: int, n_actions: int, hidden: int = 128):
        super().__init__()
        self.obs_dim, self.n_actions, self.hidden = obs_dim, n_actions, hidden
        self.trunk1 = dense(obs_dim, hidden)
        self.trunk2 = dense(hidden, hidden)
        self.pi = dense(hidden, n_actions)
        self.v = dense(hidden, 1)
        with torch.no_grad():
            self.pi.weight.zero_()

    def forward(self, obs: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = torch.tanh(self.trunk2(torch.tanh(self.trunk1(obs))))
        return self.pi(h), self.v(h).squeeze(-1)

    def arch(self) -> dict:
        return {"obs_dim": self.obs_dim, "n_actions": self.n_actions, "hidden": self.hidden}


@torch.no_grad()
def act(policy: PolicyNet, states, generator: Optional[torch.Generator] = None):
    """Sample actions for a batch of normalised states.

    Returns ``(actions, log_probs, values)`` as numpy arrays.
    """
    obs = torch.as_tensor(np.asarray(states), dtype=DTYPE)
    logits, value = policy(obs)
    logp_all = F.log_softmax(logits, -1)
    actions = torch.multinomial(logp_all.exp(), 1, generator=generator).squeeze(-1)
    logp = logp_all.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    return actions.numpy(), logp.numpy(), value.numpy()


@dataclass
class RolloutBatch:
    """T steps x N actors of experience.

    ``states`` are normalised observations fed to the policy; ``raw_states``
    and ``raw_next`` are what the dynamics models see (after normalisation by
    the same frozen normaliser). ``ext_rewards`` is the evaluation channel and
    is never read by any update.
    """

    states: np.ndarray
    next_states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray
    rewards: np.ndarray
    raw_rewards: np.ndarray
    ext_rewards: np.ndarray
    cells: list

    @property
    def shape(self) -> Tuple[int, int]:
        return self.actions.shape

    def flat_transitions(self):
        T, N = self.shape
        return (self.states.reshape(T * N, -1), self.actions.reshape(-1), self.next_states.reshape(T * N, -1))


class ActorPool:
    """N independent environments stepped in lock-step.

    With ``workers > 1`` the env steps of one time step run on a thread pool;
    each env owns its RNG so results do not depend on scheduling.
    """

    def __init__(self, envs: Sequence[Env], normalizer: ObsNormalizer, workers: int = 1):
        self.envs = list(envs)
        self.normalizer = normalizer
        self.workers = workers
        self._pool = ThreadPoolExecutor(workers) if workers > 1 else None
        self.obs = np.stack([normalizer(e.reset().state) for e in self.envs])
        self.episode_returns = np.zeros(len(self.envs))
        self.finished_returns: List[float] = []
        self.finished_episodes: List[dict] = []
        self.visited: set = set(e.cell() for e in self.envs)
        self.episode_count = 0

    def __len__(self):
        return len(self.envs)

    def _step_one(self, i_action):
        i, action = i_action
        env = self.envs[i]
        o = env.step(int(action))
        info = {"cell": env.cell(), "route": getattr(env, "route", None),
                "reached_goal": getattr(env, "reached_goal", None)}
        return o, info

    def step(self, actions):
        items = list(enumerate(actions))
        results = list(self._pool.map(self._step_one, items)) if self._pool else [self._step_one(x) for x in items]
        next_obs = np.empty_like(self.obs)
        dones = np.zeros(len(self.envs), dtype=bool)
        ext = np.zeros(len(self.envs))
        cells = []
        for i, (o, info) in enumerate(results):
            next_obs[i] = self.normalizer(o.state)
            dones[i] = o.episode_done
            ext[i] = o.extrinsic_reward
            cells.append(info["cell"])
            self.visited.add(info["cell"])
            self.episode_returns[i] += o.extrinsic_reward
            if o.episode_done:
                self.finished_returns.append(self.episode_returns[i])
                self.finished_episodes.append({"return": self.episode_returns[i], **info})
                self.episode_returns[i] = 0.0
                self.episode_count += 1
        return next_obs, dones, ext, cells

    def reset_done(self, dones):
        for i in np.flatnonzero(dones):
            self.obs[i] = self.normalizer(self.envs[i].reset().state)
            self.visited.add(self.envs[i].cell())

    def close(self):
        if self._pool:
            self._pool.shutdown()


def collect_rollouts(pool: ActorPool, policy: PolicyNet, T: int,
                     reward_fn: Optional[Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]],
                     generator: Optional[torch.Generator] = None) -> RolloutBatch:
    """Run T steps on every actor with a frozen policy snapshot.

    ``reward_fn(states, actions, next_states)`` scores all T*N transitions at
    once against a frozen model snapshot (identical to scoring them step by
    step, since nothing is updated in between). ``None`` gives zero rewards.
    Episodes auto-reset; the stored next state is the true successor.
    """
    N = len(pool)
    obs_dim = pool.obs.shape[1]
    states = np.empty((T, N, obs_dim))
    next_states = np.empty((T, N, obs_dim))
    actions = np.empty((T, N), dtype=np.int64)
    log_probs = np.empty((T, N))
    values = np.empty((T, N))
    dones = np.empty((T, N), dtype=bool)
    ext = np.empty((T, N))
    cells = []
    for t in range(T):
        a, lp, v = act(policy, pool.obs, generator)
        states[t] = pool.obs
        nxt, d, e, c = pool.step(a)
        if not np.isfinite(nxt).all():
            raise RuntimeError(f"environment produced non-finite state at step {t}")
        next_states[t] = nxt
        actions[t], log_probs[t], values[t], dones[t], ext[t] = a, lp, v, d, e
        cells.append(c)
        pool.obs = nxt.copy()
        pool.reset_done(d)
    _, _, last_v = act(policy, pool.obs, generator)
    if reward_fn is None:
        raw = np.zeros((T, N))
    else:
        flat = reward_fn(states.reshape(T * N, -1), actions.reshape(-1), next_states.reshape(T * N, -1))
        raw = np.asarray(flat, dtype=float).reshape(T, N)
    return RolloutBatch(states, next_states, actions, log_probs, values, dones, last_v,
                        raw.copy(), raw, ext, cells)


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, last_values: np.ndarray,
                gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates for (T, N) arrays.

    Reverse recursion A_t = delta_t + gamma*lam*(1-done_t)*A_{t+1} with
    delta_t = r_t + gamma*(1-done_t)*V_{t+1} - V_t. Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    nonterminal = 1.0 - np.asarray(dones, dtype=float)
    next_adv = np.zeros_like(rewards[0])
    next_value = np.asarray(last_values, dtype=float)
    for t in reversed(range(T)):
        delta = rewards[t] + gamma * nonterminal[t] * next_value - values[t]
        next_adv = delta + gamma * lam * nonterminal[t] * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: torch.Tensor) -> torch.Tensor:
    """Zero mean, unit (population) std within the given batch."""
    std = adv.std(unbiased=False) if adv.numel() > 1 else torch.ones((), dtype=adv.dtype)
    return (adv - adv.mean()) / torch.clamp(std, min=1e-8)


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, clip: float) -> torch.Tensor:
    """Per-sample min(r A, clip(r, 1-eps, 1+eps) A)."""
    return torch.min(ratio * adv, torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * adv)


def ppo_loss(policy: PolicyNet, obs, actions, old_logp, adv, returns, cfg: PpoConfig):
    logits, value = policy(obs)
    logp_all = F.log_softmax(logits, -1)
    logp = logp_all.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    ratio = torch.exp(logp - old_logp)
    adv = normalize_advantages(adv)
    policy_loss = -clipped_surrogate(ratio, adv, cfg.clip).mean()
    value_loss = ((value - returns) ** 2).mean()
    entropy = -(logp_all.exp() * logp_all).sum(-1).mean()
    loss = policy_loss + cfg.value_coef * value_loss - cfg.ent_coef * entropy
    with torch.no_grad():
        stats = {
            "clip_fraction": float(((ratio - 1.0).abs() > cfg.clip).double().mean()),
            "approx_kl": float((old_logp - logp).mean()),
            "entropy": float(entropy),
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
        }
    return loss, stats


def ppo_update(policy: PolicyNet, opt: Adam, batch: RolloutBatch, adv: np.ndarray, returns: np.ndarray,
               cfg: PpoConfig, generator: Optional[torch.Generator] = None) -> Dict[str, float]:
    """Clipped-surrogate epochs over shuffled minibatches. Returns averaged diagnostics."""
    T, N = batch.shape
    n = T * N
    obs = torch.as_tensor(batch.states.reshape(n, -1), dtype=DTYPE)
    actions = torch.as_tensor(batch.actions.reshape(-1), dtype=torch.long)
    old_logp = torch.as_tensor(batch.log_probs.reshape(-1), dtype=DTYPE)
    adv_t = torch.as_tensor(np.asarray(adv).reshape(-1), dtype=DTYPE)
    ret_t = torch.as_tensor(np.asarray(returns).reshape(-1), dtype=DTYPE)
    mb = max(1, n // cfg.minibatches)
    totals: Dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n, mb):
            idx = perm[start:start + mb]
            loss, stats = ppo_loss(policy, obs[idx], actions[idx], old_logp[idx], adv_t[idx], ret_t[idx], cfg)
            if not torch.isfinite(loss):
                log.warning("non-finite PPO loss; minibatch skipped")
                continue
            grads = backward(loss, policy)
            try:
                opt.step(grads)
            except NonFiniteError as exc:
                log.warning("PPO update skipped: %s", exc)
                continue
            for key, val in stats.items():
                totals[key] = totals.get(key, 0.0) + val
            count += 1
    return {k: v / max(count, 1) for k, v in totals.items()}
