"""Small synthetic MDPs with known dynamics.

Three environments share one interface: ``reset()`` and ``step(action)`` both
return an :class:`EnvObservation`. The extrinsic reward travels on its own
field and is only read by evaluation and logging code.

* ``NoisyDigits``: vector analog of the Noisy-MNIST chain. A one-hot class
  block followed by a Gaussian style block; class 0 always moves to 1, class
  1 moves uniformly to 2..9 and 2..9 return to 0. Exact log-likelihoods are
  available through :func:`oracle_logprob`.
* ``TwoRoads``: 7x7 grid where a wall splits the way to the goal into a
  left and a right corridor.
* ``StochGrid``: 21x21 grid with slippery moves and a 5x5 region that
  teleports the agent to a uniformly random cell of the region.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .ndcore import ConfigError, UsageError

IMPOSSIBLE_LOGPROB = -1e9


class UnsupportedOperation(NotImplementedError):
    pass


@dataclass
class EnvObservation:
    state: np.ndarray
    episode_done: bool
    extrinsic_reward: float = 0.0


@dataclass(frozen=True)
class ActionSpec:
    kind: str
    n: int

    def __post_init__(self):
        if self.kind == "discrete" and self.n < 2:
            raise ConfigError("discrete action spaces need at least 2 actions")
        if self.kind == "continuous" and self.n < 1:
            raise ConfigError("continuous action spaces need dim >= 1")
        if self.kind not in ("discrete", "continuous"):
            raise ConfigError(f"unknown action kind {self.kind!r}")

    def contains(self, action) -> bool:
        if self.kind == "discrete":
            return isinstance(action, (int, np.integer)) and 0 <= int(action) < self.n
        return np.shape(action) == (self.n,)


class Env:
    """Base class. Subclasses implement ``_reset`` and ``_step``."""

    name = "env"
    action_spec: ActionSpec
    obs_dim: int
    max_steps: int
    oracle = False

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.done = True

    def reset(self) -> EnvObservation:
        self.t = 0
        self.done = False
        return EnvObservation(self._reset(), False, 0.0)

    def step(self, action) -> EnvObservation:
        if self.done:
            raise UsageError("step() called on a finished episode; call reset() first")
        if not self.action_spec.contains(action):
            raise ConfigError(f"invalid action {action!r} for {self.action_spec}")
        state, reward, terminal = self._step(int(action))
        self.t += 1
        self.done = bool(terminal or self.t >= self.max_steps)
        return EnvObservation(state, self.done, float(reward))

    def cell(self):
        """Discretised current state used for coverage counting."""
        raise NotImplementedError

    def _reset(self) -> np.ndarray:
        raise NotImplementedError

    def _step(self, action: int) -> Tuple[np.ndarray, float, bool]:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# NoisyDigits


@dataclass(frozen=True)
class NoisyDigitsConfig:
    num_classes: int = 10
    style_dim: int = 6
    style_std: float = 0.3
    # Gaussian jitter on the class block; 0 keeps it exactly one-hot.
    class_jitter: float = 0.0
    episode_length: int = 50

    def __post_init__(self):
        if self.num_classes != 10:
            raise ConfigError("NoisyDigits uses exactly 10 classes")
        if self.style_dim < 1 or self.style_std <= 0 or self.class_jitter < 0:
            raise ConfigError("style_dim >= 1, style_std > 0 and class_jitter >= 0 required")

    @property
    def state_dim(self) -> int:
        return self.num_classes + self.style_dim


def digit_transition_probs(cls: int) -> np.ndarray:
    """Next-class distribution of the Noisy-Digits chain."""
    p = np.zeros(10)
    if cls == 0:
        p[1] = 1.0
    elif cls == 1:
        p[2:] = 1.0 / 8.0
    else:
        p[0] = 1.0
    return p


class NoisyDigits(Env):
    name = "noisydigits"
    oracle = True

    def __init__(self, config: NoisyDigitsConfig = NoisyDigitsConfig(), seed: int = 0):
        super().__init__(seed)
        self.config = config
        # action is ignored by the dynamics
        self.action_spec = ActionSpec("discrete", 2)
        self.obs_dim = config.state_dim
        self.max_steps = config.episode_length
        self.cls = 0

    def render_state(self, cls: int) -> np.ndarray:
        c = self.config
        block = np.zeros(c.num_classes)
        block[cls] = 1.0
        if c.class_jitter > 0:
            block = block + c.class_jitter * self.rng.standard_normal(c.num_classes)
        style = c.style_std * self.rng.standard_normal(c.style_dim)
        return np.concatenate([block, style])

    def _reset(self):
        self.cls = 0
        return self.render_state(0)

    def _step(self, action):
        self.cls = int(self.rng.choice(10, p=digit_transition_probs(self.cls)))
        return self.render_state(self.cls), 0.0, False

    def cell(self):
        return self.cls

    def class_of(self, state: np.ndarray) -> int:
        return int(np.argmax(state[..., : self.config.num_classes]))


def _normal_logpdf(x: np.ndarray, mean, std: float) -> float:
    u = (x - mean) / std
    return float(np.sum(-0.5 * math.log(2 * math.pi) - math.log(std) - 0.5 * u * u))


def oracle_logprob(env: Env, s: np.ndarray, a, s_next: np.ndarray) -> float:
    """Exact log p(s'|s,a) for oracle-equipped environments.

    With an exactly one-hot class block this is ``log P(class'|class)`` plus the
    style density (a mixed discrete/continuous likelihood). With class jitter
    the class block is continuous and the class term becomes a mixture
    density over the reachable classes. Impossible transitions return
    ``IMPOSSIBLE_LOGPROB``.
    """
    if not getattr(env, "oracle", False):
        raise UnsupportedOperation(f"{env.name} has no likelihood oracle")
    c = env.config
    s = np.asarray(s, dtype=float)
    s_next = np.asarray(s_next, dtype=float)
    probs = digit_transition_probs(int(np.argmax(s[: c.num_classes])))
    style_term = _normal_logpdf(s_next[c.num_classes:], 0.0, c.style_std)
    block = s_next[: c.num_classes]
    if c.class_jitter == 0:
        p = probs[int(np.argmax(block))]
        if p == 0 or not np.array_equal(block, np.eye(10)[int(np.argmax(block))]):
            return IMPOSSIBLE_LOGPROB
        return math.log(p) + style_term
    terms = [math.log(p) + _normal_logpdf(block, np.eye(10)[j], c.class_jitter)
             for j, p in enumerate(probs) if p > 0]
    m = max(terms)
    return m + math.log(sum(math.exp(t - m) for t in terms)) + style_term


def oracle_class_logprobs(env: NoisyDigits, s: np.ndarray) -> np.ndarray:
    """Log-probabilities of all 10 next classes (IMPOSSIBLE_LOGPROB for zeros)."""
    if not getattr(env, "oracle", False):
        raise UnsupportedOperation(f"{env.name} has no likelihood oracle")
    probs = digit_transition_probs(env.class_of(np.asarray(s)))
    with np.errstate(divide="ignore"):
        out = np.log(probs)
    out[probs == 0] = IMPOSSIBLE_LOGPROB
    return out


# ---------------------------------------------------------------------------
# grid worlds

MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])  # up, down, left, right


class GridEnv(Env):
    """Agent position on a rows x cols grid, observed as a one-hot image."""

    rows: int
    cols: int

    def __init__(self, seed: int = 0):
        super().__init__(seed)
        self.action_spec = ActionSpec("discrete", 4)
        self.pos = (0, 0)
        self.blocked: set = set()

    @property
    def obs_dim(self) -> int:
        return self.rows * self.cols

    def observe(self) -> np.ndarray:
        obs = np.zeros(self.rows * self.cols)
        obs[self.pos[0] * self.cols + self.pos[1]] = 1.0
        return obs

    def target(self, pos, direction: int):
        r, c = pos[0] + MOVES[direction][0], pos[1] + MOVES[direction][1]
        if 0 <= r < self.rows and 0 <= c < self.cols and (r, c) not in self.blocked:
            return (int(r), int(c))
        return pos

    def cell(self):
        return self.pos


class TwoRoads(GridEnv):
    """7x7 grid; a wall block over columns 1-5 of rows 1-5 leaves two one-cell roads.

    ``route`` records the side ('left' or 'right') on which the agent last
    crossed the walled rows; ``reached_goal`` is set when the goal is hit.
    """

    name = "tworoads"
    rows = cols = 7
    start = (6, 3)
    goal = (0, 3)

    def __init__(self, seed: int = 0, max_steps: int = 100):
        super().__init__(seed)
        self.max_steps = max_steps
        self.blocked = {(r, c) for r in range(1, 6) for c in range(1, 6)}
        self.route: Optional[str] = None
        self.reached_goal = False

    def _reset(self):
        self.pos = self.start
        self.route = None
        self.reached_goal = False
        return self.observe()

    def _step(self, action):
        self.pos = self.target(self.pos, action)
        if 1 <= self.pos[0] <= 5:
            self.route = "left" if self.pos[1] < 3 else "right"
        if self.pos == self.goal:
            self.reached_goal = True
            return self.observe(), 1.0, True
        return self.observe(), 0.0, False


class StochGrid(GridEnv):
    """21x21 slippery grid with a teleporting region.

    The intended move happens with probability ``p_success``; otherwise one of
    the other three directions is taken uniformly. A move whose destination
    lies in the stochastic region lands on a uniformly random region cell.
    The evaluation reward is 1 for each cell visited for the first time in
    the episode.
    """

    name = "stochgrid"
    rows = cols = 21

    def __init__(self, seed: int = 0, max_steps: int = 200, p_success: float = 0.8,
                 start: Tuple[int, int] = (10, 10), region: Tuple[int, int] = (12, 12),
                 region_size: int = 5):
        super().__init__(seed)
        self.max_steps = max_steps
        self.p_success = p_success
        self.start = tuple(start)
        r0, c0 = region
        self.region_cells = [(r, c) for r in range(r0, r0 + region_size) for c in range(c0, c0 + region_size)]
        self.region = set(self.region_cells)
        if self.start in self.region:
            raise ConfigError("start cell must lie outside the stochastic region")
        self.visited: set = set()
        self.last_intended = -1
        self.last_direction = -1

    def _reset(self):
        self.pos = self.start
        self.visited = {self.pos}
        return self.observe()

    def _step(self, action):
        if self.rng.random() < self.p_success:
            direction = action
        else:
            others = [d for d in range(4) if d != action]
            direction = others[int(self.rng.integers(3))]
        self.last_intended, self.last_direction = action, direction
        nxt = self.target(self.pos, direction)
        if nxt in self.region:
            nxt = self.region_cells[int(self.rng.integers(len(self.region_cells)))]
        self.pos = nxt
        reward = 0.0 if nxt in self.visited else 1.0
        self.visited.add(nxt)
        return self.observe(), reward, False


# ---------------------------------------------------------------------------
# wrappers


class Wrapper(Env):
    def __init__(self, env: Env):
        self.env = env
        self.action_spec = env.action_spec
        self.obs_dim = env.obs_dim
        self.max_steps = env.max_steps
        self.name = env.name
        self.oracle = env.oracle

    def __getattr__(self, item):
        return getattr(self.env, item)

    @property
    def done(self):
        return self.env.done

    def cell(self):
        return self.env.cell()

    def reset(self):
        return self.env.reset()

    def step(self, action):
        return self.env.step(action)


class StickyActions(Wrapper):
    """Repeat the previously executed action with probability ``tau``."""

    def __init__(self, env: Env, tau: float, seed: int = 0):
        if not 0.0 <= tau <= 1.0:
            raise ConfigError(f"sticky probability must lie in [0, 1], got {tau}")
        if env.action_spec.kind != "discrete":
            raise ConfigError("sticky actions need a discrete action space")
        super().__init__(env)
        self.tau = tau
        self.sticky_rng = np.random.default_rng(seed)
        self.last_executed: Optional[int] = None

    def reset(self):
        self.last_executed = None
        return self.env.reset()

    def step(self, action):
        executed = int(action)
        if self.last_executed is not None and self.sticky_rng.random() < self.tau:
            executed = self.last_executed
        self.last_executed = executed
        return self.env.step(executed)


def sticky_wrap(env: Env, tau: float, seed: int = 0) -> StickyActions:
    return StickyActions(env, tau, seed)


class ZeroExtrinsic(Wrapper):
    """Replaces the evaluation channel with zeros (used to prove training ignores it)."""

    def reset(self):
        obs = self.env.reset()
        obs.extrinsic_reward = 0.0
        return obs

    def step(self, action):
        obs = self.env.step(action)
        obs.extrinsic_reward = 0.0
        return obs


# ---------------------------------------------------------------------------
# observation normalisation


@dataclass
class ObsNormalizer:
    """Frozen per-dimension standardiser fitted from a random pre-run.

    Outputs are clipped to ``[-clip, clip]`` so rarely seen dimensions (whose
    std is floored) stay bounded.
    """

    mean: np.ndarray
    std: np.ndarray
    count: int
    clip: Optional[float] = 5.0

    def __post_init__(self):
        self.mean = np.array(self.mean, dtype=float)
        self.std = np.maximum(np.array(self.std, dtype=float), 1e-6)
        self.mean.setflags(write=False)
        self.std.setflags(write=False)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = (np.asarray(x, dtype=float) - self.mean) / self.std
        if self.clip is not None:
            out = np.clip(out, -self.clip, self.clip)
        return out

    @classmethod
    def identity(cls, dim: int) -> "ObsNormalizer":
        return cls(np.zeros(dim), np.ones(dim), 0, None)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "count": self.count, "clip": self.clip}

    @classmethod
    def from_dict(cls, d: dict) -> "ObsNormalizer":
        return cls(np.array(d["mean"]), np.array(d["std"]), d["count"], d["clip"])


def fit_normalizer(env: Env, steps: int = 10_000, seed: int = 0, clip: Optional[float] = 5.0) -> ObsNormalizer:
    """Estimate state mean/std from ``steps`` steps of a uniform random policy."""
    if steps < 100:
        raise ConfigError("fit_normalizer needs at least 100 steps")
    rng = np.random.default_rng(seed)
    states = [env.reset().state]
    for _ in range(steps - 1):
        if env.done:
            states.append(env.reset().state)
            continue
        states.append(env.step(int(rng.integers(env.action_spec.n))).state)
    x = np.asarray(states)
    return ObsNormalizer(x.mean(0), x.std(0), len(states), clip)


# ---------------------------------------------------------------------------
# registry

ENV_NAMES = ("noisydigits", "tworoads", "stochgrid")


def make_env(name: str, seed: int = 0, sticky_tau: float = 0.0, **params) -> Env:
    if name == "noisydigits":
        env: Env = NoisyDigits(NoisyDigitsConfig(**params), seed=seed)
    elif name == "tworoads":
        env = TwoRoads(seed=seed, **params)
    elif name == "stochgrid":
        env = StochGrid(seed=seed, **params)
    else:
        raise ConfigError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
    if sticky_tau > 0:
        env = StickyActions(env, sticky_tau, seed=seed + 7919)
    return env
