import math

import numpy as np
import pytest

from vdmx.envs import (IMPOSSIBLE_LOGPROB, ActionSpec, Env, NoisyDigits, NoisyDigitsConfig, ObsNormalizer,
                       StochGrid, TwoRoads, UnsupportedOperation, ZeroExtrinsic, fit_normalizer, make_env,
                       oracle_class_logprobs, oracle_logprob, sticky_wrap)
from vdmx.ndcore import ConfigError, UsageError

LOG_N01_AT_MEAN = -0.5 * math.log(2 * math.pi)


def test_noisydigits_reset_and_dims():
    env = NoisyDigits(NoisyDigitsConfig(), seed=1)
    s = env.reset().state
    assert s.shape == (16,)
    assert np.array_equal(s[:10], np.eye(10)[0])
    styles = np.stack([env.reset().state[10:] for _ in range(4000)])
    assert np.all(np.abs(styles.std(0) - 0.3) < 0.03)


def test_noisydigits_class0_always_to_1():
    env = NoisyDigits(seed=2)
    hits = 0
    for _ in range(10_000):
        env.reset()
        hits += env.class_of(env.step(1).state) == 1
    assert hits == 10_000


def test_noisydigits_class1_uniform():
    env = NoisyDigits(seed=3)
    counts = np.zeros(10)
    n = 0
    env.reset()
    while n < 100_000:
        if env.done:
            env.reset()
        if env.cls == 1:
            counts[env.class_of(env.step(0).state)] += 1
            n += 1
        else:
            env.step(0)
    freq = counts / n
    assert freq[0] == 0 and freq[1] == 0
    assert np.all(np.abs(freq[2:] - 0.125) < 0.011)


def test_noisydigits_episode_length_and_done():
    env = NoisyDigits(seed=0)
    env.reset()
    for t in range(50):
        obs = env.step(0)
    assert obs.episode_done and env.done
    with pytest.raises(UsageError):
        env.step(0)


def test_invalid_action():
    env = TwoRoads()
    env.reset()
    with pytest.raises(ConfigError):
        env.step(4)
    with pytest.raises(ConfigError):
        ActionSpec("discrete", 1)


def test_tworoads_both_corridors():
    left = [2, 2, 2] + [0] * 6 + [3, 3, 3]
    right = [3, 3, 3] + [0] * 6 + [2, 2, 2]
    for path, route in ((left, "left"), (right, "right")):
        env = TwoRoads()
        obs = env.reset()
        assert env.pos == (6, 3)
        for a in path:
            obs = env.step(a)
        assert obs.episode_done and obs.extrinsic_reward == 1.0
        assert env.reached_goal and env.route == route
        assert len(path) == 12


def test_tworoads_wall_blocks():
    env = TwoRoads()
    env.reset()
    env.step(0)  # (6,3) -> (5,3) is wall
    assert env.pos == (6, 3)
    env.step(2)
    env.step(0)  # (6,2) -> (5,2) is wall too
    assert env.pos == (6, 2)


def test_stochgrid_determinism_and_success_rate():
    a, b = StochGrid(seed=4), StochGrid(seed=4)
    assert np.array_equal(a.reset().state, b.reset().state)
    rng = np.random.default_rng(0)
    actions = rng.integers(4, size=2000)
    for act in actions:
        if a.done:
            a.reset(), b.reset()
        assert np.array_equal(a.step(int(act)).state, b.step(int(act)).state)

    env = StochGrid(seed=5)
    env.reset()
    ok = total = 0
    while total < 100_000:
        if env.done:
            env.reset()
        if env.pos in env.region:
            env.step(int(rng.integers(4)))
            continue
        env.step(int(rng.integers(4)))
        ok += env.last_direction == env.last_intended
        total += 1
    assert abs(ok / total - 0.8) < 0.01


def test_stochgrid_teleport_and_coverage_reward():
    env = StochGrid(seed=0, p_success=1.0)
    env.reset()
    env.pos = (11, 12)
    landed = set()
    for _ in range(300):
        if env.done:
            env.reset()
        env.pos = (11, 12)
        env.step(1)  # down into the region
        assert env.pos in env.region
        landed.add(env.pos)
    assert len(landed) > 20
    env.reset()
    assert env.step(0).extrinsic_reward == 1.0
    assert env.step(1).extrinsic_reward == 0.0


def test_sticky_extremes():
    env = sticky_wrap(TwoRoads(), 0.0, seed=0)
    env.reset()
    for a in [0, 1, 2, 3, 2, 1]:
        env.step(a)
        assert env.last_executed == a
    env = sticky_wrap(TwoRoads(), 1.0, seed=0)
    env.reset()
    env.step(2)
    for a in [0, 1, 3, 1]:
        env.step(a)
        assert env.last_executed == 2
    with pytest.raises(ConfigError):
        sticky_wrap(TwoRoads(), 1.5)


def test_sticky_repeat_frequency():
    env = sticky_wrap(StochGrid(seed=1), 0.25, seed=7)
    env.reset()
    repeats = 0
    prev = None
    steps = 0
    while steps < 100_000:
        if env.done:
            env.reset()
            prev = None
        # always choose something other than the last executed action
        chosen = 0 if prev is None else (prev + 1) % 4
        env.step(chosen)
        if prev is not None:
            repeats += env.last_executed == prev
            steps += 1
        else:
            assert env.last_executed == chosen
        prev = env.last_executed
    assert abs(repeats / steps - 0.25) < 0.02


class ConstantEnv(Env):
    name = "const"

    def __init__(self):
        super().__init__(0)
        self.action_spec = ActionSpec("discrete", 2)
        self.obs_dim = 3
        self.max_steps = 10

    def _reset(self):
        return np.array([1.0, 2.0, 3.0])

    def _step(self, action):
        return self._reset(), 0.0, False

    def cell(self):
        return 0


def test_normalizer_constant_env():
    norm = fit_normalizer(ConstantEnv(), 200)
    out = norm(np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(out, np.zeros(3))
    assert np.all(norm.std >= 1e-6)
    x = np.array([1.5, -2.0, 0.0])
    assert np.array_equal(norm(x), norm(x))
    with pytest.raises(ConfigError):
        fit_normalizer(ConstantEnv(), 50)


def test_normalizer_noisydigits_style_std():
    norm = fit_normalizer(NoisyDigits(seed=2), 10_000)
    assert np.all(np.abs(norm.std[10:] - 0.3) / 0.3 < 0.1)
    assert norm.count == 10_000
    with pytest.raises(ValueError):
        norm.mean[0] = 1.0  # frozen
    again = ObsNormalizer.from_dict(norm.to_dict())
    assert np.array_equal(again.mean, norm.mean) and np.array_equal(again.std, norm.std)


def test_oracle_examples():
    env = NoisyDigits(seed=0)
    s0 = np.concatenate([np.eye(10)[0], np.zeros(6)])
    s1 = np.concatenate([np.eye(10)[1], np.zeros(6)])
    style_term = 6 * (LOG_N01_AT_MEAN - math.log(0.3))
    assert oracle_logprob(env, s0, 0, s1) == pytest.approx(style_term, abs=1e-12)
    assert oracle_logprob(env, s1, 0, s0) <= -1e8
    s5 = np.concatenate([np.eye(10)[5], np.zeros(6)])
    assert oracle_logprob(env, s1, 1, s5) == pytest.approx(math.log(1 / 8) + style_term, abs=1e-12)
    with pytest.raises(UnsupportedOperation):
        oracle_logprob(TwoRoads(), s0, 0, s1)


def test_oracle_class_probs_sum_to_one():
    env = NoisyDigits(seed=0)
    for cls in range(10):
        s = np.concatenate([np.eye(10)[cls], np.zeros(6)])
        lp = oracle_class_logprobs(env, s)
        total = np.exp(lp[lp > IMPOSSIBLE_LOGPROB]).sum()
        assert abs(total - 1.0) < 1e-12


def test_oracle_jitter_mixture_is_dominated_by_true_mode():
    cfg = NoisyDigitsConfig(class_jitter=0.1)
    env = NoisyDigits(cfg, seed=0)
    s1 = env.render_state(1)
    rng = np.random.default_rng(0)
    draws = []
    for _ in range(2000):
        nxt_cls = 2 + rng.integers(8)
        sn = env.render_state(int(nxt_cls))
        draws.append(oracle_logprob(env, s1, 0, sn))
    assert np.all(np.isfinite(draws))
    sn = env.render_state(3)
    block, style = sn[:10], sn[10:]
    single = (math.log(1 / 8) + np.sum(-0.5 * np.log(2 * np.pi * 0.01) - (block - np.eye(10)[3]) ** 2 / 0.02)
              + np.sum(-0.5 * np.log(2 * np.pi * 0.09) - style ** 2 / 0.18))
    assert oracle_logprob(env, s1, 0, sn) >= single - 1e-12
    assert oracle_logprob(env, s1, 0, sn) - single < 1e-6


def test_zero_extrinsic_wrapper():
    env = ZeroExtrinsic(TwoRoads())
    env.reset()
    for a in [2, 2, 2, 0, 0, 0, 0, 0, 0, 3, 3, 3]:
        obs = env.step(a)
    assert obs.episode_done and obs.extrinsic_reward == 0.0


def test_make_env_registry():
    assert make_env("stochgrid", 0).obs_dim == 441
    assert isinstance(make_env("tworoads", 0, 0.25), Env)
    with pytest.raises(ConfigError):
        make_env("pong")
