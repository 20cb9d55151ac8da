"""Experiment orchestration: configs, the exploration loop, evaluation, checkpoints, CSVs and plots."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .agent import ActorPool, PolicyNet, PpoConfig, act, collect_rollouts, compute_gae, ppo_update
from .baselines import (CvaeModel, EnsembleModel, EnsembleTrainer, ForwardModel, disagreement_reward,
                        forward_train_step, pred_error_reward)
from .envs import ENV_NAMES, Env, ObsNormalizer, fit_normalizer, make_env
from .ndcore import Adam, ConfigError, seeded_init
from .reward import RunningRewardStd, intrinsic_reward_k, normalize_rewards
from .vdm import VDM, VdmArch, iterate_minibatches, train_step

log = logging.getLogger(__name__)

ALGORITHMS = ("vdm", "pred_error", "disagreement", "cvae", "random")
CHECKPOINT_FORMAT = "vdmx-checkpoint"
CHECKPOINT_VERSION = 1

METRIC_FIELDS = ["run_id", "seed", "global_step", "episode_count", "mean_intrinsic_reward",
                 "mean_eval_extrinsic_reward", "coverage", "vdm_loss", "policy_entropy", "clip_fraction",
                 "wall_clock_seconds"]


class RunAborted(RuntimeError):
    """Raised when a run stops on repeated non-finite updates (after checkpointing)."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    feature_dim: Optional[int] = 512
    feature_width: int = 256
    latent_dim: int = 128
    width: int = 256
    n_res: int = 3
    skip: bool = True
    activation: str = "tanh"
    lr: float = 1e-4
    t_vdm: int = 3
    batch_size: int = 256


@dataclass
class BaselineConfig:
    members: int = 5
    hidden: int = 256
    lr: float = 1e-4
    bootstrap: bool = False


@dataclass
class RunConfig:
    env_name: str = "stochgrid"
    env_params: Dict[str, object] = field(default_factory=dict)
    sticky_tau: float = 0.25
    algorithm: str = "vdm"
    seeds: List[int] = field(default_factory=lambda: [0])
    total_steps: int = 200_000
    k: int = 10
    normalize_rewards: bool = True
    reward_gamma: float = 0.99
    normalizer_steps: int = 10_000
    workers: int = 1
    record_time: bool = False
    name: str = "run"
    out_dir: str = "runs"
    ppo: PpoConfig = field(default_factory=PpoConfig)
    vdm: ModelConfig = field(default_factory=ModelConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.env_name not in ENV_NAMES:
            raise ConfigError(f"unknown env.name {self.env_name!r}; choose from {ENV_NAMES}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown run.algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if not self.seeds:
            raise ConfigError("run.seeds must not be empty")
        if self.total_steps < 0 or self.k < 1 or self.vdm.t_vdm < 0:
            raise ConfigError("run.total_steps >= 0, reward.k >= 1 and vdm.t_vdm >= 0 required")
        if self.algorithm == "disagreement" and self.baseline.members < 2:
            raise ConfigError("disagreement needs baseline.members >= 2")
        try:
            make_env(self.env_name, 0, self.sticky_tau, **self.env_params)
        except TypeError as exc:
            raise ConfigError(f"bad env parameters for {self.env_name}: {exc}") from exc

    @property
    def steps_per_batch(self) -> int:
        return self.ppo.n_steps * self.ppo.n_actors

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["ppo"] = PpoConfig(**d.get("ppo", {}))
        d["vdm"] = ModelConfig(**d.get("vdm", {}))
        d["baseline"] = BaselineConfig(**d.get("baseline", {}))
        return cls(**d)


# config-file key -> (section, attribute)
_RUN_KEYS = {
    "env.name": ("run", "env_name"), "env.sticky_tau": ("run", "sticky_tau"),
    "run.algorithm": ("run", "algorithm"), "run.seeds": ("run", "seeds"), "run.total_steps": ("run", "total_steps"),
    "run.normalizer_steps": ("run", "normalizer_steps"), "run.workers": ("run", "workers"),
    "run.record_time": ("run", "record_time"), "run.name": ("run", "name"), "run.out": ("run", "out_dir"),
    "reward.k": ("run", "k"), "reward.normalize": ("run", "normalize_rewards"), "reward.gamma": ("run", "reward_gamma"),
}
_SECTIONS = {"ppo": PpoConfig, "vdm": ModelConfig, "baseline": BaselineConfig}
_ENV_PARAM_TYPES = {"max_steps": int, "p_success": float, "region_size": int, "style_dim": int,
                    "style_std": float, "class_jitter": float, "episode_length": int}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("none", "raw") else int(text)


def _convert(value: str, typ, key: str):
    try:
        if typ is bool:
            return _parse_bool(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ == "optint":
            return _parse_optional_int(value)
        if typ == "intlist":
            return [int(v) for v in value.replace(",", " ").split()]
        return value.strip()
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def _field_type(cls, name: str):
    for f in fields(cls):
        if f.name == name:
            ann = str(f.type)
            if "Optional[int]" in ann:
                return "optint"
            if "List[int]" in ann:
                return "intlist"
            return {"int": int, "float": float, "bool": bool, "str": str}.get(ann, str)
    return None


def parse_config_text(text: str) -> Dict[str, str]:
    """``key = value`` lines, ``#`` comments, blank lines ignored."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def config_from_mapping(mapping: Dict[str, str], base: Optional[RunConfig] = None) -> RunConfig:
    """Build a validated RunConfig from flat namespaced keys; unknown keys fail fast."""
    run_kw = {} if base is None else {f.name: getattr(base, f.name) for f in fields(RunConfig)
                                       if f.name not in _SECTIONS}
    sections = {name: ({} if base is None else asdict(getattr(base, name))) for name in _SECTIONS}
    env_params = dict(run_kw.get("env_params", {}))
    for key, value in mapping.items():
        if key in _RUN_KEYS:
            _, attr = _RUN_KEYS[key]
            run_kw[attr] = _convert(value, _field_type(RunConfig, attr), key)
        elif key.startswith("env."):
            pname = key[4:]
            if pname not in _ENV_PARAM_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            env_params[pname] = _convert(value, _ENV_PARAM_TYPES[pname], key)
        elif key.split(".", 1)[0] in _SECTIONS and "." in key:
            section, attr = key.split(".", 1)
            typ = _field_type(_SECTIONS[section], attr)
            if typ is None:
                raise ConfigError(f"unknown config key {key!r}")
            sections[section][attr] = _convert(value, typ, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    run_kw["env_params"] = env_params
    try:
        return RunConfig(ppo=PpoConfig(**sections["ppo"]), vdm=ModelConfig(**sections["vdm"]),
                         baseline=BaselineConfig(**sections["baseline"]), **run_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            mapping = parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    mapping.update(overrides or {})
    return config_from_mapping(mapping)


def config_to_text(cfg: RunConfig) -> str:
    """Inverse of ``load_config`` for every key it understands."""
    lines = []
    for key, (_, attr) in _RUN_KEYS.items():
        v = getattr(cfg, attr)
        lines.append(f"{key} = {','.join(map(str, v)) if isinstance(v, list) else v}")
    for pname, v in sorted(cfg.env_params.items()):
        lines.append(f"env.{pname} = {v}")
    for section in _SECTIONS:
        for k, v in asdict(getattr(cfg, section)).items():
            lines.append(f"{section}.{k} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# explorers: the dynamics model behind each intrinsic reward


class Explorer:
    """Scores transitions against a frozen snapshot and trains on them afterwards."""

    kind = "none"
    updates_policy = True

    def reward(self, s, a, s_next) -> np.ndarray:
        return np.zeros(len(s))

    def update(self, s, a, s_next, passes: int) -> float:
        return float("nan")

    def modules(self) -> Dict[str, torch.nn.Module]:
        return {}

    def optimizers(self) -> Dict[str, Adam]:
        return {}


class RandomExplorer(Explorer):
    """No model; the policy is never updated, so it stays uniform."""

    kind = "random"
    updates_policy = False


class _MinibatchMixin:
    def _passes(self, data, passes: int, step_fn) -> float:
        losses = []
        for _ in range(passes):
            for idx in iterate_minibatches(len(data), self.batch_size, self.generator):
                losses.append(step_fn(data.index(idx)))
        return float(np.nanmean(losses)) if losses and not np.all(np.isnan(losses)) else float("nan")


class VdmExplorer(_MinibatchMixin, Explorer):
    """Intrinsic reward r_k from the VDM (or the CVAE when ``cvae``)."""

    def __init__(self, arch: VdmArch, lr: float, k: int, batch_size: int, seed: int, cvae: bool = False):
        with seeded_init(seed):
            self.model = CvaeModel(arch) if cvae else VDM(arch)
        self.kind = "cvae" if cvae else "vdm"
        self.opt = Adam(self.model, lr)
        self.k = k
        self.batch_size = batch_size
        self.generator = torch.Generator().manual_seed(seed + 17)
        self.reward_generator = torch.Generator().manual_seed(seed + 29)

    def reward(self, s, a, s_next):
        t = self.model.transitions(s, a, s_next)
        return intrinsic_reward_k(self.model, t, self.k, self.reward_generator).numpy()

    def update(self, s, a, s_next, passes):
        data = self.model.transitions(s, a, s_next)
        return self._passes(data, passes, lambda b: train_step(self.model, self.opt, b, self.generator))

    def modules(self):
        return {"model": self.model}

    def optimizers(self):
        return {"model": self.opt}


class PredErrorExplorer(_MinibatchMixin, Explorer):
    kind = "pred_error"

    def __init__(self, obs_dim, n_actions, mcfg: ModelConfig, bcfg: BaselineConfig, seed: int):
        self.model = ForwardModel(obs_dim, n_actions, mcfg.feature_dim, mcfg.feature_width, 0, bcfg.hidden, seed=seed)
        self.opt = Adam(self.model, bcfg.lr)
        self.batch_size = mcfg.batch_size
        self.generator = torch.Generator().manual_seed(seed + 17)

    def reward(self, s, a, s_next):
        return pred_error_reward(self.model, self.model.transitions(s, a, s_next)).numpy()

    def update(self, s, a, s_next, passes):
        data = self.model.transitions(s, a, s_next)
        return self._passes(data, passes, lambda b: forward_train_step(self.model, self.opt, b))

    def modules(self):
        return {"model": self.model}

    def optimizers(self):
        return {"model": self.opt}


class DisagreementExplorer(_MinibatchMixin, Explorer):
    kind = "disagreement"

    def __init__(self, obs_dim, n_actions, mcfg: ModelConfig, bcfg: BaselineConfig, seed: int):
        self.model = EnsembleModel(obs_dim, n_actions, bcfg.members, seed, feature_dim=mcfg.feature_dim,
                                   feature_width=mcfg.feature_width, hidden=bcfg.hidden)
        self.trainer = EnsembleTrainer(self.model, bcfg.lr, bcfg.bootstrap)
        self.batch_size = mcfg.batch_size
        self.generator = torch.Generator().manual_seed(seed + 17)

    def reward(self, s, a, s_next):
        return disagreement_reward(self.model, self.model.transitions(s, a, s_next)).numpy()

    def update(self, s, a, s_next, passes):
        data = self.model.transitions(s, a, s_next)
        return self._passes(data, passes, lambda b: self.trainer.step(b, self.generator))

    def modules(self):
        return {"model": self.model}

    def optimizers(self):
        return {f"member{i}": o for i, o in enumerate(self.trainer.opts)}


def vdm_arch_for(cfg: RunConfig, obs_dim: int, n_actions: int) -> VdmArch:
    m = cfg.vdm
    return VdmArch(obs_dim=obs_dim, n_actions=n_actions, feature_dim=m.feature_dim, feature_width=m.feature_width,
                   latent_dim=m.latent_dim, width=m.width, n_res=m.n_res, skip=m.skip, activation=m.activation)


def make_explorer(cfg: RunConfig, obs_dim: int, n_actions: int, seed: int) -> Explorer:
    if cfg.algorithm in ("vdm", "cvae"):
        return VdmExplorer(vdm_arch_for(cfg, obs_dim, n_actions), cfg.vdm.lr, cfg.k, cfg.vdm.batch_size, seed,
                           cvae=cfg.algorithm == "cvae")
    if cfg.algorithm == "pred_error":
        return PredErrorExplorer(obs_dim, n_actions, cfg.vdm, cfg.baseline, seed)
    if cfg.algorithm == "disagreement":
        return DisagreementExplorer(obs_dim, n_actions, cfg.vdm, cfg.baseline, seed)
    return RandomExplorer()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, *, cfg: RunConfig, seed: int, global_step: int, policy: PolicyNet,
                    policy_opt: Adam, explorer: Explorer, normalizer: ObsNormalizer,
                    reward_std: Optional[RunningRewardStd] = None, rng: Optional[dict] = None):
    """Self-describing checkpoint: format/version, architecture, parameters, optimiser and RNG state."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "run",
        "config": cfg.to_dict(),
        "seed": seed,
        "global_step": global_step,
        "env": {"name": cfg.env_name, "params": dict(cfg.env_params), "sticky_tau": cfg.sticky_tau,
                "obs_dim": policy.obs_dim, "n_actions": policy.n_actions},
        "policy_arch": policy.arch(),
        "policy": policy.state_dict(),
        "policy_opt": policy_opt.state_dict(),
        "explorer_kind": explorer.kind,
        "explorer": {k: m.state_dict() for k, m in explorer.modules().items()},
        "explorer_opt": {k: o.state_dict() for k, o in explorer.optimizers().items()},
        "normalizer": normalizer.to_dict(),
        "reward_std": None if reward_std is None else reward_std.state_dict(),
        "rng": rng or {},
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str) -> dict:
    try:
        payload = torch.load(path, weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def restore_policy(payload: dict) -> PolicyNet:
    policy = PolicyNet(**payload["policy_arch"])
    policy.load_state_dict(payload["policy"])
    return policy


def restore_explorer(payload: dict) -> Explorer:
    cfg = RunConfig.from_dict(payload["config"])
    env = payload["env"]
    explorer = make_explorer(cfg, env["obs_dim"], env["n_actions"], payload["seed"])
    for k, m in explorer.modules().items():
        m.load_state_dict(payload["explorer"][k])
    for k, o in explorer.optimizers().items():
        o.load_state_dict(payload["explorer_opt"][k])
    return explorer


# ---------------------------------------------------------------------------
# CSV helpers


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _float(text: str) -> float:
    return float(text) if text not in ("", None) else float("nan")


# ---------------------------------------------------------------------------
# the exploration loop


def _seed_streams(seed: int) -> Dict[str, int]:
    names = ["policy_init", "explorer", "actions", "ppo", "envs", "sticky", "normalizer"]
    children = np.random.SeedSequence(seed).generate_state(len(names))
    return {n: int(c) for n, c in zip(names, children)}


def build_envs(cfg: RunConfig, seed: int) -> List[Env]:
    streams = _seed_streams(seed)
    return [make_env(cfg.env_name, streams["envs"] + i, cfg.sticky_tau, **cfg.env_params) for i in range(cfg.ppo.n_actors)]


def run_seed(cfg: RunConfig, seed: int, out_dir: str, env_hook=None) -> str:
    """Run one seed of the exploration loop; returns the CSV path.

    Per rollout: collect T steps on N actors scoring transitions against the
    frozen model, PPO update on normalised intrinsic rewards, then ``t_vdm``
    passes of model training on the same transitions.  Extrinsic rewards are
    only logged. ``env_hook`` may wrap each env (used by tests).
    """
    streams = _seed_streams(seed)
    envs = build_envs(cfg, seed)
    if env_hook is not None:
        envs = [env_hook(e) for e in envs]
    probe = make_env(cfg.env_name, streams["normalizer"], cfg.sticky_tau, **cfg.env_params)
    normalizer = fit_normalizer(probe, cfg.normalizer_steps, seed=streams["normalizer"])
    obs_dim, n_actions = envs[0].obs_dim, envs[0].action_spec.n
    with seeded_init(streams["policy_init"]):
        policy = PolicyNet(obs_dim, n_actions, cfg.ppo.hidden)
    policy_opt = Adam(policy, cfg.ppo.lr)
    explorer = make_explorer(cfg, obs_dim, n_actions, streams["explorer"] % (2 ** 31))
    act_gen = torch.Generator().manual_seed(streams["actions"])
    ppo_gen = torch.Generator().manual_seed(streams["ppo"])
    reward_std = RunningRewardStd(cfg.ppo.n_actors, cfg.reward_gamma)
    pool = ActorPool(envs, normalizer, cfg.workers)

    seed_dir = os.path.join(out_dir, f"seed_{seed}")
    os.makedirs(seed_dir, exist_ok=True)
    ckpt = os.path.join(seed_dir, "final.pt")
    save_kw = dict(cfg=cfg, seed=seed, policy=policy, policy_opt=policy_opt, explorer=explorer,
                   normalizer=normalizer, reward_std=reward_std)
    rows = []
    timings = []
    t0 = time.perf_counter()
    global_step = 0
    bad_updates = 0
    try:
        while global_step < cfg.total_steps:
            batch = collect_rollouts(pool, policy, cfg.ppo.n_steps, explorer.reward, act_gen)
            global_step += cfg.steps_per_batch
            if cfg.normalize_rewards:
                batch.rewards = normalize_rewards(batch.raw_rewards, batch.dones, reward_std)
            stats: Dict[str, float] = {}
            if explorer.updates_policy:
                adv, ret = compute_gae(batch.rewards, batch.values, batch.dones, batch.last_values,
                                       cfg.ppo.gamma, cfg.ppo.lam)
                stats = ppo_update(policy, policy_opt, batch, adv, ret, cfg.ppo, ppo_gen)
            model_loss = explorer.update(*batch.flat_transitions(), cfg.vdm.t_vdm)
            if explorer.kind != "random" and cfg.vdm.t_vdm > 0 and math.isnan(model_loss):
                bad_updates += 1
                if bad_updates >= 10:
                    save_checkpoint(ckpt, global_step=global_step, **save_kw)
                    raise RunAborted(f"seed {seed}: 10 consecutive non-finite model updates at step {global_step}")
            else:
                bad_updates = 0
            finished = pool.finished_returns
            elapsed = time.perf_counter() - t0
            timings.append(elapsed)
            if "entropy" not in stats:
                with torch.no_grad():
                    logits, _ = policy(torch.as_tensor(batch.states.reshape(-1, obs_dim), dtype=torch.float64))
                    lp = torch.log_softmax(logits, -1)
                    stats["entropy"] = float(-(lp.exp() * lp).sum(-1).mean())
            rows.append([cfg.name, seed, global_step, pool.episode_count, float(batch.raw_rewards.mean()),
                         float(np.mean(finished)) if finished else float("nan"), len(pool.visited),
                         model_loss, stats.get("entropy"), stats.get("clip_fraction"),
                         elapsed if cfg.record_time else None])
            pool.finished_returns = []
    finally:
        pool.close()
    save_checkpoint(ckpt, global_step=global_step, **save_kw)
    path = os.path.join(out_dir, f"metrics_seed{seed}.csv")
    write_csv(path, METRIC_FIELDS, rows)
    with open(os.path.join(seed_dir, "timing.txt"), "w") as fh:
        fh.write(f"wall_clock_seconds {timings[-1] if timings else 0.0:.3f}\n")
    return path


def summarize(csv_paths: Sequence[str], out_path: str) -> str:
    """Mean and population std across seeds at each global step."""
    per_seed = [read_csv(p) for p in csv_paths]
    metrics = [f for f in METRIC_FIELDS if f not in ("run_id", "seed", "global_step")]
    by_step: Dict[int, List[Dict[str, str]]] = {}
    for rows in per_seed:
        for r in rows:
            by_step.setdefault(int(r["global_step"]), []).append(r)
    header = ["global_step", "n_seeds"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")]
    out = []
    for step in sorted(by_step):
        rs = by_step[step]
        row = [step, len(rs)]
        for m in metrics:
            vals = np.array([_float(r[m]) for r in rs])
            vals = vals[~np.isnan(vals)]
            row += [float(vals.mean()), float(vals.std())] if len(vals) else [None, None]
        out.append(row)
    write_csv(out_path, header, out)
    return out_path


def run_experiment(cfg: RunConfig, out_dir: Optional[str] = None) -> dict:
    """All seeds of one config: per-seed CSVs, a merged summary CSV and checkpoints."""
    out_dir = out_dir or os.path.join(cfg.out_dir, cfg.name)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))
    paths = [run_seed(cfg, s, out_dir) for s in cfg.seeds]
    summary = summarize(paths, os.path.join(out_dir, "summary.csv"))
    return {"csvs": paths, "summary": summary, "out_dir": out_dir,
            "checkpoints": [os.path.join(out_dir, f"seed_{s}", "final.pt") for s in cfg.seeds]}


# ---------------------------------------------------------------------------
# evaluation


def evaluate(checkpoint: str, episodes: int = 100, seed: int = 0, env_name: Optional[str] = None,
             env_params: Optional[dict] = None, sticky_tau: Optional[float] = None) -> dict:
    """Sampled-action rollouts of a saved policy without learning.

    Returns mean/std extrinsic return, distinct cells visited over all
    episodes, goal-reaching episodes per route (TwoRoads) and per-episode returns.
    """
    payload = load_checkpoint(checkpoint)
    env_spec = payload["env"]
    name = env_name or env_spec["name"]
    params = env_spec["params"] if env_params is None else env_params
    tau = env_spec["sticky_tau"] if sticky_tau is None else sticky_tau
    env = make_env(name, seed, tau, **params)
    if env.obs_dim != env_spec["obs_dim"] or env.action_spec.n != env_spec["n_actions"] or name != env_spec["name"]:
        raise ConfigError(f"checkpoint was trained on {env_spec['name']} (obs {env_spec['obs_dim']}, "
                          f"{env_spec['n_actions']} actions); cannot evaluate on {name}")
    report = {"episodes": 0, "mean_return": None, "std_return": None, "coverage": 0, "returns": [],
              "routes": {}}
    if episodes <= 0:
        return report
    policy = restore_policy(payload)
    normalizer = ObsNormalizer.from_dict(payload["normalizer"])
    gen = torch.Generator().manual_seed(seed)
    pool = ActorPool([env], normalizer)

    while pool.episode_count < episodes:
        a, _, _ = act(policy, pool.obs, gen)
        nxt, d, _, _ = pool.step(a)
        pool.obs = nxt
        pool.reset_done(d)
    returns = np.array(pool.finished_returns[:episodes])
    routes: Dict[str, int] = {}
    for ep in pool.finished_episodes[:episodes]:
        if ep.get("reached_goal"):
            routes[ep["route"]] = routes.get(ep["route"], 0) + 1
    report.update(episodes=episodes, mean_return=float(returns.mean()), std_return=float(returns.std()),
                  coverage=len(pool.visited), returns=returns.tolist(), routes=routes)
    return report


# ---------------------------------------------------------------------------
# ablations


ABLATION_SUITES = {
    "k-sweep": ("k", [1, 10]),
    "tvdm-sweep": ("t_vdm", [3, 5, 7]),
    "latent-sweep": ("latent_dim", [16, 64, 128]),
}


def _with_value(cfg: RunConfig, attr: str, value, name: str) -> RunConfig:
    if attr == "k":
        return replace(cfg, k=value, name=name)
    return replace(cfg, vdm=replace(cfg.vdm, **{attr: value}), name=name)


def run_ablation(suite: str, base: RunConfig, out_dir: str, values: Optional[Sequence] = None) -> str:
    """Run one sweep; writes ``<suite>.csv`` with a summary row per cell.

    The skip-sweep is evaluated on raw NoisyDigits (held-out elbo) through the
    studies module; the other sweeps are exploration runs on ``base``.
    """
    os.makedirs(out_dir, exist_ok=True)
    if suite == "skip-sweep":
        from .studies import RawStudyConfig, skip_ablation
        res = skip_ablation(RawStudyConfig(), seeds=base.seeds)
        rows = [[suite, "skip", str(v), len(res[v]), float(np.mean(res[v])), float(np.std(res[v])), "", ""]
                for v in (True, False)]
    elif suite in ABLATION_SUITES:
        attr, default_values = ABLATION_SUITES[suite]
        rows = []
        for v in (values or default_values):
            cell = _with_value(base, attr, v, f"{suite}_{attr}{v}")
            res = run_experiment(cell, os.path.join(out_dir, cell.name))
            curves = [read_csv(p) for p in res["csvs"]]
            final_cov = [_float(c[-1]["coverage"]) if c else float("nan") for c in curves]
            final_ep = [_episode_metric_tail(c) for c in curves]
            var = curve_seed_variance(res["csvs"], "mean_eval_extrinsic_reward")
            rows.append([suite, attr, str(v), len(final_cov), float(np.mean(final_ep)), float(np.std(final_ep)),
                         float(np.mean(final_cov)), var])
    else:
        raise ConfigError(f"unknown ablation suite {suite!r}; choose from "
                          f"{sorted(list(ABLATION_SUITES) + ['skip-sweep'])}")
    path = os.path.join(out_dir, f"{suite}.csv")
    write_csv(path, ["suite", "parameter", "value", "n_seeds", "metric_mean", "metric_std", "final_coverage_mean",
                     "curve_seed_variance"], rows)
    return path


def _episode_metric_tail(rows: List[Dict[str, str]], frac: float = 0.2) -> float:
    """Mean per-episode evaluation return over the last ``frac`` of a run."""
    vals = np.array([_float(r["mean_eval_extrinsic_reward"]) for r in rows])
    tail = vals[int(len(vals) * (1 - frac)):]
    tail = tail[~np.isnan(tail)]
    return float(tail.mean()) if len(tail) else float("nan")


def curve_seed_variance(csv_paths: Sequence[str], metric: str) -> float:
    """Across-seed variance of a metric at each logged step, averaged over the curve."""
    curves = [[_float(r[metric]) for r in read_csv(p)] for p in csv_paths]
    n = min(len(c) for c in curves)
    if n == 0 or len(curves) < 2:
        return 0.0
    arr = np.array([c[:n] for c in curves])
    return float(np.nanmean(np.nanvar(arr, axis=0)))


# ---------------------------------------------------------------------------
# plots


def curve_band(tables: Sequence[List[Dict[str, str]]], metric: str, x: str = "global_step"):
    """(x values, mean, population std) across seed tables, truncated to the shortest run."""
    n = min(len(t) for t in tables)
    xs = np.array([_float(r[x]) for r in tables[0][:n]])
    ys = np.array([[_float(r[metric]) for r in t[:n]] for t in tables]).reshape(len(tables), n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return xs, np.nanmean(ys, axis=0), np.nanstd(ys, axis=0)


def emit_plots(csv_paths: Sequence[str], out_dir: str, metrics: Optional[Sequence[str]] = None,
               x: str = "global_step") -> List[str]:
    """One SVG per metric: mean line across the given seed CSVs with a +-std band.

    Output bytes depend only on the inputs.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tables = [read_csv(p) for p in csv_paths]
    if not tables:
        raise ConfigError("emit_plots needs at least one CSV")
    wanted = list(metrics) if metrics else [f for f in METRIC_FIELDS if f not in ("run_id", "seed", x)]
    for p, rows in zip(csv_paths, tables):
        cols = set(rows[0].keys()) if rows else set(_header(p))
        missing = [c for c in [x] + wanted if c not in cols]
        if missing:
            raise ConfigError(f"{p} is missing columns: {', '.join(missing)}")
    os.makedirs(out_dir, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "vdmx"
    written = []
    n = min(len(t) for t in tables)
    for metric in wanted:
        xs, mean, std = curve_band(tables, metric, x)
        if n == 0 or np.all(np.isnan(mean)):
            continue
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(xs, mean, color="C0", lw=1.5)
        ax.fill_between(xs, mean - std, mean + std, color="C0", alpha=0.25, lw=0)
        ax.set_xlabel(x)
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} ({len(tables)} seed{'s' if len(tables) != 1 else ''})")
        fig.tight_layout()
        path = os.path.join(out_dir, f"{metric}.svg")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written


def _header(path: str) -> List[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return next(csv.reader(fh), [])
