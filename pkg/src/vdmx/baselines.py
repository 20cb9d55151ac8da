"""Comparison dynamics models and their intrinsic rewards.

* ForwardModel: point prediction of phi(s'), reward = squared prediction error.
* EnsembleModel: E forward models, reward = disagreement (variance) across members.
* probabilistic ensembles (Gaussian heads) for the NoisyDigits averaging demo.
* CvaeModel: the VDM with its learned prior replaced by a fixed N(0, I).
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .envs import NoisyDigits, NoisyDigitsConfig
from .ndcore import (DTYPE, MLP, Adam, ConfigError, DiagGaussian, GaussianHead, NonFiniteError, backward, dense,
                     gaussian_log_prob, mlp_forward, seeded_init)
from .vdm import VDM, FeatureMap, TransitionBatch, VdmArch, iterate_minibatches

log = logging.getLogger(__name__)


class ForwardModel(nn.Module):
    """MLP from (phi(s), one-hot a) to a point prediction of phi(s').

    ``feature_dim=None`` predicts the raw next state instead.
    """

    def __init__(self, obs_dim: int, n_actions: int, feature_dim: Optional[int] = 512, feature_width: int = 256,
                 feature_seed: int = 0, hidden: int = 256, n_hidden: int = 2, probabilistic: bool = False,
                 seed: Optional[int] = None):
        super().__init__()
        self.obs_dim, self.n_actions = obs_dim, n_actions
        self.probabilistic = probabilistic
        self.feature_map = None if feature_dim is None else FeatureMap(obs_dim, feature_dim, feature_width,
                                                                         feature_seed)
        self.out_dim = obs_dim if feature_dim is None else feature_dim
        with seeded_init(seed):
            sizes = [self.out_dim + n_actions] + [hidden] * n_hidden
            self.body = MLP(sizes, ["tanh"] * n_hidden)
            self.head = GaussianHead(hidden, self.out_dim) if probabilistic else dense(hidden, self.out_dim)

    def features(self, state) -> torch.Tensor:
        state = torch.as_tensor(state, dtype=DTYPE)
        return state if self.feature_map is None else self.feature_map(state)

    def transitions(self, s, a, s_next) -> TransitionBatch:
        s = torch.as_tensor(np.asarray(s), dtype=DTYPE)
        s_next = torch.as_tensor(np.asarray(s_next), dtype=DTYPE)
        a = torch.as_tensor(np.asarray(a), dtype=torch.long)
        a_oh = torch.nn.functional.one_hot(a, self.n_actions).to(DTYPE)
        with torch.no_grad():
            return TransitionBatch(s, a, s_next, self.features(s), self.features(s_next), a_oh)

    def forward(self, phi_s: torch.Tensor, a_onehot: torch.Tensor):
        h = mlp_forward(self.body, torch.cat([phi_s, a_onehot], -1))
        return self.head(h)

    def predict(self, t: TransitionBatch) -> torch.Tensor:
        out = self(t.phi_s, t.a_onehot)
        return out.mean if isinstance(out, DiagGaussian) else out

    def loss(self, t: TransitionBatch) -> torch.Tensor:
        """Mean squared error, or mean negative log-likelihood for Gaussian heads."""
        out = self(t.phi_s, t.a_onehot)
        if isinstance(out, DiagGaussian):
            return -gaussian_log_prob(t.phi_next, out).mean()
        return ((out - t.phi_next) ** 2).mean()


def pred_error_reward(model: ForwardModel, t: TransitionBatch) -> torch.Tensor:
    """Squared prediction error averaged over feature dimensions, shape (B,)."""
    with torch.no_grad():
        return ((model.predict(t) - t.phi_next) ** 2).mean(-1)


class EnsembleModel(nn.Module):
    """E forward models with disjoint parameters and independent initial seeds."""

    def __init__(self, obs_dim: int, n_actions: int, members: int = 5, seed: int = 0, **member_kw):
        super().__init__()
        if members < 1:
            raise ConfigError("an ensemble needs at least one member")
        self.members = nn.ModuleList(ForwardModel(obs_dim, n_actions, seed=seed * 1000 + i, **member_kw)
                                     for i in range(members))

    def __len__(self):
        return len(self.members)

    def transitions(self, s, a, s_next) -> TransitionBatch:
        return self.members[0].transitions(s, a, s_next)

    def predictions(self, t: TransitionBatch) -> torch.Tensor:
        """Member predictions stacked on a leading axis, shape (E, B, d)."""
        return torch.stack([m.predict(t) for m in self.members])


def disagreement_reward(ensemble: EnsembleModel, t: TransitionBatch) -> torch.Tensor:
    """Population variance across member predictions, averaged over dimensions, shape (B,)."""
    if len(ensemble) < 2:
        raise ConfigError("disagreement needs at least two ensemble members")
    with torch.no_grad():
        return ensemble.predictions(t).var(0, unbiased=False).mean(-1)


def forward_train_step(model: ForwardModel, opt: Adam, batch: TransitionBatch) -> float:
    loss = model.loss(batch)
    if not torch.isfinite(loss):
        log.warning("non-finite forward-model loss; update skipped")
        return float("nan")
    grads = backward(loss, model)
    try:
        opt.step(grads)
    except NonFiniteError as exc:
        log.warning("forward-model update skipped: %s", exc)
        return float("nan")
    return loss.item()


class EnsembleTrainer:
    """One Adam per member. Members see identical minibatches unless ``bootstrap``."""

    def __init__(self, ensemble: EnsembleModel, lr: float, bootstrap: bool = False):
        self.ensemble = ensemble
        self.opts = [Adam(m, lr) for m in ensemble.members]
        self.bootstrap = bootstrap

    def step(self, batch: TransitionBatch, generator: Optional[torch.Generator] = None) -> float:
        losses = []
        for member, opt in zip(self.ensemble.members, self.opts):
            b = batch
            if self.bootstrap:
                b = batch.index(torch.randint(len(batch), (len(batch),), generator=generator))
            losses.append(forward_train_step(member, opt, b))
        return float(np.nanmean(losses))


# ---------------------------------------------------------------------------
# CVAE dynamics


class CvaeModel(VDM):
    """Encoder q(z|s,a,s'), decoder p(s'|s,a,z) and a fixed N(0, I) prior.

    The (s, a) trunk is kept because the decoder reads its features through
    the skip connections; only the learned prior head is removed.
    """

    def __init__(self, arch: VdmArch):
        super().__init__(arch)
        self.prior_head = None

    def prior(self, phi_s, a_onehot, feats=None) -> DiagGaussian:
        shape = phi_s.shape[:-1] + (self.arch.latent_dim,)
        return DiagGaussian.standard(shape)


def cvae_elbo(model: CvaeModel, t: TransitionBatch, noise: torch.Tensor) -> torch.Tensor:
    """E_q log p(s'|s,a,z) - KL(q || N(0, I)), one sample per transition."""
    return model.elbo(t, noise)


# ---------------------------------------------------------------------------
# NoisyDigits demo with a probabilistic ensemble


def class_of_states(states: np.ndarray, num_classes: int = 10) -> np.ndarray:
    """Nearest one-hot class of each (predicted) state."""
    return np.asarray(states)[..., :num_classes].argmax(-1)


def noisydigits_transitions(cfg: NoisyDigitsConfig, n: int, seed: int):
    """``n`` consecutive transitions of NoisyDigits (action 0), episodes chained."""
    env = NoisyDigits(cfg, seed)
    s, sn = [], []
    o = env.reset()
    while len(s) < n:
        if env.done:
            o = env.reset()
        o2 = env.step(0)
        s.append(o.state)
        sn.append(o2.state)
        o = o2
    return np.array(s), np.zeros(n, dtype=np.int64), np.array(sn)


def states_of_class(cfg: NoisyDigitsConfig, cls: int, n: int, seed: int) -> np.ndarray:
    env = NoisyDigits(cfg, seed)
    return np.stack([env.render_state(cls) for _ in range(n)])


@dataclass
class EnsembleDemoConfig:
    members: int = 3
    hidden: int = 128
    epochs: int = 200
    samples_per_epoch: int = 4096
    batch_size: int = 256
    lr: float = 1e-3
    class_jitter: float = 0.1
    probes: int = 800


def ensemble_demo_noisydigits(cfg: EnsembleDemoConfig = EnsembleDemoConfig(), seed: int = 0,
                              out_dir: Optional[str] = None, trained: bool = True) -> dict:
    """Train a probabilistic ensemble on raw NoisyDigits and probe its class-1 predictions.

    Each member's mean prediction for ``probes`` class-1 states (fresh style
    noise) is decoded to its nearest class. Reports per-member coverage (number
    of distinct predicted classes and the class histogram), the mean entropy of
    the predicted class block (softmax-free: normalised clipped block), and the
    fraction of class-0 inputs predicted as class 1. ``trained=False`` skips
    training (negative control).
    """
    env_cfg = NoisyDigitsConfig(class_jitter=cfg.class_jitter)
    ens = EnsembleModel(env_cfg.state_dim, 2, members=cfg.members, seed=seed, feature_dim=None,
                        hidden=cfg.hidden, probabilistic=True)
    trainer = EnsembleTrainer(ens, cfg.lr)
    gen = torch.Generator().manual_seed(seed)
    if trained:
        for epoch in range(cfg.epochs):
            data = ens.transitions(*noisydigits_transitions(env_cfg, cfg.samples_per_epoch, seed * 7919 + epoch + 1))
            for idx in iterate_minibatches(len(data), cfg.batch_size, gen):
                trainer.step(data.index(idx), gen)
    probe1 = ens.transitions(states_of_class(env_cfg, 1, cfg.probes, seed + 11), np.zeros(cfg.probes, int),
                             np.zeros((cfg.probes, env_cfg.state_dim)))
    probe0 = ens.transitions(states_of_class(env_cfg, 0, cfg.probes, seed + 12), np.zeros(cfg.probes, int),
                             np.zeros((cfg.probes, env_cfg.state_dim)))
    rows = []
    report = {"members": []}
    with torch.no_grad():
        pred1 = ens.predictions(probe1).numpy()
        pred0 = ens.predictions(probe0).numpy()
    for i in range(len(ens)):
        classes = class_of_states(pred1[i], env_cfg.num_classes)
        hist = np.bincount(classes, minlength=env_cfg.num_classes) / cfg.probes
        block = np.clip(pred1[i][:, :env_cfg.num_classes], 1e-12, None)
        block = block / block.sum(-1, keepdims=True)
        entropy = float((-(block * np.log(block)).sum(-1)).mean())
        to_one = float((class_of_states(pred0[i], env_cfg.num_classes) == 1).mean())
        member = {"member": i, "distinct_classes": int((hist > 0).sum()), "class_hist": hist.tolist(),
                  "class_entropy": entropy, "class0_to_class1": to_one}
        report["members"].append(member)
        rows.append([i, member["distinct_classes"], f"{entropy:.6f}", f"{to_one:.6f}"]
                    + [f"{h:.6f}" for h in hist])
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ensemble_demo.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["member", "distinct_classes", "class_entropy", "class0_to_class1"]
                       + [f"freq_class{c}" for c in range(env_cfg.num_classes)])
            w.writerows(rows)
    report["ensemble"] = ens
    return report
