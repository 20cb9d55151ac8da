"""Variational dynamics model: posterior, prior and generative networks.

The model works either on frozen random features of the state
(``feature_dim`` set, the exploration default) or directly on raw states
(``feature_dim=None``), which makes likelihoods comparable with an exact
oracle.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .ndcore import (ACTIVATIONS, DTYPE, Adam, ConfigError, DiagGaussian, DomainError, GaussianHead, ResidualBlock,
                     backward, dense, gaussian_kl, gaussian_log_prob, reparam_sample, NonFiniteError)

log = logging.getLogger(__name__)


@dataclass
class VdmArch:
    obs_dim: int
    n_actions: int
    feature_dim: Optional[int] = 512
    feature_width: int = 256
    feature_seed: int = 0
    latent_dim: int = 128
    width: int = 256
    n_res: int = 3
    skip: bool = True
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if min(self.obs_dim, self.n_actions, self.latent_dim, self.width) < 1:
            raise ConfigError("architecture sizes must be positive")

    @property
    def target_dim(self) -> int:
        return self.obs_dim if self.feature_dim is None else self.feature_dim

    def to_dict(self) -> dict:
        return asdict(self)


class FeatureMap(nn.Module):
    """Frozen random two-layer network (tanh hidden layer, linear output).

    Built from its own seed so the same map can be rebuilt from a checkpoint
    descriptor; parameters never receive gradients.
    """

    def __init__(self, in_dim: int, out_dim: int = 512, width: int = 256, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.l1 = nn.Linear(in_dim, width, dtype=DTYPE)
        self.l2 = nn.Linear(width, out_dim, dtype=DTYPE)
        with torch.no_grad():
            for layer in (self.l1, self.l2):
                bound = math.sqrt(6.0 / (layer.in_features + layer.out_features))
                layer.weight.copy_(torch.rand(layer.weight.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
                layer.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)
        self.in_dim = in_dim
        self.out_dim = out_dim

    @torch.no_grad()
    def forward(self, state: torch.Tensor) -> torch.Tensor:
        if state.shape[-1] != self.in_dim:
            raise ConfigError(f"feature map expects {self.in_dim} inputs, got {state.shape[-1]}")
        return self.l2(torch.tanh(self.l1(state)))


class ConditionedBody(nn.Module):
    """Two dense layers then residual blocks; ``cond`` is appended to every layer input."""

    def __init__(self, in_dim: int, cond_dim: int, width: int, n_res: int, activation: str, n_dense: int = 2):
        super().__init__()
        self.act = ACTIVATIONS[activation]
        self.cond_dim = cond_dim
        sizes = [in_dim] + [width] * n_dense
        self.fcs = nn.ModuleList(dense(a + cond_dim, b) for a, b in zip(sizes[:-1], sizes[1:]))
        self.blocks = nn.ModuleList(ResidualBlock(width, cond_dim, activation) for _ in range(n_res))

    def forward(self, x: torch.Tensor, cond: Optional[torch.Tensor]) -> torch.Tensor:
        h = x
        for fc in self.fcs:
            h = self.act(fc(h if cond is None else torch.cat([h, cond], -1)))
        for block in self.blocks:
            h = block(h, cond)
        return h


@dataclass
class TransitionBatch:
    """A batch of (s, a, s') with features; ``a`` holds integer actions."""

    s: torch.Tensor
    a: torch.Tensor
    s_next: torch.Tensor
    phi_s: torch.Tensor
    phi_next: torch.Tensor
    a_onehot: torch.Tensor

    def __len__(self):
        return self.s.shape[0]

    def index(self, idx) -> "TransitionBatch":
        return TransitionBatch(self.s[idx], self.a[idx], self.s_next[idx], self.phi_s[idx],
                               self.phi_next[idx], self.a_onehot[idx])


class VDM(nn.Module):
    """Posterior q(z|s,a,s'), prior p(z|s,a) and generative p(s'|s,a,z).

    The generative network sees the prior trunk's features of (s, a) through
    skip connections; with ``skip=False`` it sees z only.
    """

    def __init__(self, arch: VdmArch):
        super().__init__()
        self.arch = arch
        A, W, C, D = arch.n_actions, arch.width, arch.latent_dim, arch.target_dim
        if arch.feature_dim is None:
            self.feature_map = None
        else:
            self.feature_map = FeatureMap(arch.obs_dim, arch.feature_dim, arch.feature_width, arch.feature_seed)
        self.posterior_body = ConditionedBody(2 * D, A, W, arch.n_res, arch.activation)
        self.posterior_head = GaussianHead(W + A, C)
        self.prior_body = ConditionedBody(D, A, W, arch.n_res, arch.activation)
        self.prior_head = GaussianHead(W + A, C)
        gen_cond = W if arch.skip else 0
        self.generative_body = ConditionedBody(C, gen_cond, W, arch.n_res, arch.activation, n_dense=3)
        self.generative_head = GaussianHead(W + gen_cond, D)

    # -- inputs -------------------------------------------------------------

    def features(self, state) -> torch.Tensor:
        state = torch.as_tensor(state, dtype=DTYPE)
        return state if self.feature_map is None else self.feature_map(state)

    def encode_actions(self, a) -> torch.Tensor:
        a = torch.as_tensor(a, dtype=torch.long)
        return torch.nn.functional.one_hot(a, self.arch.n_actions).to(DTYPE)

    def transitions(self, s, a, s_next) -> TransitionBatch:
        s = torch.as_tensor(np.asarray(s), dtype=DTYPE)
        s_next = torch.as_tensor(np.asarray(s_next), dtype=DTYPE)
        a = torch.as_tensor(np.asarray(a), dtype=torch.long)
        with torch.no_grad():
            return TransitionBatch(s, a, s_next, self.features(s), self.features(s_next), self.encode_actions(a))

    # -- the three networks -------------------------------------------------

    def posterior(self, t: TransitionBatch) -> DiagGaussian:
        h = self.posterior_body(torch.cat([t.phi_s, t.phi_next], -1), t.a_onehot)
        return self.posterior_head(torch.cat([h, t.a_onehot], -1))

    def prior_features(self, phi_s: torch.Tensor, a_onehot: torch.Tensor) -> torch.Tensor:
        return self.prior_body(phi_s, a_onehot)

    def prior(self, phi_s: torch.Tensor, a_onehot: torch.Tensor,
              feats: Optional[torch.Tensor] = None) -> DiagGaussian:
        if feats is None:
            feats = self.prior_features(phi_s, a_onehot)
        return self.prior_head(torch.cat([feats, a_onehot], -1))

    def generate(self, z: torch.Tensor, feats: Optional[torch.Tensor]) -> DiagGaussian:
        """Next-state distribution given z and the prior trunk features.

        ``feats`` may carry extra leading sample axes relative to ``z`` only by
        broadcasting; callers expand it explicitly.
        """
        if z.shape[-1] != self.arch.latent_dim:
            raise ConfigError(f"latent has {z.shape[-1]} dims, expected {self.arch.latent_dim}")
        cond = feats if self.arch.skip else None
        h = self.generative_body(z, cond)
        return self.generative_head(h if cond is None else torch.cat([h, cond], -1))

    def generate_from(self, phi_s, a_onehot, z) -> DiagGaussian:
        return self.generate(z, self.prior_features(phi_s, a_onehot))

    # -- objectives ---------------------------------------------------------

    def elbo_terms(self, t: TransitionBatch, noise: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Single-sample reconstruction log-likelihood and KL, each shaped (B,)."""
        q = self.posterior(t)
        feats = self.prior_features(t.phi_s, t.a_onehot)
        p = self.prior(t.phi_s, t.a_onehot, feats)
        z = reparam_sample(q, noise)
        recon = gaussian_log_prob(t.phi_next, self.generate(z, feats))
        return recon, gaussian_kl(q, p)

    def elbo(self, t: TransitionBatch, noise: torch.Tensor) -> torch.Tensor:
        recon, kl = self.elbo_terms(t, noise)
        return recon - kl

    def log_weights(self, t: TransitionBatch, k: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """log w_i = log p(s'|z_i) + log p(z_i|s,a) - log q(z_i|s,a,s') for z_i ~ q; shape (B, k)."""
        q = self.posterior(t)
        feats = self.prior_features(t.phi_s, t.a_onehot)
        p = self.prior(t.phi_s, t.a_onehot, feats)
        B, C = q.mean.shape
        eps = torch.randn(B, k, C, generator=generator, dtype=DTYPE)
        qk, pk = q.expand_samples(k), p.expand_samples(k)
        z = reparam_sample(qk, eps)
        feats_k = feats.unsqueeze(1).expand(B, k, feats.shape[-1])
        g = self.generate(z, feats_k)
        target = t.phi_next.unsqueeze(1).expand(B, k, t.phi_next.shape[-1])
        return gaussian_log_prob(target, g) + gaussian_log_prob(z, pk) - gaussian_log_prob(z, qk)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def elbo(model: VDM, t: TransitionBatch, noise: torch.Tensor) -> torch.Tensor:
    return model.elbo(t, noise)


def train_step(model: VDM, opt: Adam, batch: TransitionBatch, generator: Optional[torch.Generator] = None) -> float:
    """One Adam ascent step on the batch-mean single-sample ELBO.

    Returns the negated mean ELBO (the loss). A non-finite loss or gradient
    skips the update and returns nan.
    """
    if len(batch) == 0:
        raise ConfigError("train_step needs a nonempty batch")
    noise = torch.randn(len(batch), model.arch.latent_dim, generator=generator, dtype=DTYPE)
    try:
        loss = -model.elbo(batch, noise).mean()
    except DomainError:
        loss = torch.tensor(float("nan"), dtype=DTYPE)
    if not torch.isfinite(loss):
        log.warning("non-finite VDM loss; update skipped")
        return float("nan")
    grads = backward(loss, model)
    try:
        opt.step(grads)
    except NonFiniteError as exc:
        log.warning("VDM update skipped: %s", exc)
        return float("nan")
    return loss.item()


def iterate_minibatches(n: int, batch_size: int, generator: Optional[torch.Generator] = None):
    perm = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def fit(model: VDM, opt: Adam, data: TransitionBatch, epochs: int, batch_size: int = 256,
        generator: Optional[torch.Generator] = None, loss_fn=None) -> list:
    """Run ``epochs`` passes over ``data``; returns per-epoch mean losses."""
    step = loss_fn or train_step
    history = []
    for _ in range(epochs):
        losses = [step(model, opt, data.index(idx), generator)
                  for idx in iterate_minibatches(len(data), batch_size, generator)]
        history.append(float(np.nanmean(losses)))
    return history
