"""Raw-space NoisyDigits studies: oracle bound checks, mode coverage, CVAE and skip comparisons.

Models here predict the raw next state (no feature map), so their
likelihoods are directly comparable with the environment's exact oracle.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch.optim.swa_utils import AveragedModel, get_ema_multi_avg_fn

from .baselines import (CvaeModel, EnsembleDemoConfig, class_of_states, ensemble_demo_noisydigits,
                        noisydigits_transitions, states_of_class)
from .envs import NoisyDigits, NoisyDigitsConfig, oracle_logprob
from .ndcore import DTYPE, Adam, seeded_init
from .reward import nested_rewards
from .vdm import VDM, TransitionBatch, VdmArch, fit

log = logging.getLogger(__name__)


@dataclass
class RawStudyConfig:
    class_jitter: float = 0.25
    latent_dim: int = 16
    width: int = 128
    n_res: int = 3
    activation: str = "tanh"
    skip: bool = True
    lr: float = 1e-3
    min_lr: float = 1e-5
    epochs: int = 200
    samples_per_epoch: int = 12288
    batch_size: int = 256
    test_size: int = 1000
    elbo_samples: int = 512
    probes: int = 800
    ema_decay: float = 0.9

    @property
    def env_config(self) -> NoisyDigitsConfig:
        return NoisyDigitsConfig(class_jitter=self.class_jitter)

    def arch(self, skip: Optional[bool] = None) -> VdmArch:
        return VdmArch(obs_dim=self.env_config.state_dim, n_actions=2, feature_dim=None, latent_dim=self.latent_dim,
                       width=self.width, n_res=self.n_res, skip=self.skip if skip is None else skip,
                       activation=self.activation)


def cosine_lr(cfg: RawStudyConfig, epoch: int) -> float:
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def train_raw_model(cfg: RawStudyConfig, seed: int = 0, cvae: bool = False, skip: Optional[bool] = None,
                    progress=None):
    """Train a raw-space VDM (or CVAE) for ``cfg.epochs`` epochs of fresh transitions.

    Every epoch draws ``samples_per_epoch`` new transitions, so the budget is
    identical for every model trained with the same config. The returned model
    is an exponential moving average of the weights taken once per epoch
    (``ema_decay``; 0 returns the last iterate). Returns ``(model, per-epoch losses)``.
    """
    with seeded_init(seed):
        model = CvaeModel(cfg.arch(skip)) if cvae else VDM(cfg.arch(skip))
    opt = Adam(model, cfg.lr)
    averaged = AveragedModel(model, multi_avg_fn=get_ema_multi_avg_fn(cfg.ema_decay)) if cfg.ema_decay else None
    gen = torch.Generator().manual_seed(seed + 1)
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(cfg, epoch)
        data = model.transitions(*noisydigits_transitions(cfg.env_config, cfg.samples_per_epoch,
                                                           1_000_003 * (seed + 1) + epoch))
        history += fit(model, opt, data, 1, cfg.batch_size, gen)
        if averaged is not None:
            averaged.update_parameters(model)
        if progress is not None:
            progress(epoch, history[-1])
    if averaged is not None:
        with torch.no_grad():
            for p, q in zip(model.parameters(), averaged.module.parameters()):
                p.copy_(q)
    return model, history


def test_transitions(cfg: RawStudyConfig, seed: int = 12345):
    """Held-out transitions from an independent env stream."""
    return noisydigits_transitions(cfg.env_config, cfg.test_size, seed)


def oracle_logprobs(cfg: RawStudyConfig, s, a, s_next) -> np.ndarray:
    env = NoisyDigits(cfg.env_config)
    return np.array([oracle_logprob(env, si, ai, sn) for si, ai, sn in zip(s, a, s_next)])


@torch.no_grad()
def mean_elbo(model: VDM, t: TransitionBatch, samples: int, seed: int = 0, chunk: int = 64) -> np.ndarray:
    """Per-transition single-sample elbo averaged over ``samples`` noise draws."""
    gen = torch.Generator().manual_seed(seed)
    total = torch.zeros(len(t), dtype=DTYPE)
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        noise = torch.randn(m, len(t), model.arch.latent_dim, generator=gen, dtype=DTYPE)
        for i in range(m):
            total += model.elbo(t, noise[i])
        done += m
    return (total / samples).numpy()


def jensen_check(model: VDM, cfg: RawStudyConfig, seed: int = 12345, tol: float = 0.05) -> dict:
    """Compare the averaged elbo with the exact oracle and with the model's own likelihood.

    ``excess`` = mean elbo - oracle log-likelihood per transition; the bound
    against the true density holds only as far as the model matches it.
    ``self_excess`` = mean elbo - 512-sample importance-weighted estimate of
    the model's own log-likelihood, which Jensen's inequality bounds by 0 in
    expectation.
    """
    s, a, sn = test_transitions(cfg, seed)
    t = model.transitions(s, a, sn)
    elbo = mean_elbo(model, t, cfg.elbo_samples, seed)
    orc = oracle_logprobs(cfg, s, a, sn)
    gen = torch.Generator().manual_seed(seed + 7)
    iw = -nested_rewards(model, t, [cfg.elbo_samples], gen)[cfg.elbo_samples].numpy()
    excess = elbo - orc
    cls = class_of_states(s)
    return {
        "elbo": elbo, "oracle": orc, "excess": excess, "model_ll": iw, "self_excess": elbo - iw,
        "max_excess": float(excess.max()), "frac_within": float((excess <= tol).mean()),
        "max_self_excess": float((elbo - iw).max()),
        "by_class": {name: (float(excess[sel].mean()), float(excess[sel].max()))
                     for name, sel in (("from0", cls == 0), ("from1", cls == 1), ("from2to9", cls >= 2))
                     if sel.any()},
    }


def theorem1_check(model: VDM, cfg: RawStudyConfig, seed: int = 12345,
                   order_ks: Sequence[int] = (1, 5, 10, 50), gap_ks: Sequence[int] = (1, 10, 100, 512)) -> dict:
    """Nested r_k from one shared draw of latents per transition.

    Returns the mean of each r_k, the mean and standard error of each
    consecutive paired difference, and |mean r_k - mean(-oracle)| per k.
    """
    s, a, sn = test_transitions(cfg, seed)
    t = model.transitions(s, a, sn)
    orc = oracle_logprobs(cfg, s, a, sn)
    gen = torch.Generator().manual_seed(seed + 3)
    ks = sorted(set(order_ks) | set(gap_ks))
    r = {k: v.numpy() for k, v in nested_rewards(model, t, ks, gen).items()}
    n = len(orc)
    order = []
    for m, k in zip(order_ks[:-1], order_ks[1:]):
        d = r[m] - r[k]
        order.append({"m": m, "k": k, "mean_diff": float(d.mean()), "se": float(d.std(ddof=1) / math.sqrt(n))})
    gaps = {k: float(abs(r[k].mean() - (-orc).mean())) for k in gap_ks}
    return {"means": {k: float(r[k].mean()) for k in ks}, "order": order, "gaps": gaps,
            "neg_oracle_mean": float((-orc).mean())}


@torch.no_grad()
def mode_coverage(model: VDM, cfg: RawStudyConfig, seed: int = 0, source_class: int = 1) -> np.ndarray:
    """Class histogram of decoded means for ``probes`` prior samples at one state of ``source_class``."""
    env = NoisyDigits(cfg.env_config, seed)
    s = torch.as_tensor(env.render_state(source_class), dtype=DTYPE).unsqueeze(0).expand(cfg.probes, -1)
    a = model.encode_actions(np.zeros(cfg.probes, dtype=np.int64))
    feats = model.prior_features(s, a)
    p = model.prior(s, a, feats)
    gen = torch.Generator().manual_seed(seed + 5)
    z = p.mean + p.std * torch.randn(p.mean.shape, generator=gen, dtype=DTYPE)
    decoded = model.generate(z, feats).mean.numpy()
    return np.bincount(class_of_states(decoded), minlength=10) / cfg.probes


def cvae_comparison(cfg: RawStudyConfig, seed: int = 0, vdm: Optional[VDM] = None, test_seed: int = 54321) -> dict:
    """Held-out mean elbo of the VDM vs a CVAE trained with the same budget and seed.

    The per-transition difference is paired; ``se`` is its standard error.
    """
    if vdm is None:
        vdm, _ = train_raw_model(cfg, seed)
    cvae, _ = train_raw_model(cfg, seed, cvae=True)
    s, a, sn = test_transitions(cfg, test_seed)
    ev = mean_elbo(vdm, vdm.transitions(s, a, sn), cfg.elbo_samples, test_seed)
    ec = mean_elbo(cvae, cvae.transitions(s, a, sn), cfg.elbo_samples, test_seed)
    d = ev - ec
    return {"vdm_mean": float(ev.mean()), "cvae_mean": float(ec.mean()), "diff_mean": float(d.mean()),
            "se": float(d.std(ddof=1) / math.sqrt(len(d))), "n": len(d), "cvae": cvae}


def skip_ablation(cfg: RawStudyConfig, seeds: Sequence[int] = (0,), test_seed: int = 54321) -> Dict[bool, List[float]]:
    """Held-out mean elbo with and without skip connections, per seed."""
    s, a, sn = test_transitions(cfg, test_seed)
    out: Dict[bool, List[float]] = {True: [], False: []}
    for skip in (True, False):
        for seed in seeds:
            model, _ = train_raw_model(cfg, seed, skip=skip)
            out[skip].append(float(mean_elbo(model, model.transitions(s, a, sn), 64, test_seed).mean()))
    return out


def run_noisydigits_demo(out_dir: str, cfg: RawStudyConfig = RawStudyConfig(), seed: int = 0) -> dict:
    """Train the raw VDM and the probabilistic ensemble; write CSVs and SVG bar charts."""
    from .harness import write_csv

    os.makedirs(out_dir, exist_ok=True)
    model, history = train_raw_model(cfg, seed)
    write_csv(os.path.join(out_dir, "vdm_training.csv"), ["epoch", "loss"], list(enumerate(history)))
    hist = mode_coverage(model, cfg, seed)
    write_csv(os.path.join(out_dir, "vdm_mode_coverage.csv"), ["class", "frequency"], list(enumerate(hist)))
    ens_cfg = EnsembleDemoConfig(epochs=cfg.epochs, samples_per_epoch=cfg.samples_per_epoch,
                                 class_jitter=cfg.class_jitter, probes=cfg.probes)
    ens = ensemble_demo_noisydigits(ens_cfg, seed, out_dir)
    _bar_svg(os.path.join(out_dir, "vdm_mode_coverage.svg"), hist, "VDM decoded class from a class-1 state")
    for m in ens["members"]:
        _bar_svg(os.path.join(out_dir, f"ensemble_member{m['member']}_coverage.svg"), np.array(m["class_hist"]),
                 f"ensemble member {m['member']}: class-1 prediction")
    return {"vdm_coverage": hist, "ensemble": ens["members"], "model": model}


def _bar_svg(path: str, freqs: np.ndarray, title: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "vdmx"
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.bar(np.arange(len(freqs)), freqs, color="C0")
    ax.set_xticks(np.arange(len(freqs)))
    ax.set_xlabel("decoded class")
    ax.set_ylabel("frequency")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
