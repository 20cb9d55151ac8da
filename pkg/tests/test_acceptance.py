"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

The raw NoisyDigits model is trained once per module and shared by the
bound, coverage and CVAE checks. The exploration runs are shared by the
efficacy and ablation checks.
"""
import math
import os
import time

import numpy as np
import pytest
import torch

from conftest import record
from vdmx import harness, studies
from vdmx.agent import PolicyNet, PpoConfig, clipped_surrogate, compute_gae, normalize_advantages, ppo_loss
from vdmx.baselines import (CvaeModel, EnsembleDemoConfig, ForwardModel, ensemble_demo_noisydigits,
                            noisydigits_transitions)
from vdmx.envs import NoisyDigitsConfig, StochGrid, sticky_wrap
from vdmx.ndcore import DTYPE, DiagGaussian, gaussian_kl, gaussian_log_prob, grad_check, seeded_init
from vdmx.vdm import VDM, VdmArch

pytestmark = pytest.mark.slow

RAW = studies.RawStudyConfig()


@pytest.fixture(scope="module")
def raw_model():
    t0 = time.perf_counter()
    model, history = studies.train_raw_model(RAW, seed=0)
    return model, time.perf_counter() - t0


def _finish(number, passed, detail):
    record(number, passed, detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = {}

    def check(name, fn, module, tol, gen):
        err, where = grad_check(fn, module, max_entries=4, generator=gen)
        if err > worst.get(name, (0.0, "", tol))[0]:
            worst[name] = (err, where, tol)
        worst.setdefault(name, (err, where, tol))

    arch = VdmArch(obs_dim=16, n_actions=2, feature_dim=12, feature_width=16, latent_dim=4, width=8, n_res=1)
    data = noisydigits_transitions(NoisyDigitsConfig(class_jitter=0.1), 4, 0)
    for point in range(10):
        gen = torch.Generator().manual_seed(point)
        with seeded_init(point):
            vdm = VDM(arch)
            cvae = CvaeModel(arch)
            policy = PolicyNet(16, 2, hidden=8)
            torch.nn.init.normal_(policy.pi.weight, std=0.3)
            det = ForwardModel(16, 2, feature_dim=12, feature_width=16, hidden=8)
            prob = ForwardModel(16, 2, feature_dim=12, feature_width=16, hidden=8, probabilistic=True)
        t = vdm.transitions(*data)
        noise = torch.randn(4, 4, generator=gen, dtype=DTYPE)
        loss = lambda: -vdm.elbo(t, noise).mean()
        # the three VDM networks each end in a softplus std head
        check("posterior", loss, torch.nn.ModuleList([vdm.posterior_body, vdm.posterior_head]), 1e-3, gen)
        check("prior", loss, torch.nn.ModuleList([vdm.prior_body, vdm.prior_head]), 1e-3, gen)
        check("generative", loss, torch.nn.ModuleList([vdm.generative_body, vdm.generative_head]), 1e-3, gen)
        check("cvae", lambda: -cvae.elbo(t, noise).mean(), cvae, 1e-3, gen)
        obs = torch.randn(6, 16, generator=gen, dtype=DTYPE)
        acts = torch.randint(2, (6,), generator=gen)
        old = torch.full((6,), math.log(0.5), dtype=DTYPE)
        adv, ret = torch.randn(6, generator=gen, dtype=DTYPE), torch.randn(6, generator=gen, dtype=DTYPE)
        cfg = PpoConfig(clip=10.0)  # smooth region of the surrogate
        check("policy+value", lambda: ppo_loss(policy, obs, acts, old, adv, ret, cfg)[0], policy, 1e-4, gen)
        check("forward", lambda: det.loss(t), det, 1e-4, gen)
        check("forward-probabilistic", lambda: prob.loss(t), prob, 1e-3, gen)
    elapsed = time.perf_counter() - t0
    ok = all(err < tol for err, _, tol in worst.values()) and elapsed < 120
    detail = ", ".join(f"{k} {v[0]:.1e}" for k, v in worst.items()) + f"; {elapsed:.0f}s"
    _finish(1, ok, detail)


# ---------------------------------------------------------------------------
# 2. KL closed form


def test_criterion_2_kl():
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    n = 1_000_000
    for _ in range(20):
        q = DiagGaussian(torch.randn(8, generator=gen, dtype=DTYPE), 0.3 + 2.7 * torch.rand(8, generator=gen, dtype=DTYPE))
        p = DiagGaussian(torch.randn(8, generator=gen, dtype=DTYPE), 0.3 + 2.7 * torch.rand(8, generator=gen, dtype=DTYPE))
        total = 0.0
        for _ in range(4):
            z = q.mean + q.std * torch.randn(n // 4, 8, generator=gen, dtype=DTYPE)
            qe, pe = q.expand_samples(n // 4), p.expand_samples(n // 4)
            total += (gaussian_log_prob(z, qe) - gaussian_log_prob(z, pe)).sum().item()
        exact = gaussian_kl(q, p).item()
        worst = max(worst, abs(total / n - exact) / exact)
    one = lambda m, s: DiagGaussian(torch.tensor([m], dtype=DTYPE), torch.tensor([s], dtype=DTYPE))
    spot1 = gaussian_kl(one(1.0, 1.0), one(0.0, 1.0)).item()
    spot2 = gaussian_kl(one(0.0, 2.0), one(0.0, 1.0)).item()
    elapsed = time.perf_counter() - t0
    ok = worst < 0.01 and abs(spot1 - 0.5) < 1e-9 and abs(spot2 - 0.8068528194400547) < 1e-9 and elapsed < 60
    _finish(2, ok, f"worst MC relative error {worst:.2e}; spots {spot1:.10f} {spot2:.10f}; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 3 and 4. bounds against the oracle


def test_criterion_3_jensen(raw_model):
    model, train_s = raw_model
    t0 = time.perf_counter()
    rep = studies.jensen_check(model, RAW)
    elapsed = train_s + time.perf_counter() - t0
    ok = rep["frac_within"] == 1.0 and elapsed < 600
    detail = (f"{rep['frac_within'] * 100:.1f}% of 1000 within oracle+0.05 (max excess {rep['max_excess']:.3f}); "
              f"elbo vs model's own IW-512 log-lik: max excess {rep['max_self_excess']:.3f}; {elapsed:.0f}s")
    _finish(3, ok, detail)


def test_criterion_4_theorem1(raw_model):
    model, train_s = raw_model
    t0 = time.perf_counter()
    rep = studies.theorem1_check(model, RAW)
    elapsed = train_s + time.perf_counter() - t0
    order_ok = all(o["mean_diff"] >= -2 * o["se"] for o in rep["order"])
    gaps = [rep["gaps"][k] for k in (1, 10, 100, 512)]
    gaps_ok = all(b <= a for a, b in zip(gaps, gaps[1:]))
    ok = order_ok and gaps_ok and elapsed < 600
    detail = ("diffs " + ", ".join(f"r{o['m']}-r{o['k']}={o['mean_diff']:.4f}+-{o['se']:.4f}" for o in rep["order"])
              + "; gaps " + ", ".join(f"{g:.4f}" for g in gaps) + f"; {elapsed:.0f}s")
    _finish(4, ok, detail)


# ---------------------------------------------------------------------------
# 5. multimodality


def test_criterion_5_multimodality(raw_model):
    model, train_s = raw_model
    t0 = time.perf_counter()
    cov = studies.mode_coverage(model, RAW, seed=0)
    ens = ensemble_demo_noisydigits(EnsembleDemoConfig(epochs=RAW.epochs, samples_per_epoch=RAW.samples_per_epoch,
                                                       class_jitter=RAW.class_jitter, probes=RAW.probes), seed=0)
    elapsed = train_s + time.perf_counter() - t0
    vdm_ok = bool(np.all((cov[2:] >= 0.08) & (cov[2:] <= 0.17)) and cov[0] < 0.02 and cov[1] < 0.02)
    distinct = [m["distinct_classes"] for m in ens["members"]]
    ens_fails = all(d < 3 for d in distinct)
    ok = vdm_ok and ens_fails and elapsed < 900
    detail = (f"VDM class freqs {np.round(cov, 3).tolist()}; ensemble distinct classes per member {distinct}; "
              f"{elapsed:.0f}s")
    _finish(5, ok, detail)


# ---------------------------------------------------------------------------
# 6. CVAE comparison


def test_criterion_6_cvae(raw_model):
    model, train_s = raw_model
    t0 = time.perf_counter()
    rep = studies.cvae_comparison(RAW, seed=0, vdm=model)
    elapsed = train_s + time.perf_counter() - t0
    ok = rep["diff_mean"] > 2 * rep["se"] and rep["n"] >= 1000 and elapsed < 900
    detail = (f"held-out elbo VDM {rep['vdm_mean']:.3f} vs CVAE {rep['cvae_mean']:.3f}, "
              f"diff {rep['diff_mean']:.4f} (se {rep['se']:.4f}, n={rep['n']}); {elapsed:.0f}s")
    _finish(6, ok, detail)


# ---------------------------------------------------------------------------
# 8. PPO mechanics


def test_criterion_8_ppo_mechanics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    gae_ok = True
    for T in (1, 2, 5, 17, 64):
        r, v = rng.normal(size=(T, 3)), rng.normal(size=(T, 3))
        d = rng.random((T, 3)) < 0.1
        last = rng.normal(size=3)
        adv, _ = compute_gae(r, v, d, last, 0.99, 0.95)
        for j in range(3):
            vals = np.append(v[:, j], last[j])
            delta = [r[t, j] + 0.99 * (1 - d[t, j]) * vals[t + 1] - v[t, j] for t in range(T)]
            for t in range(T):
                acc, coef = 0.0, 1.0
                for l in range(t, T):
                    acc += coef * delta[l]
                    if d[l, j]:
                        break
                    coef *= 0.99 * 0.95
                gae_ok &= abs(adv[t, j] - acc) <= 1e-12 * max(1.0, abs(acc))
    norm = normalize_advantages(torch.as_tensor(rng.normal(3, 7, size=512), dtype=DTYPE))
    norm_ok = abs(norm.mean().item()) <= 1e-9 and abs(norm.std(unbiased=False).item() - 1) <= 1e-6
    ratio = torch.as_tensor(rng.uniform(0.8, 1.2, size=256), dtype=DTYPE)
    a = torch.as_tensor(rng.normal(size=256), dtype=DTYPE)
    clip_ok = torch.equal(clipped_surrogate(ratio, a, 0.2), ratio * a)
    from test_agent import test_bandit_update_raises_rewarded_action_probability as bandit
    try:
        bandit()
        bandit_ok = True
    except AssertionError:
        bandit_ok = False
    elapsed = time.perf_counter() - t0
    ok = gae_ok and norm_ok and clip_ok and bandit_ok and elapsed < 60
    _finish(8, ok, f"gae exact {gae_ok}, adv norm {norm_ok}, clip identity {clip_ok}, bandit {bandit_ok}; "
                   f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 10. determinism and interfaces


def test_criterion_10_determinism(tmp_path):
    from test_harness import tiny, _state_equal
    import filecmp
    cfg = tiny(**{"run.total_steps": 128})
    a = harness.run_experiment(cfg, str(tmp_path / "a"))
    b = harness.run_experiment(cfg, str(tmp_path / "b"))
    csv_ok = filecmp.cmp(a["csvs"][0], b["csvs"][0], shallow=False)
    payload = harness.load_checkpoint(a["checkpoints"][0])
    policy = harness.restore_policy(payload)
    explorer = harness.restore_explorer(payload)
    ck_ok = _state_equal(policy.state_dict(), payload["policy"]) and all(
        _state_equal(m.state_dict(), payload["explorer"][k]) for k, m in explorer.modules().items())
    other = harness.load_checkpoint(b["checkpoints"][0])
    ck_ok &= _state_equal(payload["policy"], other["policy"]) and _state_equal(payload["explorer"], other["explorer"])
    env = sticky_wrap(StochGrid(seed=1), 0.25, seed=7)
    env.reset()
    prev, repeats, steps = None, 0, 0
    while steps < 100_000:
        if env.done:
            env.reset()
            prev = None
        env.step(0 if prev is None else (prev + 1) % 4)
        if prev is not None:
            repeats += env.last_executed == prev
            steps += 1
        prev = env.last_executed
    freq = repeats / steps
    ok = csv_ok and ck_ok and abs(freq - 0.25) <= 0.02
    _finish(10, ok, f"byte-identical CSVs {csv_ok}, checkpoint round-trip {ck_ok}, sticky repeat freq {freq:.4f}")


# ---------------------------------------------------------------------------
# 7 and 9. exploration efficacy and ablations (shared StochGrid runs)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
TVDM_SEEDS = [0, 1, 2]


@pytest.fixture(scope="module")
def explore(tmp_path_factory):
    """Lazily run and cache exploration experiments keyed by overrides; returns (result, seconds)."""
    root = tmp_path_factory.mktemp("explore")
    cache = {}

    def get(env="stochgrid", seeds=None, **over):
        key = (env, tuple(seeds or ()), tuple(sorted(over.items())))
        if key not in cache:
            mapping = {k: str(v) for k, v in over.items()}
            if seeds is not None:
                mapping["run.seeds"] = ",".join(map(str, seeds))
            cfg = harness.load_config(os.path.join(CONFIG_DIR, f"{env}_vdm.txt"), mapping)
            t0 = time.perf_counter()
            res = harness.run_experiment(cfg, str(root / f"run{len(cache)}"))
            cache[key] = (res, time.perf_counter() - t0)
        return cache[key]

    return get


def _tails(res):
    return np.array([harness._episode_metric_tail(harness.read_csv(p)) for p in res["csvs"]])


def test_criterion_7_exploration(explore):
    runs = {alg: explore(**{"run.algorithm": alg}) for alg in ("vdm", "random", "pred_error")}
    tails = {alg: _tails(r) for alg, (r, _) in runs.items()}
    n = len(tails["vdm"])
    diff = tails["vdm"] - tails["pred_error"]
    se = diff.std(ddof=1) / math.sqrt(n)
    ratio = tails["vdm"].mean() / tails["random"].mean()
    ratio_ok = ratio >= 1.25
    pe_ok = tails["vdm"].mean() + 2 * se >= tails["pred_error"].mean()
    two, two_s = explore(env="tworoads", seeds=[0])
    rep = harness.evaluate(two["checkpoints"][0], 200, seed=0)
    routes_ok = rep["routes"].get("left", 0) >= 1 and rep["routes"].get("right", 0) >= 1
    elapsed = sum(s for _, s in runs.values()) + two_s
    ok = ratio_ok and pe_ok and routes_ok and elapsed < 3600
    means = ", ".join(f"{a} {t.mean():.1f}+-{t.std(ddof=1) / math.sqrt(n):.1f}" for a, t in tails.items())
    _finish(7, ok, f"per-episode coverage (last fifth) {means}; vdm/random {ratio:.3f}; "
                   f"vdm-pred_error {diff.mean():.1f}+-{se:.1f}; tworoads routes {rep['routes']}; {elapsed:.0f}s")


def test_criterion_9_ablations(explore, raw_model):
    k10, k10_s = explore(**{"run.algorithm": "vdm"})
    k1, k1_s = explore(**{"run.algorithm": "vdm", "reward.k": 1})
    metric = "mean_eval_extrinsic_reward"
    var10, var1 = harness.curve_seed_variance(k10["csvs"], metric), harness.curve_seed_variance(k1["csvs"], metric)
    k_ok = var1 > var10

    model_on, on_s = raw_model
    t0 = time.perf_counter()
    model_off, _ = studies.train_raw_model(RAW, seed=0, skip=False)
    s, a, sn = studies.test_transitions(RAW, 54321)
    elbo_on = float(studies.mean_elbo(model_on, model_on.transitions(s, a, sn), 64, 54321).mean())
    elbo_off = float(studies.mean_elbo(model_off, model_off.transitions(s, a, sn), 64, 54321).mean())
    skip_s = on_s + time.perf_counter() - t0
    skip_ok = elbo_on > elbo_off

    finals, tvdm_s = {3: _tails(k10)[TVDM_SEEDS].mean()}, 0.0
    for t in (5, 7):
        res, secs = explore(seeds=TVDM_SEEDS, **{"run.algorithm": "vdm", "vdm.t_vdm": t})
        finals[t] = _tails(res).mean()
        tvdm_s += secs
    spread = max(finals.values()) / min(finals.values())
    tvdm_ok = spread <= 1.10
    elapsed = k10_s + k1_s + skip_s + tvdm_s
    ok = k_ok and skip_ok and tvdm_ok and elapsed < 2700
    _finish(9, ok, f"coverage-curve seed variance k=1 {var1:.2f} vs k=10 {var10:.2f}; held-out elbo skip on "
                   f"{elbo_on:.3f} vs off {elbo_off:.3f}; t_vdm final coverage "
                   + ", ".join(f"{t}: {v:.1f}" for t, v in finals.items()) + f" (max/min {spread:.3f}); {elapsed:.0f}s")
