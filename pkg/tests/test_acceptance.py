"""Acceptance criteria, one test each, run at the stated tolerances.

Criteria 6, 7, 8 and 10 train full agents (seven runs of 200 episodes each,
roughly an hour on one CPU). Set ``MUMMI_ACCEPTANCE_DIR`` to keep those runs
on disk; a finished run whose stored config matches is then reused instead of
retrained, which is equivalent because training is deterministic given the seed.
"""
import json
import os
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from mummi import config as C
from mummi import diffmath as dm
from mummi.agent import Agent, evaluate, lambda_returns, train_loop
from mummi.analysis import (calibration_ratio, cross_modal_distance, filtered_probe_r2, latent_samples,
                            linear_probe_r2, probe_episodes)
from mummi.diffmath import Tape, Tensor
from mummi.distributions import DiagGaussian, kl_divergence, log_prob, poe_fuse, sample_reparam
from mummi.envs import MissingnessModel, collect_episode, env_config, generate_masks
from mummi.losses import infonce_embeddings, infonce_from_scores, mi_lower_bound_estimate, world_model_loss
from mummi.mssm import MSSM
from mummi.optim import Adam
from mummi.persistence import load_episode, save_episode

from conftest import tiny_batch, tiny_config
from test_agent import brute_force_lambda, small_run_config

PRESET = Path(__file__).resolve().parents[1] / "configs" / "toy2d.json"
SEEDS = (0, 1, 2)
EVAL_EPISODES = 10


# 1-5: numerical oracles

def test_c1_gradient_fidelity(accept):
    batch = tiny_batch(B=2, T=3, rate=0.34)
    t0 = time.perf_counter()
    errors = {}
    for variant in ("mummi", "elbo"):
        model = MSSM(tiny_config())
        rep = dm.check_gradients(lambda: world_model_loss(model, batch, variant, seed=0).total, model.params.subset(""))
        errors[variant] = (rep.max_rel_error, rep.worst_param, rep.n_checked)
    secs = time.perf_counter() - t0
    ok = all(e[0] < 1e-4 for e in errors.values()) and secs < 30
    detail = "; ".join(f"{v} max rel err {e[0]:.2e} over {e[2]} coords (worst {e[1]})" for v, e in errors.items())
    assert accept(1, ok, f"{detail}; {secs:.1f}s")


def test_c2_poe_oracle(accept):
    rng = np.random.default_rng(0)
    xs = np.linspace(-40, 40, 400_001)
    worst = 0.0
    for i in range(200):
        k = 2 + i % 2
        mus, sds = rng.uniform(-3, 3, k), rng.uniform(0.3, 3, k)
        fused = poe_fuse([DiagGaussian([m], [s]) for m, s in zip(mus, sds)])
        logp = sum(-0.5 * ((xs - m) / s) ** 2 for m, s in zip(mus, sds))
        prod = np.exp(logp - logp.max())
        prod /= np.trapezoid(prod, xs)
        mu, sd = fused.mean.item(), fused.std.item()
        closed = np.exp(-0.5 * ((xs - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
        worst = max(worst, 0.5 * np.trapezoid(np.abs(closed - prod), xs))
    assert accept(2, worst < 1e-6, f"max total-variation distance {worst:.2e} over 200 pairs/triples")


def test_c3_kl_monte_carlo(accept):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        q = DiagGaussian(rng.uniform(-2, 2, 3), rng.uniform(0.3, 2, 3))
        p = DiagGaussian(rng.uniform(-2, 2, 3), rng.uniform(0.3, 2, 3))
        x = sample_reparam(q, rng.standard_normal((10**6, 3)))
        s = log_prob(q, x).data - log_prob(p, x).data
        z = abs(s.mean() - kl_divergence(q, p).item()) / (s.std() / np.sqrt(s.size))
        worst = max(worst, z)
    assert accept(3, worst < 3, f"max |MC - closed form| = {worst:.2f} standard errors over 50 pairs")


def _trained_mi_estimate(n=256, mi=1.0, steps=400, seed=0):
    rho = np.sqrt(1 - np.exp(-2 * mi))
    rng = np.random.default_rng(seed)

    def draw():
        x = rng.standard_normal((n, 1))
        y = rho * x + np.sqrt(1 - rho**2) * rng.standard_normal((n, 1))
        return x, y

    wx, wy = dm.parameter(rng.normal(0, 0.1, (1, 4))), dm.parameter(rng.normal(0, 0.1, (1, 4)))
    opt = Adam([wx, wy], lr=0.02)
    for _ in range(steps):
        x, y = draw()
        with Tape() as tape:
            loss, _ = infonce_embeddings(Tensor(x) @ wx, Tensor(y) @ wy)
            opt.zero_grad()
            tape.backward(loss)
        opt.step()
    estimates = []
    for _ in range(100):
        x, y = draw()
        loss, _ = infonce_embeddings(Tensor(x @ wx.data), Tensor(y @ wy.data))
        estimates.append(mi_lower_bound_estimate(loss.item(), n))
    return float(np.mean(estimates))


def test_c4_infonce(accept):
    const_err = max(abs(infonce_from_scores(Tensor(np.full((n, n), c)))[0].item() - np.log(n))
                    for n, c in ((2, 0.0), (17, -3.2), (256, 5.0)))
    rng = np.random.default_rng(0)
    bound_ok = True
    for _ in range(1000):
        n = int(rng.integers(2, 65))
        loss, _ = infonce_from_scores(Tensor(rng.normal(scale=rng.uniform(0.1, 10), size=(n, n))))
        bound_ok &= mi_lower_bound_estimate(loss.item(), n) <= np.log(n) + 1e-12
    est = _trained_mi_estimate()
    ok = const_err < 1e-9 and bound_ok and 0.7 <= est <= 1.0
    assert accept(4, ok, f"constant-score error {const_err:.1e}; bound <= log N on 1000 batches: {bound_ok}; "
                         f"trained estimate {est:.3f} nats for true MI 1.0 (N=256)")


def test_c5_lambda_returns(accept):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        H = int(rng.integers(1, 6))
        r, v = rng.normal(size=H), rng.normal(size=H + 1)
        gamma, lam = rng.uniform(0, 1), rng.uniform(0, 1)
        worst = max(worst, np.abs(lambda_returns(r, v, gamma, lam) - brute_force_lambda(r, v, gamma, lam)).max())
    r, v, gamma = rng.normal(size=5), rng.normal(size=6), 0.97
    one = np.zeros(5)
    acc = v[5]
    for t in reversed(range(5)):
        acc = r[t] + gamma * acc
        one[t] = acc
    collapse = (np.array_equal(lambda_returns(r, v, gamma, 0.0), r + gamma * v[1:])
                and np.array_equal(lambda_returns(r, v, gamma, 1.0), one))
    assert accept(5, worst < 1e-10 and collapse, f"max deviation {worst:.1e} on 1000 draws; collapse exact: {collapse}")


# 9 and 11: protocol and persistence

def test_c9_masking_protocol(accept):
    exact = all((~generate_masks(MissingnessModel(r, s), T, 2)).sum(axis=1).tolist() == [round(r * T)] * 2
                for s in range(100) for r, T in ((0.375, 96), (0.375, 8), (0.75, 100), (0.75, 4)))
    rates = {}
    for rate in (0.375, 0.75):
        dropped = sum(int((~generate_masks(MissingnessModel(rate, s), 100, 1)).sum()) for s in range(1000))
        rates[rate] = dropped / 100_000
    ok = exact and all(abs(v - k) <= 0.001 for k, v in rates.items())
    assert accept(9, ok, f"exact counts: {exact}; empirical rates " + ", ".join(f"{v:.5f} (target {k})"
                                                                                  for k, v in rates.items()))


def test_c11_persistence(accept, tmp_path):
    ep = collect_episode(env_config("toy2d"), seed=3, missingness=MissingnessModel(0.375, 3))
    back = load_episode(save_episode(tmp_path / "ep.npz", ep))
    ep_ok = (np.array_equal(back.actions, ep.actions) and np.array_equal(back.rewards, ep.rewards)
             and all(np.array_equal(back.observations[m], ep.observations[m])
                     and np.array_equal(back.masks[m], ep.masks[m]) for m in ep.modalities))

    full = train_loop(small_run_config(3), tmp_path / "full")
    full.agent.save(tmp_path / "copy.npz")
    clone = Agent(small_run_config(3))
    clone.load(tmp_path / "copy.npz")
    ck_ok = all(np.array_equal(a, b) for sec in ("model", "policy", "opt_model")
                for a, b in zip(full.agent.sections()[sec].values(), clone.sections()[sec].values()))

    train_loop(small_run_config(3), tmp_path / "part", stop_after=2)
    resumed = train_loop(small_run_config(3), tmp_path / "part", resume=True)
    a = [r for r in full.records if r["phase"] == "model"][-1]["loss"]
    b = [r for r in resumed.records if r["phase"] == "model"][-1]["loss"]
    ok = ep_ok and ck_ok and a == b
    assert accept(11, ok, f"episode bit-exact: {ep_ok}; checkpoint bit-exact: {ck_ok}; "
                          f"resumed next-step loss {b!r} vs uninterrupted {a!r}")


# 6, 7, 8, 10: trained agents

def _run_config(variant: str, seed: int) -> C.RunConfig:
    return C.load(PRESET, {"train.variant": variant, "train.seed": seed})


@lru_cache(maxsize=None)
def _trained(variant: str, seed: int, root: str):
    cfg = _run_config(variant, seed)
    run_dir = Path(root) / f"{variant}_{seed}"
    ckpt, stored = run_dir / "checkpoint.npz", run_dir / "config.json"
    t0 = time.perf_counter()
    if ckpt.exists() and stored.exists() and json.loads(stored.read_text()) == cfg.to_dict():
        agent = Agent.from_checkpoint(ckpt, cfg)
        if Agent(cfg).load(ckpt)["step"] != cfg.train.steps:
            agent = train_loop(cfg, run_dir, resume=True).agent
    else:
        agent = train_loop(cfg, run_dir).agent
    return agent, time.perf_counter() - t0


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    root = os.environ.get("MUMMI_ACCEPTANCE_DIR") or str(tmp_path_factory.mktemp("acceptance"))

    def get(variant: str, seed: int):
        return _trained(variant, seed, root)
    return get


_REWARDS: dict = {}


def _mean_reward(runs, variant, seed, rate):
    key = (variant, seed, rate)
    if key not in _REWARDS:
        agent, _ = runs(variant, seed)
        _REWARDS[key] = evaluate(agent, agent.run_config.env_config(), rate, EVAL_EPISODES).mean
    return _REWARDS[key]


@pytest.fixture(scope="session")
def probe_eps():
    return probe_episodes(env_config("toy2d"), 2000, seed=50_000)


@pytest.mark.slow
def test_c6_latent_structure(accept, runs, probe_eps):
    mummi, secs_m = runs("mummi", 0)
    elbo, secs_e = runs("elbo", 0)
    sm, se = latent_samples(mummi.model, probe_eps), latent_samples(elbo.model, probe_eps)
    r2 = {m: linear_probe_r2(sm.means[m], sm.positions).min() for m in sm.modalities}
    dist_m, dist_e = cross_modal_distance(sm, "position", "camera"), cross_modal_distance(se, "position", "camera")
    cal_m, cal_e = calibration_ratio(sm), calibration_ratio(se)
    ok = min(r2.values()) >= 0.8 and dist_m < 0.5 * dist_e and cal_m < cal_e and max(secs_m, secs_e) < 1800
    assert accept(6, ok, "MuMMI probe R2 " + ", ".join(f"{m} {v:.3f}" for m, v in r2.items())
                  + f"; cross-modal distance MuMMI {dist_m:.3f} vs ELBO {dist_e:.3f} (ratio {dist_m / dist_e:.2f})"
                  + f"; calibration ratio MuMMI {cal_m:.3f} vs ELBO {cal_e:.3f}"
                  + f"; training {secs_m:.0f}s / {secs_e:.0f}s")


@pytest.mark.slow
def test_c7_missing_data_robustness(accept, runs, probe_eps):
    r0 = np.mean([_mean_reward(runs, "mummi", s, 0.0) for s in SEEDS])
    r75 = np.mean([_mean_reward(runs, "mummi", s, 0.75) for s in SEEDS])
    probes = [filtered_probe_r2(runs("mummi", s)[0].model, probe_eps, drop=("position",)).min() for s in SEEDS]
    ok = r75 >= 0.6 * r0 and np.mean(probes) >= 0.6
    assert accept(7, ok, f"reward at 75% missing {r75:.2f} vs 0% missing {r0:.2f} (need >= {0.6 * r0:.2f}); "
                         f"camera-only latent probe R2 per seed {np.round(probes, 3).tolist()}")


@pytest.mark.slow
def test_c8_toy_rl_competence(accept, runs):
    rewards = [_mean_reward(runs, "mummi", s, 0.0) for s in SEEDS]
    secs = [runs("mummi", s)[1] for s in SEEDS]
    ok = np.mean(rewards) >= -15 and max(secs) <= 3600
    assert accept(8, ok, f"mean reward {np.mean(rewards):.2f} over seeds {np.round(rewards, 2).tolist()} "
                         f"(random baseline about -45); slowest training {max(secs):.0f}s")


@pytest.mark.slow
def test_c10_ablation_ordering(accept, runs):
    m = [_mean_reward(runs, "mummi", s, 0.0) for s in SEEDS]
    b = [_mean_reward(runs, "mummi-b", s, 0.0) for s in SEEDS]
    violations = [s for s, x, y in zip(SEEDS, m, b) if x < y]
    ok = np.mean(m) >= np.mean(b)
    assert accept(10, ok, f"MuMMI {np.mean(m):.2f} vs MuMMI-b {np.mean(b):.2f} over 3 seeds "
                          f"(per seed {np.round(m, 2).tolist()} vs {np.round(b, 2).tolist()}; "
                          f"seed-level violations: {violations or 'none'})")
