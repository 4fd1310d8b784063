"""Acceptance suite: nine criteria, each printing one PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from upo.autodiff import grad_check, sample_dropout_masks
from upo.config import ExperimentConfig
from upo.datagen import TripleBatch, build_pairs, rank_responses
from upo.loop import load_state, run_experiment, save_state, start, step
from upo.models import (
    HIDDEN_SITE,
    EstimatorModel,
    PolicyModel,
    RewardModel,
    estimator_descriptor,
    new_estimator,
    new_policy,
    new_reward,
    policy_descriptor,
    reward_descriptor,
)
from upo.objectives import (
    dpo_loss,
    estimator_examples,
    estimator_loss,
    nll_regularizer,
    reference_logprobs,
    reward_loss,
    upo_loss,
)
from upo.study import noise_study
from upo.uncertainty import McPrediction, binary_entropy, information_gain, sampling_weights

import conftest
from conftest import TINY, random_batch


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def as_fn(make):
    return lambda p: (lambda r: (r.loss, r.grad))(make(p))


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    batch = random_batch(rng, 5)
    batch = TripleBatch(batch.triples, alpha=rng.random(5), rewards=rng.normal(size=5) * 2)
    pol = new_policy(policy_descriptor(**TINY), 11)
    ref = reference_logprobs(new_policy(policy_descriptor(**TINY), 12), batch)
    rm = new_reward(reward_descriptor(**TINY), 13)
    est = new_estimator(estimator_descriptor(**TINY), 14)
    tpls, labels = estimator_examples(batch, 8, est.descriptor.context)
    masks = sample_dropout_masks({HIDDEN_SITE: (len(tpls), est.descriptor.hidden)}, 0.2, seed=3, count=1)[0]
    checks = {
        "reward_loss": (as_fn(lambda p: reward_loss(RewardModel(rm.descriptor, p), batch, with_grad=True)), rm.params),
        "dpo_loss": (as_fn(lambda p: dpo_loss(PolicyModel(pol.descriptor, p), ref, batch, beta=0.5, with_grad=True)), pol.params),
        "upo_loss": (as_fn(lambda p: upo_loss(PolicyModel(pol.descriptor, p), ref, batch, beta=0.5, with_grad=True)), pol.params),
        "nll_regularizer": (as_fn(lambda p: nll_regularizer(PolicyModel(pol.descriptor, p), batch, with_grad=True)), pol.params),
        "estimator_loss": (as_fn(lambda p: estimator_loss(EstimatorModel(est.descriptor, p), tpls, labels, masks, with_grad=True)), est.params),
    }
    errors = {name: grad_check(fn, params) for name, (fn, params) in checks.items()}
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    report(1, worst < 1e-4 and elapsed < 120, f"max relative gradient error {worst:.2e} (< 1e-4) in {elapsed:.1f}s (< 120s)")


def test_criterion_2_bald():
    rng = np.random.default_rng(1)
    ok_bounds = True
    for _ in range(10_000):
        T = int(rng.integers(2, 16))
        probs = rng.beta(0.4, 0.4, size=T) if rng.random() < 0.5 else rng.random(T)
        g = information_gain(McPrediction("r", probs))
        h = float(binary_entropy(probs.mean()))
        ok_bounds &= 0.0 <= g <= h + 1e-12 and h <= 1.0
    const = max(information_gain(McPrediction("c", [p] * int(rng.integers(2, 16)))) for p in rng.random(1000))
    full = information_gain(McPrediction("f", [1.0, 0.0]))
    ok = ok_bounds and const <= 1e-12 and full == 1.0
    report(2, ok, f"bounds hold on 1e4 predictions={ok_bounds}, constant max B={const:.1e}, B([1,0])={full!r}")


def test_criterion_3_loss_identities():
    rng = np.random.default_rng(2)
    batch = random_batch(rng, 6)
    pol = new_policy(policy_descriptor(**TINY), 21)
    ref_model = new_policy(policy_descriptor(**TINY), 22)
    ref = reference_logprobs(ref_model, batch)
    alpha = rng.random(6)
    d1 = abs(upo_loss(pol, ref, batch, alpha=np.zeros(6)).loss - dpo_loss(pol, ref, batch).loss)
    same = dpo_loss(pol, pol, batch)
    d2 = float(np.max(np.abs(same.per_triple - math.log(2))))
    d3 = abs(upo_loss(pol, ref, batch, alpha=alpha).loss - upo_loss(pol, reference_logprobs(ref_model, batch.swapped()), batch.swapped(), alpha=1 - alpha).loss)
    ok = d1 <= 1e-12 and d2 <= 1e-9 and d3 <= 1e-12
    report(3, ok, f"|upo(a=0)-dpo|={d1:.1e}, max|dpo(theta=ref)-ln2|={d2:.1e}, |upo(a)-upo(swap,1-a)|={d3:.1e}")


def test_criterion_4_prescreen():
    rewards = [0.3, -1.2, 2.5, 0.9, -0.4, 1.7]
    ranked = rank_responses([(i + 1, 0) for i in range(6)], rewards)
    pairs = build_pairs(ranked, 3, prompt=(1,))
    reward = {r.response: r.reward for r in ranked}
    ordered = all(reward[p.chosen] >= reward[p.rejected] for p in pairs)
    report(4, len(pairs) == 9 and ordered, f"{len(pairs)} pairs from 6 responses with top_k=3, chosen >= rejected: {ordered}")


def test_criterion_5_sampling_weights():
    rng = np.random.default_rng(5)
    sums_ok, order_ok = True, True
    for _ in range(2000):
        gains = rng.random(int(rng.integers(1, 30))) * 0.999
        w = sampling_weights(gains, mu=float(rng.uniform(0.2, 4)))
        sums_ok &= abs(w.sum() - 1.0) <= 1e-9
        idx = np.argsort(gains)
        g, ws = gains[idx], w[idx]
        order_ok &= bool(np.all(ws[:-1][np.diff(g) > 1e-9] > ws[1:][np.diff(g) > 1e-9]))
    ex = sampling_weights([0.0, 0.5], mu=1.0)
    ex_err = float(np.max(np.abs(ex - [2 / 3, 1 / 3])))
    report(5, sums_ok and order_ok and ex_err <= 1e-12, f"sum-to-1={sums_ok}, ordering={order_ok}, [0,0.5] -> {ex.tolist()} (err {ex_err:.1e})")


@pytest.mark.slow
def test_criterion_6_denoising():
    t0 = time.perf_counter()
    cfg = ExperimentConfig()
    world, state = start(cfg)
    rows = noise_study(state, world, cfg.iteration_config(), ("random", "margin", "uncertainty"), cfg.study_seeds, cfg.study_pool)
    mean = {s: float(np.mean([r["noise_rate"] for r in rows if r["strategy"] == s])) for s in ("random", "margin", "uncertainty")}
    elapsed = time.perf_counter() - t0
    gap = mean["random"] - mean["uncertainty"]
    ok = mean["uncertainty"] < mean["margin"] < mean["random"] and gap >= 0.10 and elapsed < 600
    detail = ", ".join(f"{k}={v:.3f}" for k, v in mean.items())
    report(6, ok, f"mean noise {detail}; random-uncertainty={gap * 100:.1f}pp (>= 10pp) in {elapsed:.0f}s (< 600s)")


@pytest.mark.slow
def test_criterion_7_self_evolution():
    t0 = time.perf_counter()
    seeds = range(5)
    upo = np.array([[r["win_rate_vs_sft"] for r in run_experiment(ExperimentConfig(seed=s), iterations=3)] for s in seeds])
    ablation = np.array([[r["win_rate_vs_sft"] for r in run_experiment(ExperimentConfig(seed=s), iterations=3, variant="no_estimator")][1:] for s in seeds])
    elapsed = time.perf_counter() - t0
    m_upo, m_abl = upo.mean(axis=0), ablation.mean(axis=0)
    gain = m_upo[1:].max() - m_upo[0]
    ok = gain >= 0.05 and m_abl.max() <= m_upo[1:].max() and elapsed < 1800
    report(
        7, ok,
        f"seed-mean win rate vs SFT {np.round(m_upo, 3).tolist()}, gain {gain * 100:.1f}pp (>= 5pp); "
        f"no_estimator {np.round(m_abl, 3).tolist()} <= best {m_upo[1:].max():.3f}; {elapsed:.0f}s (< 1800s)",
    )


@pytest.mark.slow
def test_criterion_8_determinism(tmp_path):
    cfg = ExperimentConfig(seed=1)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    report(8, a == b, f"two full runs, metrics.csv byte-identical: {a == b} ({len(a)} bytes)")


@pytest.mark.slow
def test_criterion_9_round_trip(tmp_path):
    cfg = ExperimentConfig(seed=2)
    world, s0 = start(cfg)
    s1 = step(s0, cfg, world)
    bitwise, follow = True, True
    for k, state in enumerate((s0, s1)):
        save_state(state, tmp_path / f"s{k}")
        back = load_state(tmp_path / f"s{k}")
        for name in ("policy", "reference", "reward", "estimator", "sft"):
            bitwise &= getattr(back, name).params.values.tobytes() == getattr(state, name).params.values.tobytes()
        a, b = step(state, cfg, world), step(back, cfg, world)
        follow &= a.metrics == b.metrics and a.policy.params.values.tobytes() == b.policy.params.values.tobytes()
    report(9, bitwise and follow, f"parameters bitwise after reload: {bitwise}; next-iteration metrics identical: {follow}")
