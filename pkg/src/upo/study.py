"""Reliable-data sampling strategies compared by the oracle noise rate of what they select."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import STRATEGIES, IterationConfig
from .datagen import PreferenceTriple, RewardedResponse, SyntheticWorld, noise_rate, sample_prompts
from .loop import IterationState, _weighted_without_replacement, derive_seed, generate_candidates
from .models import Tokens
from .uncertainty import estimate_records

__all__ = ["CandidateGroup", "candidate_pool", "select_strategy", "noise_study"]


@dataclass(frozen=True)
class CandidateGroup:
    prompt: Tokens
    ranked: list[RewardedResponse]
    pairs: list[PreferenceTriple]


def candidate_pool(state: IterationState, world: SyntheticWorld, cfg: IterationConfig, size: int, seed: int) -> list[CandidateGroup]:
    """Whole-prompt candidate groups from the current policy and reward model.

    Prompts are added until the pool holds ``size`` pairs; the last group is
    trimmed so the pool has exactly ``size`` pairs.
    """
    if size < 1:
        raise ValueError("pool size must be >= 1")
    groups: list[CandidateGroup] = []
    total, round_ = 0, 0
    while total < size:
        prompts = sample_prompts(world, max(size // 2, 8), derive_seed(seed, "pool-prompts", round_))
        for x, ranked, pairs in generate_candidates(state.policy, state.reward, prompts, cfg, derive_seed(seed, "pool", round_), f"pool{round_}"):
            if total >= size:
                break
            pairs = pairs[: size - total]
            if pairs:
                groups.append(CandidateGroup(x, ranked, pairs))
                total += len(pairs)
        round_ += 1
        if round_ > 100:
            raise ValueError("could not fill the candidate pool: the policy keeps repeating itself")
    return groups


def _cb_rr(groups: Sequence[CandidateGroup], rng: np.random.Generator) -> list[PreferenceTriple]:
    out = []
    for g in groups:
        best = g.ranked[0]
        lower = [r for r in g.ranked[1:] if r.reward < best.reward and r.response != best.response]
        if not lower:
            continue
        lose = lower[int(rng.integers(len(lower)))]
        out.append(PreferenceTriple(f"cbrr-{best.id}-{lose.id}-{len(out)}", g.prompt, best.response, lose.response, "cb_rr"))
    return out


def _margin(groups: Sequence[CandidateGroup]) -> list[PreferenceTriple]:
    out = []
    for g in groups:
        reward = {r.response: r.reward for r in g.ranked}
        out.append(max(g.pairs, key=lambda t: reward[t.chosen] - reward[t.rejected]))
    return out


def select_strategy(name: str, groups: Sequence[CandidateGroup], state: IterationState, cfg: IterationConfig, seed: int) -> list[PreferenceTriple]:
    """Pairs chosen by one strategy.

    ``random`` and ``uncertainty`` keep ``easy_fraction`` of the pool;
    ``cb_rr`` and ``margin`` keep one pair per prompt.
    """
    if name not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}; valid: {', '.join(STRATEGIES)}")
    rng = np.random.default_rng(seed)
    pool = [t for g in groups for t in g.pairs]
    k = max(1, round(cfg.easy_fraction * len(pool)))
    if name == "random":
        return [pool[i] for i in np.sort(rng.choice(len(pool), size=k, replace=False))]
    if name == "cb_rr":
        return _cb_rr(groups, rng)
    if name == "margin":
        return _margin(groups)
    triples, records = estimate_records(
        state.estimator, pool, cfg.T, cfg.dropout, cfg.mu, derive_seed(seed, "mc"),
        cfg.weight_scope, cfg.alpha_mode, cfg.disagreement, cfg.gate_threshold,
    )
    P = np.array([r.p_weight for r in records])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        idx = _weighted_without_replacement(rng, P, k)
    return [triples[i] for i in np.sort(idx)]


def noise_study(
    state: IterationState,
    world: SyntheticWorld,
    cfg: IterationConfig,
    strategies: Sequence[str] = STRATEGIES,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    pool_size: int = 200,
) -> list[dict]:
    """One row per (seed, strategy): ``{"strategy", "seed", "n_selected", "noise_rate"}``.

    All strategies of a seed share one candidate pool.
    """
    bad = [s for s in strategies if s not in STRATEGIES]
    if bad:
        raise ValueError(f"unknown strategy {bad[0]!r}; valid: {', '.join(STRATEGIES)}")
    rows = []
    for s in seeds:
        groups = candidate_pool(state, world, cfg, pool_size, derive_seed(state.root_seed, "study", s))
        for name in strategies:
            picked = select_strategy(name, groups, state, cfg, derive_seed(state.root_seed, "study", s, name))
            rows.append({
                "strategy": name,
                "seed": int(s),
                "n_selected": len(picked),
                "noise_rate": noise_rate(picked, world) if picked else float("nan"),
            })
    return rows
