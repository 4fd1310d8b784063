"""Synthetic preference world, preference triples and candidate-pair construction.

The world hides a utility ``U*(x, y) = w . f(x, y) + 0.25 sin(w' . f(x, y))``
where ``f`` is a normalized bag of token bigrams: adjacent bigrams that end
inside the response (the first one straddles the prompt boundary) and
prompt-token/response-token co-occurrences. Models under training never see
``U*``; it only labels seed data and audits noise rates.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .models import END_ID, Tokens

__all__ = [
    "SyntheticWorld",
    "PreferenceTriple",
    "TripleBatch",
    "RewardedResponse",
    "make_world",
    "utility",
    "true_preference",
    "label_seed_data",
    "rank_responses",
    "build_pairs",
    "noise_rate",
    "sample_prompts",
    "write_jsonl",
    "read_jsonl",
]


class DegenerateRankingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SyntheticWorld:
    seed: int
    vocab: int
    context: int
    prompt_len: tuple[int, int]
    seed_response_len: tuple[int, int]
    w_bigram: np.ndarray = field(repr=False)
    w_cross: np.ndarray = field(repr=False)
    w_wave: np.ndarray = field(repr=False)

    def features(self, x: Tokens, y: Tokens) -> np.ndarray:
        V = self.vocab
        bi = np.zeros((V, V))
        cross = np.zeros((V, V))
        if y:
            prev = (x[-1],) + tuple(y[:-1])
            np.add.at(bi, (np.asarray(prev), np.asarray(y)), 1.0)
            bi /= len(y)
            if x:
                xs = np.repeat(np.asarray(x), len(y))
                ys = np.tile(np.asarray(y), len(x))
                np.add.at(cross, (xs, ys), 1.0)
                cross /= len(x) * len(y)
        return np.concatenate([bi.ravel(), cross.ravel()])


def make_world(
    seed: int,
    vocab: int = 32,
    context: int = 16,
    prompt_len: tuple[int, int] = (2, 4),
    seed_response_len: tuple[int, int] = (1, 8),
    pair_scale: float = 0.7,
) -> SyntheticWorld:
    """Draw a reproducible hidden utility.

    Bigram weights carry a shared per-token preference plus pair-specific
    terms of scale ``pair_scale``, so a unigram-level learner gets most but
    not all of the signal.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x57]))
    V = vocab
    unigram = rng.normal(0.0, 1.0, V)
    w_bigram = unigram[None, :] + pair_scale * rng.normal(0.0, 1.0, (V, V))
    w_cross = pair_scale * rng.normal(0.0, 1.0, (V, V))
    w_wave = rng.normal(0.0, 2.0, 2 * V * V)
    if prompt_len[1] + 1 > context:
        raise ValueError("prompts leave no room for a response")
    return SyntheticWorld(int(seed), V, context, tuple(prompt_len), tuple(seed_response_len), w_bigram, w_cross, w_wave)


def utility(world: SyntheticWorld, x: Tokens, y: Tokens) -> float:
    f = world.features(tuple(x), tuple(y))
    w = np.concatenate([world.w_bigram.ravel(), world.w_cross.ravel()])
    return float(w @ f + 0.25 * np.sin(world.w_wave @ f))


def true_preference(world: SyntheticWorld, x: Tokens, y1: Tokens, y2: Tokens) -> Tokens:
    """Winner of ``y1`` vs ``y2`` under ``U*``; exact ties go to the lexicographically smaller one."""
    y1, y2 = tuple(y1), tuple(y2)
    if y1 == y2:
        raise ValueError("true_preference needs two distinct responses")
    u1, u2 = utility(world, x, y1), utility(world, x, y2)
    if u1 == u2:
        return min(y1, y2)
    return y1 if u1 > u2 else y2


def sample_prompts(world: SyntheticWorld, n: int, seed: int) -> list[Tokens]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x50]))
    lo, hi = world.prompt_len
    lengths = rng.integers(lo, hi + 1, size=n)
    return [tuple(int(t) for t in rng.integers(1, world.vocab, size=k)) for k in lengths]


def random_response(world: SyntheticWorld, rng: np.random.Generator, max_len: int) -> Tokens:
    lo, hi = world.seed_response_len
    k = int(rng.integers(lo, min(hi, max_len - 1) + 1))
    return tuple(int(t) for t in rng.integers(1, world.vocab, size=k)) + (END_ID,)


# ---------------------------------------------------------------------------
# preference data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreferenceTriple:
    id: str
    prompt: Tokens
    chosen: Tokens
    rejected: Tokens
    provenance: str = "seed"
    oracle_label: str | None = None

    def __post_init__(self):
        if tuple(self.chosen) == tuple(self.rejected):
            raise ValueError(f"triple {self.id}: chosen and rejected are identical")
        if self.oracle_label not in (None, "correct", "flipped"):
            raise ValueError(f"triple {self.id}: bad oracle label {self.oracle_label!r}")

    def swapped(self) -> "PreferenceTriple":
        flipped = {"correct": "flipped", "flipped": "correct"}.get(self.oracle_label)
        return replace(self, chosen=self.rejected, rejected=self.chosen, oracle_label=flipped)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "prompt": list(self.prompt),
            "chosen": list(self.chosen),
            "rejected": list(self.rejected),
            "provenance": self.provenance,
            "oracle_label": self.oracle_label,
        }

    @classmethod
    def from_json(cls, row: dict) -> "PreferenceTriple":
        return cls(
            str(row["id"]),
            tuple(int(t) for t in row["prompt"]),
            tuple(int(t) for t in row["chosen"]),
            tuple(int(t) for t in row["rejected"]),
            str(row["provenance"]),
            row.get("oracle_label"),
        )


@dataclass
class TripleBatch:
    """Triples plus optional aligned per-triple alpha weights and chosen-response rewards."""

    triples: list[PreferenceTriple]
    alpha: np.ndarray | None = None
    rewards: np.ndarray | None = None

    def __post_init__(self):
        if not self.triples:
            raise ValueError("a TripleBatch must be non-empty")
        n = len(self.triples)
        for name in ("alpha", "rewards"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.float64)
                if arr.shape != (n,):
                    raise ValueError(f"{name} has shape {arr.shape}, expected ({n},)")
                setattr(self, name, arr)
        if self.alpha is not None and (np.any(self.alpha < 0) or np.any(self.alpha > 1)):
            raise ValueError("alpha weights must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self):
        return iter(self.triples)

    def swapped(self) -> "TripleBatch":
        return TripleBatch([t.swapped() for t in self.triples], self.alpha, self.rewards)

    def subset(self, index: Sequence[int]) -> "TripleBatch":
        index = list(index)
        pick = lambda a: None if a is None else a[index]
        return TripleBatch([self.triples[i] for i in index], pick(self.alpha), pick(self.rewards))


def label_seed_data(world: SyntheticWorld, n: int, noise_rate: float, seed: int) -> TripleBatch:
    """``n`` oracle-labeled triples on random responses, each flipped with probability ``noise_rate``."""
    if not 0.0 <= noise_rate < 0.5:
        raise ValueError(f"noise rate must be in [0, 0.5), got {noise_rate}")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    prompts = sample_prompts(world, n, seed)
    triples = []
    for j, x in enumerate(prompts):
        room = world.context - len(x)
        a = random_response(world, rng, room)
        b = random_response(world, rng, room)
        while b == a:
            b = random_response(world, rng, room)
        win = true_preference(world, x, a, b)
        lose = b if win == a else a
        flip = bool(rng.random() < noise_rate)
        if flip:
            win, lose = lose, win
        triples.append(PreferenceTriple(f"seed-{j}", x, win, lose, "seed", "flipped" if flip else "correct"))
    return TripleBatch(triples)


@dataclass(frozen=True)
class RewardedResponse:
    response: Tokens
    reward: float
    rank: int = -1
    id: int = 0


def rank_responses(responses: Sequence[Tokens], rewards: Sequence[float]) -> list[RewardedResponse]:
    """Sort by reward descending (ties by response id) and assign ranks."""
    order = sorted(range(len(responses)), key=lambda i: (-float(rewards[i]), i))
    return [RewardedResponse(tuple(responses[i]), float(rewards[i]), rank, i) for rank, i in enumerate(order)]


def build_pairs(
    responses: Sequence[RewardedResponse],
    top_k: int,
    prompt: Tokens = (),
    id_prefix: str = "pair",
    provenance: str = "generated",
) -> list[PreferenceTriple]:
    """Pre-screened preference pairs from ranked responses.

    Chosen responses come from the top ``top_k`` ranks and rejected ones from
    the rest. ``top_k=0`` disables the rule and emits every ordered pair
    (higher reward chosen). Pairs of identical sequences are skipped.
    """
    if len(responses) < 2:
        raise ValueError("need at least two responses")
    ranked = sorted(responses, key=lambda r: (-r.reward, r.id))
    n = len(ranked)
    if top_k == 0:
        combos = [(i, j) for i in range(n) for j in range(i + 1, n)]
    elif 1 <= top_k < n:
        combos = [(i, j) for i in range(top_k) for j in range(top_k, n)]
    else:
        raise ValueError(f"top_k must be in [1, {n - 1}] (or 0 for all pairs), got {top_k}")
    if len({r.reward for r in ranked}) == 1:
        warnings.warn("all rewards identical: pairs follow id order", DegenerateRankingWarning, stacklevel=2)
    out = []
    for i, j in combos:
        w, l = ranked[i], ranked[j]
        if w.response == l.response:
            continue
        out.append(PreferenceTriple(f"{id_prefix}-{w.id}-{l.id}", tuple(prompt), w.response, l.response, provenance))
    return out


def noise_rate(batch: TripleBatch | Iterable[PreferenceTriple], world: SyntheticWorld) -> float:
    """Fraction of triples whose labeled direction disagrees with ``U*``."""
    triples = list(batch)
    if not triples:
        raise ValueError("noise rate of an empty batch is undefined")
    wrong = sum(true_preference(world, t.prompt, t.chosen, t.rejected) != tuple(t.chosen) for t in triples)
    return wrong / len(triples)


def with_oracle_labels(triples: Iterable[PreferenceTriple], world: SyntheticWorld) -> list[PreferenceTriple]:
    out = []
    for t in triples:
        ok = true_preference(world, t.prompt, t.chosen, t.rejected) == tuple(t.chosen)
        out.append(replace(t, oracle_label="correct" if ok else "flipped"))
    return out


def write_jsonl(path: str | Path, triples: Iterable[PreferenceTriple]) -> None:
    with open(path, "w") as fh:
        for t in triples:
            fh.write(json.dumps(t.to_json()) + "\n")


def read_jsonl(path: str | Path) -> list[PreferenceTriple]:
    with open(path) as fh:
        return [PreferenceTriple.from_json(json.loads(line)) for line in fh if line.strip()]
