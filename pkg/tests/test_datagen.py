import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upo.datagen import (
    DegenerateRankingWarning,
    PreferenceTriple,
    RewardedResponse,
    TripleBatch,
    build_pairs,
    label_seed_data,
    make_world,
    noise_rate,
    rank_responses,
    read_jsonl,
    sample_prompts,
    true_preference,
    utility,
    with_oracle_labels,
    write_jsonl,
)


def probes(n=100, vocab=32, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        x = tuple(int(t) for t in rng.integers(1, vocab, size=3))
        y = tuple(int(t) for t in rng.integers(0, vocab, size=int(rng.integers(1, 8))))
        out.append((x, y))
    return out


def hand_utility(world, x, y):
    """Sum over bigram and cross terms written as explicit loops."""
    lin, feats = 0.0, {}
    prev = [x[-1]] + list(y[:-1])
    for a, b in zip(prev, y):
        feats[("bi", a, b)] = feats.get(("bi", a, b), 0.0) + 1.0 / len(y)
    for a in x:
        for b in y:
            feats[("cross", a, b)] = feats.get(("cross", a, b), 0.0) + 1.0 / (len(x) * len(y))
    V = world.vocab
    wave = 0.0
    for (kind, a, b), v in feats.items():
        if kind == "bi":
            lin += world.w_bigram[a, b] * v
            wave += world.w_wave[a * V + b] * v
        else:
            lin += world.w_cross[a, b] * v
            wave += world.w_wave[V * V + a * V + b] * v
    return lin + 0.25 * math.sin(wave)


def ranked(rewards):
    return rank_responses([(i + 1, 0) for i in range(len(rewards))], rewards)


class TestWorld:
    def test_same_seed_same_utility(self):
        a, b = make_world(3), make_world(3)
        assert [utility(a, x, y) for x, y in probes()] == [utility(b, x, y) for x, y in probes()]

    def test_different_seeds_differ(self):
        a, b = make_world(3), make_world(4)
        assert any(utility(a, x, y) != utility(b, x, y) for x, y in probes())

    def test_constant_sequence_finite(self):
        assert math.isfinite(utility(make_world(0), (5, 5, 5), (5,) * 10))

    def test_matches_hand_evaluation(self):
        w = make_world(1, pair_scale=0.4)
        for x, y in probes(20):
            assert utility(w, x, y) == pytest.approx(hand_utility(w, x, y), abs=1e-10)

    def test_non_constant(self):
        w = make_world(0)
        assert np.std([utility(w, x, y) for x, y in probes()]) > 0.1

    def test_prompts_leave_room(self):
        with pytest.raises(ValueError):
            make_world(0, context=4, prompt_len=(2, 4))


class TestTruePreference:
    def test_order_invariant_and_winner_better(self):
        w = make_world(0)
        for (x, a), (_, b) in zip(probes(50, seed=1), probes(50, seed=2)):
            if a == b:
                continue
            win = true_preference(w, x, a, b)
            assert win == true_preference(w, x, b, a)
            lose = b if win == a else a
            assert utility(w, x, win) >= utility(w, x, lose)

    def test_identical_rejected(self):
        with pytest.raises(ValueError):
            true_preference(make_world(0), (1,), (2,), (2,))

    def test_balanced_sides(self):
        w = make_world(0)
        rng = np.random.default_rng(9)
        first = 0
        for _ in range(1000):
            x = tuple(int(t) for t in rng.integers(1, 32, size=3))
            a = tuple(int(t) for t in rng.integers(1, 32, size=4))
            b = tuple(int(t) for t in rng.integers(1, 32, size=4))
            first += true_preference(w, x, a, b) == a if a != b else 0.5
        assert 0.45 <= first / 1000 <= 0.55


class TestSeedData:
    def test_clean(self):
        w = make_world(0)
        batch = label_seed_data(w, 200, 0.0, seed=1)
        assert noise_rate(batch, w) == 0.0
        assert all(t.oracle_label == "correct" for t in batch)

    def test_noise_rate_tracks_eta(self):
        w = make_world(0)
        batch = label_seed_data(w, 10_000, 0.3, seed=2)
        flipped = np.mean([t.oracle_label == "flipped" for t in batch])
        assert 0.28 <= flipped <= 0.32
        assert noise_rate(batch, w) == pytest.approx(flipped)

    def test_deterministic(self):
        w = make_world(0)
        assert label_seed_data(w, 50, 0.2, seed=3).triples == label_seed_data(w, 50, 0.2, seed=3).triples

    @pytest.mark.parametrize("kw", [dict(n=0, noise_rate=0.1), dict(n=5, noise_rate=0.5), dict(n=5, noise_rate=-0.1)])
    def test_errors(self, kw):
        with pytest.raises(ValueError):
            label_seed_data(make_world(0), seed=0, **kw)

    def test_responses_fit_context(self):
        w = make_world(0)
        for t in label_seed_data(w, 300, 0.1, seed=4):
            assert len(t.prompt) + max(len(t.chosen), len(t.rejected)) <= w.context

    def test_prompts_deterministic(self):
        w = make_world(0)
        assert sample_prompts(w, 20, 5) == sample_prompts(w, 20, 5)


class TestBuildPairs:
    @pytest.mark.parametrize("n,k,expect", [(6, 3, 9), (2, 1, 1), (4, 2, 4)])
    def test_counts(self, n, k, expect):
        assert len(build_pairs(ranked(list(range(n))), k)) == expect

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=8, unique=True), st.integers(1, 7))
    def test_size_and_order(self, rewards, k):
        k = min(k, len(rewards) - 1)
        rs = ranked(rewards)
        pairs = build_pairs(rs, k)
        assert len(pairs) == k * (len(rewards) - k)
        reward = {r.response: r.reward for r in rs}
        assert all(reward[p.chosen] >= reward[p.rejected] for p in pairs)

    def test_chosen_from_top_ranks(self):
        rs = ranked([0.1, 0.9, 0.5, 0.3, 0.7, 0.2])
        top = {r.response for r in rs if r.rank < 3}
        assert all(p.chosen in top and p.rejected not in top for p in build_pairs(rs, 3))

    def test_degenerate_warns(self):
        with pytest.warns(DegenerateRankingWarning):
            pairs = build_pairs(ranked([1.0, 1.0, 1.0]), 1)
        assert [p.chosen for p in pairs] == [(1, 0), (1, 0)]

    def test_all_pairs_mode(self):
        assert len(build_pairs(ranked([3.0, 2.0, 1.0, 0.0]), 0)) == 6

    @pytest.mark.parametrize("k", [4, -1])
    def test_bad_top_k(self, k):
        with pytest.raises(ValueError):
            build_pairs(ranked([1.0, 2.0, 3.0, 4.0]), k)

    def test_too_few(self):
        with pytest.raises(ValueError):
            build_pairs(ranked([1.0]), 1)

    def test_ranks_are_permutation(self):
        rs = rank_responses([(1,), (2,), (3,)], [0.5, 0.5, 2.0])
        assert sorted(r.rank for r in rs) == [0, 1, 2]
        assert [r.id for r in rs] == [2, 0, 1]


class TestNoiseRate:
    def test_swapped_is_one(self):
        w = make_world(0)
        batch = label_seed_data(w, 100, 0.0, seed=1)
        assert noise_rate(batch.swapped(), w) == 1.0

    def test_one_in_four(self):
        w = make_world(0)
        t = label_seed_data(w, 4, 0.0, seed=1).triples
        assert noise_rate(t[:3] + [t[3].swapped()], w) == 0.25

    def test_empty(self):
        with pytest.raises(ValueError):
            noise_rate([], make_world(0))

    def test_oracle_labels(self):
        w = make_world(0)
        t = label_seed_data(w, 10, 0.0, seed=1).triples
        labels = [x.oracle_label for x in with_oracle_labels([t[0].swapped(), t[1]], w)]
        assert labels == ["flipped", "correct"]


class TestTriples:
    def test_identical_rejected(self):
        with pytest.raises(ValueError):
            PreferenceTriple("a", (1,), (2,), (2,))

    def test_batch_validation(self):
        t = [PreferenceTriple("a", (1,), (2,), (3,))]
        with pytest.raises(ValueError):
            TripleBatch([])
        with pytest.raises(ValueError):
            TripleBatch(t, alpha=[1.5])
        with pytest.raises(ValueError):
            TripleBatch(t, rewards=[1.0, 2.0])

    def test_jsonl_round_trip(self, tmp_path):
        w = make_world(0)
        triples = label_seed_data(w, 20, 0.3, seed=1).triples + [PreferenceTriple("g", (1,), (2,), (3, 0), "generated(2)")]
        path = tmp_path / "d.jsonl"
        write_jsonl(path, triples)
        assert read_jsonl(path) == triples
        row = json.loads(path.read_text().splitlines()[-1])
        assert row == {"id": "g", "prompt": [1], "chosen": [2], "rejected": [3, 0], "provenance": "generated(2)", "oracle_label": None}
