import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upo.autodiff import sample_dropout_masks
from upo.models import (
    END_ID,
    HIDDEN_SITE,
    BackboneDescriptor,
    ModelError,
    PolicyModel,
    RewardModel,
    estimator_descriptor,
    estimator_log_probs,
    estimator_prob,
    new_estimator,
    new_policy,
    next_token_logits,
    parse_template,
    policy_descriptor,
    policy_logprob,
    policy_sample,
    render_template,
    reward_descriptor,
    reward_score,
    sample_responses,
    template_ids,
)

from conftest import TINY


def hidden_at(params, ids, t):
    """Loop-by-loop backbone features at position ``t`` (oracle)."""
    d = params["embed"].shape[1]
    pooled = [sum(params["embed"][ids[s], k] for s in range(t + 1)) / (t + 1) for k in range(d)]
    last = [params["embed"][ids[t], k] + params["pos"][t, k] for k in range(d)]
    feat = pooled + last
    w1, b1 = params["w1"], params["b1"]
    return [max(0.0, sum(feat[i] * w1[i, j] for i in range(2 * d)) + b1[j]) for j in range(w1.shape[1])]


def head_at(params, ids, t):
    h = hidden_at(params, ids, t)
    w2, b2 = params["w2"], params["b2"]
    return [sum(h[j] * w2[j, c] for j in range(len(h))) + b2[c] for c in range(w2.shape[1])]


def oracle_logprob(policy, x, y):
    V = policy.descriptor.vocab
    seq = list(x) + list(y)
    ids = [t + V * (i >= len(x)) for i, t in enumerate(seq)]
    total = 0.0
    for t in range(len(x) - 1, len(seq) - 1):
        logits = head_at(policy.params, ids, t)
        m = max(logits)
        log_z = m + math.log(sum(math.exp(v - m) for v in logits))
        total += logits[seq[t + 1]] - log_z
    return total


class TestDescriptor:
    def test_rejects_small_vocab(self):
        with pytest.raises(ModelError):
            BackboneDescriptor(vocab=3)

    def test_rejects_bad_dropout(self):
        with pytest.raises(ModelError):
            BackboneDescriptor(dropout=1.0)

    def test_json_round_trip(self):
        d = estimator_descriptor(**TINY)
        assert BackboneDescriptor.from_json(d.to_json()) == d

    def test_estimator_context_fits_full_template(self):
        d = estimator_descriptor(vocab=32, context=16)
        assert d.context == 36 and d.vocab == 36 and d.head == 2


class TestPolicyLogprob:
    def test_uniform_policy(self):
        policy = new_policy(policy_descriptor(), seed=0, zero_head=True)
        assert policy_logprob(policy, (3, 4), (5, 6, 7)) == pytest.approx(3 * math.log(1 / 32), abs=1e-4)
        assert policy_logprob(policy, (3, 4), (5, 6, 7)) == pytest.approx(-10.3972, abs=1e-4)

    def test_empty_response(self, tiny_policy):
        assert policy_logprob(tiny_policy, (1, 2), ()) == 0.0

    def test_matches_hand_evaluated_softmax_chain(self, tiny_policy):
        x, y = (3, 1), (4, 4, 2, END_ID)
        assert abs(policy_logprob(tiny_policy, x, y) - oracle_logprob(tiny_policy, x, y)) < 1e-10

    def test_out_of_range_token(self, tiny_policy):
        with pytest.raises(ModelError):
            policy_logprob(tiny_policy, (1,), (9,))

    def test_overflow(self, tiny_policy):
        with pytest.raises(ModelError):
            policy_logprob(tiny_policy, (1, 2, 3), (1, 2, 3, 4, 5, 6))

    def test_empty_prompt_rejected(self, tiny_policy):
        with pytest.raises(ModelError):
            policy_logprob(tiny_policy, (), (1,))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 7), min_size=0, max_size=6), st.integers(0, 6))
    def test_additive_over_splits(self, y, k):
        policy = new_policy(policy_descriptor(**TINY), seed=1)
        x, y = (2,), tuple(y)
        k = min(k, len(y))
        tail = 0.0
        for j in range(k, len(y)):
            logits = next_token_logits(policy, [(x, y[:j])])[0]
            tail += logits[y[j]] - (logits.max() + np.log(np.exp(logits - logits.max()).sum()))
        whole = policy_logprob(policy, x, y)
        assert whole <= 0.0
        assert whole == pytest.approx(policy_logprob(policy, x, y[:k]) + tail, abs=1e-10)

    def test_next_token_distribution_normalized(self, tiny_policy):
        logits = next_token_logits(tiny_policy, [((1, 2), (3,)), ((4,), ())])
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


class TestSampling:
    def test_greedy_duplicates_argmax(self, tiny_policy):
        out = policy_sample(tiny_policy, (1, 2), n=3, greedy=True)
        assert out[0] == out[1] == out[2]
        seq = []
        while True:
            tok = int(np.argmax(next_token_logits(tiny_policy, [((1, 2), tuple(seq))])[0]))
            seq.append(tok)
            if tok == END_ID or len(seq) + 2 >= 8:
                break
        assert out[0] == tuple(seq)

    def test_same_seed_same_samples(self, tiny_policy):
        a = policy_sample(tiny_policy, (1, 2), n=5, seed=3)
        b = policy_sample(tiny_policy, (1, 2), n=5, seed=3)
        assert a == b

    def test_responses_end_or_fill_context(self, tiny_policy):
        for y in policy_sample(tiny_policy, (1, 2, 3), n=20, seed=1):
            assert y[-1] == END_ID or len(y) + 3 == 8

    def test_first_token_frequencies_match_softmax(self):
        policy = new_policy(policy_descriptor(**TINY), seed=5)
        logits = next_token_logits(policy, [((1,), ())])[0]
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        draws = sample_responses(policy, [(1,)] * 10_000, 1, temperature=1.0, top_p=1.0, seed=2)
        firsts = np.bincount([d[0][0] for d in draws], minlength=8) / 10_000
        np.testing.assert_allclose(firsts, probs, atol=0.02)

    def test_nucleus_truncates_tail(self):
        policy = new_policy(policy_descriptor(**TINY), seed=5)
        logits = next_token_logits(policy, [((1,), ())])[0]
        top = int(np.argmax(logits))
        draws = sample_responses(policy, [(1,)] * 200, 1, temperature=1.0, top_p=1e-9, seed=0)
        assert {d[0][0] for d in draws} == {top}

    @pytest.mark.parametrize("kw", [dict(temperature=0.0), dict(top_p=0.0), dict(top_p=1.5), dict(n=0)])
    def test_precondition_errors(self, tiny_policy, kw):
        args = dict(temperature=0.8, top_p=0.9, n=1) | kw
        with pytest.raises(ModelError):
            policy_sample(tiny_policy, (1,), **args)


class TestReward:
    def test_zero_weights(self):
        d = reward_descriptor(**TINY)
        rm = RewardModel(d, new_policy(d, 0).params.zeros_like())
        assert reward_score(rm, (1, 2), (3, 4)) == 0.0

    def test_hand_evaluated_three_neuron_case(self, tiny_reward):
        d = BackboneDescriptor(vocab=4, context=4, embed=2, hidden=3, segments=2, head=1, kind="reward")
        rng = np.random.default_rng(8)
        base = new_policy(d, 0).params
        rm = RewardModel(d, base.with_values(rng.normal(size=base.values.size)))
        x, y = (1, 3), (2,)
        ids = [1, 3, 2 + 4]
        assert abs(reward_score(rm, x, y) - head_at(rm.params, ids, 2)[0]) < 1e-10

    def test_pure(self, tiny_reward):
        assert reward_score(tiny_reward, (1,), (2, 3)) == reward_score(tiny_reward, (1,), (2, 3))

    def test_overflow(self, tiny_reward):
        with pytest.raises(ModelError):
            reward_score(tiny_reward, (1, 2, 3, 4), (1, 2, 3, 4, 5))


class TestTemplates:
    def test_layout(self):
        ids = template_ids(32)
        assert render_template((1, 2), (3,), ()) == (ids["BOS"], 1, 2, ids["SEP"], 3, ids["SEP"], ids["EOS"])

    def test_order_sensitive(self):
        assert render_template((1,), (2,), (3,)) != render_template((1,), (3,), (2,))

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.integers(0, 31), min_size=1, max_size=5),
        st.lists(st.integers(0, 31), max_size=8),
        st.lists(st.integers(0, 31), max_size=8),
    )
    def test_round_trip(self, x, a, b):
        assert parse_template(render_template(tuple(x), tuple(a), tuple(b))) == (tuple(x), tuple(a), tuple(b))

    def test_overflow(self):
        with pytest.raises(ModelError):
            render_template((1,) * 10, (2,) * 10, (3,) * 10, context=20)


class TestEstimator:
    def test_repeated_calls_identical(self, tiny_estimator):
        tpl = render_template((1,), (2, 3), (4,), vocab=8, context=tiny_estimator.descriptor.context)
        assert estimator_prob(tiny_estimator, tpl) == estimator_prob(tiny_estimator, tpl)

    def test_rate_zero_masks_match_mask_free(self, tiny_estimator):
        tpl = render_template((1,), (2, 3), (4,), vocab=8, context=20)
        masks = sample_dropout_masks({HIDDEN_SITE: (tiny_estimator.descriptor.hidden,)}, 0.0, seed=0, count=1)[0]
        assert estimator_prob(tiny_estimator, tpl, masks) == estimator_prob(tiny_estimator, tpl)

    def test_probabilities_normalized(self):
        est = new_estimator(estimator_descriptor(**TINY), seed=4)
        rng = np.random.default_rng(0)
        tpls = []
        for _ in range(1000):
            x = tuple(rng.integers(0, 8, size=rng.integers(1, 4)))
            a = tuple(rng.integers(0, 8, size=rng.integers(0, 5)))
            b = tuple(rng.integers(0, 8, size=rng.integers(0, 5)))
            tpls.append(render_template(x, a, b, vocab=8, context=20))
        p = np.exp(estimator_log_probs(est, tpls))
        assert np.all((p >= 0) & (p <= 1))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_distinguishes_order(self, tiny_estimator):
        a = render_template((1,), (2, 3), (4,), vocab=8, context=20)
        b = render_template((1,), (4,), (2, 3), vocab=8, context=20)
        assert estimator_prob(tiny_estimator, a) != estimator_prob(tiny_estimator, b)
