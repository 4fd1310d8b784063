"""Toy policy, reward model and pairwise estimator on one small backbone.

Backbone: segment-aware token embedding, mean-pooled context concatenated
with the last-token feature (plus a position embedding), one ReLU hidden
layer followed by a dropout site, then a task head.

Token conventions. The policy vocabulary has ``V`` ids: ``END_ID`` (0)
terminates a response and ``1..V-1`` are content tokens. The estimator reads
rendered templates and owns four extra ids above the policy vocabulary for
``BOS``, ``SEP``, ``EOS`` and padding.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .autodiff import DropoutMask, Graph, ParamVector, forward

Tokens = tuple[int, ...]

END_ID = 0
HIDDEN_SITE = "hidden"
TEMPLATE_EXTRA = 4


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneDescriptor:
    vocab: int = 32
    context: int = 16
    embed: int = 16
    hidden: int = 32
    dropout: float = 0.1
    segments: int = 2
    head: int = 32  # output width: vocab for the policy, 1 reward, 2 estimator
    kind: str = "policy"

    def __post_init__(self):
        if self.vocab < 4 or self.context < 4:
            raise ModelError(f"vocab and context must be >= 4, got {self.vocab}, {self.context}")
        if min(self.embed, self.hidden, self.segments, self.head) < 1:
            raise ModelError("all dimensions must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout rate must be in [0, 1), got {self.dropout}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: Mapping) -> "BackboneDescriptor":
        return cls(**data)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "embed": (self.vocab * self.segments, self.embed),
            "pos": (self.context, self.embed),
            "w1": (2 * self.embed, self.hidden),
            "b1": (self.hidden,),
            "w2": (self.hidden, self.head),
            "b2": (self.head,),
        }


def policy_descriptor(vocab=32, context=16, embed=16, hidden=32, dropout=0.1) -> BackboneDescriptor:
    return BackboneDescriptor(vocab, context, embed, hidden, dropout, segments=2, head=vocab, kind="policy")


def reward_descriptor(vocab=32, context=16, embed=16, hidden=32, dropout=0.1) -> BackboneDescriptor:
    return BackboneDescriptor(vocab, context, embed, hidden, dropout, segments=2, head=1, kind="reward")


def estimator_descriptor(vocab=32, context=16, embed=16, hidden=32, dropout=0.1) -> BackboneDescriptor:
    """Estimator reads templates: vocab grows by the reserved ids, context fits x, y_w, y_l."""
    return BackboneDescriptor(
        vocab + TEMPLATE_EXTRA, 2 * context + TEMPLATE_EXTRA, embed, hidden, dropout,
        segments=3, head=2, kind="estimator",
    )


def init_params(desc: BackboneDescriptor, seed: int, scale: float = 0.3, zero_head: bool = False) -> ParamVector:
    rng = np.random.default_rng(seed)
    params = ParamVector.from_shapes(desc.param_shapes())
    params["embed"] = rng.normal(0.0, scale, params["embed"].shape)
    params["pos"] = rng.normal(0.0, scale, params["pos"].shape)
    params["w1"] = rng.normal(0.0, 1.0 / math.sqrt(2 * desc.embed), params["w1"].shape)
    if not zero_head:
        params["w2"] = rng.normal(0.0, 1.0 / math.sqrt(desc.hidden), params["w2"].shape)
    return params


@dataclass(frozen=True)
class _Model:
    descriptor: BackboneDescriptor
    params: ParamVector

    def with_params(self, params: ParamVector):
        return replace(self, params=params)

    def copy(self):
        return replace(self, params=self.params.copy())


@dataclass(frozen=True)
class PolicyModel(_Model):
    pass


@dataclass(frozen=True)
class RewardModel(_Model):
    pass


@dataclass(frozen=True)
class EstimatorModel(_Model):
    pass


def new_policy(desc: BackboneDescriptor, seed: int, zero_head: bool = False) -> PolicyModel:
    return PolicyModel(desc, init_params(desc, seed, zero_head=zero_head))


def new_reward(desc: BackboneDescriptor, seed: int) -> RewardModel:
    return RewardModel(desc, init_params(desc, seed))


def new_estimator(desc: BackboneDescriptor, seed: int) -> EstimatorModel:
    return EstimatorModel(desc, init_params(desc, seed))


# ---------------------------------------------------------------------------
# graph builders
# ---------------------------------------------------------------------------


def build_policy_logprob(g: Graph, key: str = "") -> tuple[int, int]:
    """Add a per-sequence log-probability block; returns (seq_logp, logits) handles.

    Inputs (suffixed by ``key``): ``ids`` (B,L) segment-offset ids,
    ``pos_ids`` (L,), ``inv_count`` (L,1), ``targets`` (B,L) next-token ids,
    ``target_mask`` (B,L) 1 where the next token belongs to the response.
    """
    ids = g.input(f"ids{key}", ndim=2, integer=True)
    pos_ids = g.input(f"pos_ids{key}", ndim=1, integer=True)
    inv_count = g.input(f"inv_count{key}", ndim=2)
    emb = g.take(g.param("embed"), ids)
    pooled = g.mul(g.cumsum(emb, axis=1), inv_count)
    last = g.add(emb, g.take(g.param("pos"), pos_ids))
    feat = g.concat(pooled, last, axis=-1)
    hid = g.relu(g.add(g.matmul(feat, g.param("w1")), g.param("b1")))
    hid = g.dropout(hid, HIDDEN_SITE + key)
    logits = g.add(g.matmul(hid, g.param("w2")), g.param("b2"), name=f"logits{key}")
    logp = g.log_softmax(logits, axis=-1)
    picked = g.take_last(logp, g.input(f"targets{key}", ndim=2, integer=True))
    masked = g.mul(picked, g.input(f"target_mask{key}", ndim=2))
    return g.sum(masked, axis=1, name=f"seq_logp{key}"), logits


def build_last_token_head(g: Graph, key: str = "") -> int:
    """Pooled + last-token features into the head; returns the (B, head) node.

    Inputs: ``ids`` (B,L), ``mask`` (B,L,1) valid positions, ``inv_len`` (B,1),
    ``last_idx`` (B,) index of the final token.
    """
    ids = g.input(f"ids{key}", ndim=2, integer=True)
    last_idx = g.input(f"last_idx{key}", ndim=1, integer=True)
    emb = g.take(g.param("embed"), ids)
    pooled = g.mul(g.sum(g.mul(emb, g.input(f"mask{key}", ndim=3)), axis=1), g.input(f"inv_len{key}", ndim=2))
    last = g.add(g.select_rows(emb, last_idx), g.take(g.param("pos"), last_idx))
    feat = g.concat(pooled, last, axis=-1)
    hid = g.relu(g.add(g.matmul(feat, g.param("w1")), g.param("b1")))
    hid = g.dropout(hid, HIDDEN_SITE + key)
    return g.add(g.matmul(hid, g.param("w2")), g.param("b2"), name=f"head{key}")


@functools.lru_cache(maxsize=None)
def policy_graph() -> tuple[Graph, int, int]:
    g = Graph()
    seq_logp, logits = build_policy_logprob(g)
    return g, seq_logp, logits


@functools.lru_cache(maxsize=None)
def reward_graph() -> tuple[Graph, int]:
    g = Graph()
    head = build_last_token_head(g)
    return g, g.sum(head, axis=-1, name="reward")


@functools.lru_cache(maxsize=None)
def estimator_graph() -> tuple[Graph, int]:
    g = Graph()
    head = build_last_token_head(g)
    return g, g.log_softmax(head, axis=-1, name="class_logp")


# ---------------------------------------------------------------------------
# input encoding
# ---------------------------------------------------------------------------


def _check_tokens(tokens: Sequence[int], vocab: int, what: str) -> None:
    for t in tokens:
        if not 0 <= int(t) < vocab:
            raise ModelError(f"{what} token {t} outside vocabulary [0, {vocab})")


def encode_policy(desc: BackboneDescriptor, prompts: Sequence[Tokens], responses: Sequence[Tokens], key: str = "") -> dict:
    """Arrays for :func:`build_policy_logprob` over a batch of (x, y)."""
    L, V = desc.context, desc.vocab
    B = len(prompts)
    ids = np.zeros((B, L), dtype=np.int64)
    targets = np.zeros((B, L), dtype=np.int64)
    tmask = np.zeros((B, L))
    for b, (x, y) in enumerate(zip(prompts, responses)):
        if len(x) < 1:
            raise ModelError("prompt must contain at least one token")
        if len(x) + len(y) > L:
            raise ModelError(f"prompt+response length {len(x) + len(y)} exceeds context {L}")
        _check_tokens(x, V, "prompt")
        _check_tokens(y, V, "response")
        seq = np.asarray(tuple(x) + tuple(y), dtype=np.int64)
        n = len(seq)
        seg = np.zeros(n, dtype=np.int64)
        seg[len(x):] = 1
        ids[b, :n] = seq + V * seg
        targets[b, : n - 1] = seq[1:]
        tmask[b, len(x) - 1 : n - 1] = 1.0
    return {
        f"ids{key}": ids,
        f"pos_ids{key}": np.arange(L),
        f"inv_count{key}": 1.0 / np.arange(1, L + 1, dtype=np.float64)[:, None],
        f"targets{key}": targets,
        f"target_mask{key}": tmask,
    }


def _encode_last_token(desc: BackboneDescriptor, seqs: Sequence[Tokens], segs: Sequence[np.ndarray], key: str) -> dict:
    L = desc.context
    B = len(seqs)
    ids = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L, 1))
    last = np.zeros(B, dtype=np.int64)
    for b, (seq, seg) in enumerate(zip(seqs, segs)):
        n = len(seq)
        if n == 0:
            raise ModelError("empty sequence")
        if n > L:
            raise ModelError(f"sequence length {n} exceeds context {L}")
        ids[b, :n] = np.asarray(seq, dtype=np.int64) + desc.vocab * seg
        mask[b, :n] = 1.0
        last[b] = n - 1
    return {
        f"ids{key}": ids,
        f"mask{key}": mask,
        f"inv_len{key}": 1.0 / mask.sum(axis=1),
        f"last_idx{key}": last,
    }


def encode_reward(desc: BackboneDescriptor, prompts: Sequence[Tokens], responses: Sequence[Tokens], key: str = "") -> dict:
    seqs, segs = [], []
    for x, y in zip(prompts, responses):
        _check_tokens(x, desc.vocab, "prompt")
        _check_tokens(y, desc.vocab, "response")
        seqs.append(tuple(x) + tuple(y))
        segs.append(np.array([0] * len(x) + [1] * len(y), dtype=np.int64))
    return _encode_last_token(desc, seqs, segs, key)


def encode_templates(desc: BackboneDescriptor, templates: Sequence[Tokens], key: str = "") -> dict:
    sep = desc.vocab - TEMPLATE_EXTRA + 1
    segs = []
    for tpl in templates:
        _check_tokens(tpl, desc.vocab, "template")
        seg = np.minimum(np.cumsum(np.asarray(tpl) == sep), 2).astype(np.int64)
        segs.append(seg)
    return _encode_last_token(desc, templates, segs, key)


# ---------------------------------------------------------------------------
# policy
# ---------------------------------------------------------------------------


def policy_logprobs(policy: PolicyModel, prompts: Sequence[Tokens], responses: Sequence[Tokens]) -> np.ndarray:
    g, seq_logp, _ = policy_graph()
    values = forward(g, policy.params, encode_policy(policy.descriptor, prompts, responses))
    return values[seq_logp]


def policy_logprob(policy: PolicyModel, x: Tokens, y: Tokens) -> float:
    """Sum of next-token log-probabilities of ``y`` given ``x``; 0 for empty ``y``."""
    return float(policy_logprobs(policy, [x], [y])[0])


def next_token_logits(policy: PolicyModel, prefixes: Sequence[tuple[Tokens, Tokens]]) -> np.ndarray:
    """Logits for the token following each (prompt, partial response) prefix."""
    g, _, logits = policy_graph()
    prompts = [p for p, _ in prefixes]
    partial = [r for _, r in prefixes]
    values = forward(g, policy.params, encode_policy(policy.descriptor, prompts, partial))
    rows = np.array([len(p) + len(r) - 1 for p, r in prefixes])
    return values[logits][np.arange(len(prefixes)), rows]


def _nucleus(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Zero out the tail outside the smallest top-p nucleus; rows renormalized."""
    order = np.argsort(-probs, axis=1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=1)
    before = np.cumsum(sorted_p, axis=1) - sorted_p
    keep_sorted = before < top_p
    keep_sorted[:, 0] = True
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=1)
    out = np.where(keep, probs, 0.0)
    return out / out.sum(axis=1, keepdims=True)


def sample_responses(
    policy: PolicyModel,
    prompts: Sequence[Tokens],
    n: int,
    temperature: float = 0.8,
    top_p: float = 0.9,
    seed: int = 0,
    greedy: bool = False,
) -> list[list[Tokens]]:
    """``n`` autoregressive nucleus samples for every prompt, batched.

    A response stops after emitting ``END_ID`` or when the context is full.
    """
    if temperature <= 0:
        raise ModelError("temperature must be > 0 (use greedy=True for argmax decoding)")
    if not 0.0 < top_p <= 1.0:
        raise ModelError(f"top_p must be in (0, 1], got {top_p}")
    if n < 1:
        raise ModelError("n must be >= 1")
    L = policy.descriptor.context
    rng = np.random.default_rng(seed)
    rows = [(tuple(x), []) for x in prompts for _ in range(n)]
    active = [len(x) < L for x, _ in rows]
    while any(active):
        idx = [i for i, a in enumerate(active) if a]
        logits = next_token_logits(policy, [(rows[i][0], tuple(rows[i][1])) for i in idx])
        draws = rng.random(len(rows))
        if greedy:
            tokens = np.argmax(logits, axis=1)
        else:
            z = logits / temperature
            probs = np.exp(z - z.max(axis=1, keepdims=True))
            probs /= probs.sum(axis=1, keepdims=True)
            probs = _nucleus(probs, top_p)
            cdf = np.cumsum(probs, axis=1)
            u = draws[idx][:, None] * cdf[:, -1:]
            tokens = np.minimum((cdf <= u).sum(axis=1), probs.shape[1] - 1)
        for i, tok in zip(idx, tokens):
            x, resp = rows[i]
            resp.append(int(tok))
            if tok == END_ID or len(x) + len(resp) >= L:
                active[i] = False
    out = [tuple(r) for _, r in rows]
    return [out[k * n : (k + 1) * n] for k in range(len(prompts))]


def policy_sample(policy: PolicyModel, x: Tokens, temperature: float = 0.8, top_p: float = 0.9, n: int = 1, seed: int = 0, greedy: bool = False) -> list[Tokens]:
    return sample_responses(policy, [x], n, temperature, top_p, seed, greedy)[0]


# ---------------------------------------------------------------------------
# reward model
# ---------------------------------------------------------------------------


def reward_scores(rm: RewardModel, prompts: Sequence[Tokens], responses: Sequence[Tokens]) -> np.ndarray:
    if not len(prompts):
        return np.zeros(0)
    g, out = reward_graph()
    return forward(g, rm.params, encode_reward(rm.descriptor, prompts, responses))[out]


def reward_score(rm: RewardModel, x: Tokens, y: Tokens) -> float:
    return float(reward_scores(rm, [x], [y])[0])


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------


def template_ids(policy_vocab: int) -> dict[str, int]:
    return {"BOS": policy_vocab, "SEP": policy_vocab + 1, "EOS": policy_vocab + 2, "PAD": policy_vocab + 3}


def render_template(x: Tokens, y_w: Tokens, y_l: Tokens, vocab: int = 32, context: int = 2 * 16 + TEMPLATE_EXTRA) -> Tokens:
    """``[BOS] x [SEP] y_w [SEP] y_l [EOS]`` with ids reserved above the policy vocabulary."""
    ids = template_ids(vocab)
    for part, what in ((x, "prompt"), (y_w, "chosen"), (y_l, "rejected")):
        _check_tokens(part, vocab, what)
    out = (ids["BOS"], *x, ids["SEP"], *y_w, ids["SEP"], *y_l, ids["EOS"])
    if len(out) > context:
        raise ModelError(f"template length {len(out)} exceeds estimator context {context}")
    return tuple(int(t) for t in out)


def parse_template(template: Tokens, vocab: int = 32) -> tuple[Tokens, Tokens, Tokens]:
    ids = template_ids(vocab)
    if len(template) < 4 or template[0] != ids["BOS"] or template[-1] != ids["EOS"]:
        raise ModelError("not a rendered template")
    parts = [[]]
    for t in template[1:-1]:
        if t == ids["SEP"]:
            parts.append([])
        else:
            parts[-1].append(int(t))
    if len(parts) != 3:
        raise ModelError(f"expected 2 separators, found {len(parts) - 1}")
    return tuple(parts[0]), tuple(parts[1]), tuple(parts[2])


def estimator_log_probs(est: EstimatorModel, templates: Sequence[Tokens], masks: Mapping[str, DropoutMask] | None = None) -> np.ndarray:
    """(B, 2) class log-probabilities; column 1 is "chosen is genuinely preferred"."""
    g, out = estimator_graph()
    return forward(g, est.params, encode_templates(est.descriptor, templates), masks)[out]


def estimator_probs(est: EstimatorModel, templates: Sequence[Tokens], masks: Mapping[str, DropoutMask] | None = None) -> np.ndarray:
    return np.exp(estimator_log_probs(est, templates, masks)[:, 1])


def estimator_prob(est: EstimatorModel, template: Tokens, masks: Mapping[str, DropoutMask] | None = None) -> float:
    return float(estimator_probs(est, [template], masks)[0])
