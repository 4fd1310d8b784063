"""Preference objectives as differentiable graphs over model parameters.

Every loss returns a :class:`LossReport`; pass ``with_grad=True`` to also get
the gradient with respect to the trained model's parameters. Reference-policy
log-probabilities enter the policy losses as constants.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import DropoutMask, Graph, ParamVector, backward, forward
from .datagen import PreferenceTriple, TripleBatch
from .models import (
    EstimatorModel,
    PolicyModel,
    RewardModel,
    Tokens,
    build_last_token_head,
    build_policy_logprob,
    encode_policy,
    encode_reward,
    encode_templates,
    policy_logprobs,
    render_template,
)

__all__ = [
    "LossReport",
    "RefLogProbs",
    "bt_prob",
    "log_sigmoid",
    "reference_logprobs",
    "reward_loss",
    "dpo_margin",
    "dpo_margins",
    "dpo_loss",
    "upo_loss",
    "nll_regularizer",
    "sequence_nll",
    "estimator_examples",
    "estimator_loss",
]


def log_sigmoid(z):
    return -np.logaddexp(0.0, -np.asarray(z, dtype=np.float64))


def bt_prob(r_w, r_l):
    """Bradley-Terry probability that the first response wins, computed as sigma(r_w - r_l)."""
    return np.exp(log_sigmoid(np.asarray(r_w, dtype=np.float64) - r_l))


@dataclass
class LossReport:
    loss: float
    margins: np.ndarray
    components: dict[str, np.ndarray] = field(default_factory=dict)
    grad: ParamVector | None = None

    @property
    def per_triple(self) -> np.ndarray:
        return self.components["total"]


def _report(values, nodes: Mapping[str, int], loss: int, margin: int | None, graph, params, with_grad, masks=None) -> LossReport:
    comps = {k: np.array(values[v]) for k, v in nodes.items()}
    margins = np.array(values[margin]) if margin is not None else np.zeros(0)
    loss_value = float(values[loss])
    if not np.isfinite(loss_value):
        raise FloatingPointError("loss is not finite")
    grad = backward(graph, loss, values, params, masks) if with_grad else None
    return LossReport(loss_value, margins, comps, grad)


# ---------------------------------------------------------------------------
# reward model
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def _reward_loss_graph():
    g = Graph()
    r_w = g.sum(build_last_token_head(g, "_w"), axis=-1, name="r_w")
    r_l = g.sum(build_last_token_head(g, "_l"), axis=-1, name="r_l")
    margin = g.sub(r_w, r_l, name="margin")
    per = g.neg(g.log_sigmoid(margin), name="per_triple")
    loss = g.mean(per, name="loss")
    return g, {"total": per, "r_w": r_w, "r_l": r_l}, loss, margin


def reward_loss(rm: RewardModel, batch: TripleBatch, with_grad: bool = False, masks: Mapping[str, DropoutMask] | None = None) -> LossReport:
    """Mean of ``-log sigma(r(x, y_w) - r(x, y_l))``."""
    g, nodes, loss, margin = _reward_loss_graph()
    prompts = [t.prompt for t in batch]
    inputs = {
        **encode_reward(rm.descriptor, prompts, [t.chosen for t in batch], key="_w"),
        **encode_reward(rm.descriptor, prompts, [t.rejected for t in batch], key="_l"),
    }
    values = forward(g, rm.params, inputs, masks)
    for k in ("r_w", "r_l"):
        if not np.all(np.isfinite(values[nodes[k]])):
            raise FloatingPointError("reward model produced a non-finite score")
    return _report(values, nodes, loss, margin, g, rm.params, with_grad, masks)


# ---------------------------------------------------------------------------
# policy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RefLogProbs:
    """Frozen reference log-probabilities of chosen and rejected responses."""

    chosen: np.ndarray
    rejected: np.ndarray

    def __post_init__(self):
        for arr in (self.chosen, self.rejected):
            arr.setflags(write=False)

    def subset(self, index) -> "RefLogProbs":
        return RefLogProbs(self.chosen[index].copy(), self.rejected[index].copy())


def reference_logprobs(ref: PolicyModel, batch: TripleBatch) -> RefLogProbs:
    prompts = [t.prompt for t in batch]
    return RefLogProbs(
        np.array(policy_logprobs(ref, prompts, [t.chosen for t in batch])),
        np.array(policy_logprobs(ref, prompts, [t.rejected for t in batch])),
    )


def _ref(ref: PolicyModel | RefLogProbs, batch: TripleBatch) -> RefLogProbs:
    if isinstance(ref, RefLogProbs):
        if ref.chosen.shape != (len(batch),):
            raise ValueError("reference log-probs do not align with the batch")
        return ref
    return reference_logprobs(ref, batch)


def dpo_margins(policy: PolicyModel, ref: PolicyModel | RefLogProbs, batch: TripleBatch) -> np.ndarray:
    r = _ref(ref, batch)
    prompts = [t.prompt for t in batch]
    lw = policy_logprobs(policy, prompts, [t.chosen for t in batch])
    ll = policy_logprobs(policy, prompts, [t.rejected for t in batch])
    return (lw - r.chosen) - (ll - r.rejected)


def dpo_margin(policy: PolicyModel, ref: PolicyModel, triple: PreferenceTriple) -> float:
    """Implicit reward margin ``[log pi(y_w) - log ref(y_w)] - [log pi(y_l) - log ref(y_l)]``."""
    return float(dpo_margins(policy, ref, TripleBatch([triple]))[0])


def _margin_block(g: Graph) -> int:
    lp_w, _ = build_policy_logprob(g, "_w")
    lp_l, _ = build_policy_logprob(g, "_l")
    ratio_w = g.sub(lp_w, g.input("ref_w", ndim=1))
    ratio_l = g.sub(lp_l, g.input("ref_l", ndim=1))
    return g.sub(ratio_w, ratio_l, name="margin")


@functools.lru_cache(maxsize=None)
def _dpo_graph():
    g = Graph()
    h = _margin_block(g)
    fwd = g.log_sigmoid(g.mul(g.input("beta", ndim=0), h), name="forward")
    per = g.neg(fwd, name="per_triple")
    return g, {"total": per, "forward": fwd}, g.mean(per, name="loss"), h


@functools.lru_cache(maxsize=None)
def _upo_graph():
    g = Graph()
    h = _margin_block(g)
    bh = g.mul(g.input("beta", ndim=0), h)
    fwd = g.log_sigmoid(bh, name="forward")
    rev = g.log_sigmoid(g.neg(bh), name="reversed")
    alpha = g.input("alpha", ndim=1)
    keep = g.input("one_minus_alpha", ndim=1)
    per = g.neg(g.add(g.mul(keep, fwd), g.mul(alpha, rev)), name="per_triple")
    return g, {"total": per, "forward": fwd, "reversed": rev}, g.mean(per, name="loss"), h


def _policy_pair_inputs(policy: PolicyModel, batch: TripleBatch, ref: RefLogProbs, beta: float) -> dict:
    prompts = [t.prompt for t in batch]
    return {
        **encode_policy(policy.descriptor, prompts, [t.chosen for t in batch], key="_w"),
        **encode_policy(policy.descriptor, prompts, [t.rejected for t in batch], key="_l"),
        "ref_w": ref.chosen,
        "ref_l": ref.rejected,
        "beta": np.float64(beta),
    }


def dpo_loss(policy: PolicyModel, ref: PolicyModel | RefLogProbs, batch: TripleBatch, beta: float = 0.1, with_grad: bool = False) -> LossReport:
    """Mean of ``-log sigma(beta * h)``; the reference is held constant."""
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    g, nodes, loss, margin = _dpo_graph()
    values = forward(g, policy.params, _policy_pair_inputs(policy, batch, _ref(ref, batch), beta))
    return _report(values, nodes, loss, margin, g, policy.params, with_grad)


def upo_loss(
    policy: PolicyModel,
    ref: PolicyModel | RefLogProbs,
    batch: TripleBatch,
    beta: float = 0.1,
    alpha: Sequence[float] | None = None,
    with_grad: bool = False,
) -> LossReport:
    """Uncertainty-smoothed preference loss.

    Per triple: ``-[(1 - a) log sigma(beta h) + a log sigma(-beta h)]``, where
    ``a`` comes from ``alpha`` or else ``batch.alpha`` (zeros when absent).
    """
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if alpha is None:
        alpha = batch.alpha if batch.alpha is not None else np.zeros(len(batch))
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (len(batch),):
        raise ValueError("alpha must align with the batch")
    if np.any(alpha < 0) or np.any(alpha > 1) or not np.all(np.isfinite(alpha)):
        raise ValueError("alpha weights must lie in [0, 1]")
    g, nodes, loss, margin = _upo_graph()
    inputs = _policy_pair_inputs(policy, batch, _ref(ref, batch), beta)
    inputs["alpha"] = alpha
    inputs["one_minus_alpha"] = 1.0 - alpha
    values = forward(g, policy.params, inputs)
    return _report(values, nodes, loss, margin, g, policy.params, with_grad)


@functools.lru_cache(maxsize=None)
def _nll_graph():
    g = Graph()
    lp_w, _ = build_policy_logprob(g, "_w")
    scaled = g.div(lp_w, g.input("denom", ndim=1))
    per = g.mul(g.input("coef", ndim=0), scaled, name="per_triple")
    return g, {"total": per, "nll": per, "logp_chosen": lp_w}, g.mean(per, name="loss")


def nll_regularizer(
    policy: PolicyModel,
    batch: TripleBatch,
    lam: float = 1.0,
    eps: float = 1e-6,
    sign: str = "corrected",
    norm: str = "reward",
    with_grad: bool = False,
) -> LossReport:
    """Reward-normalized likelihood term on chosen responses.

    ``sign="corrected"`` adds ``lam * E[-log pi(y_w|x) / max(|r(x, y_w)|, eps)]``;
    ``"paper_literal"`` drops the minus. ``norm="length"`` divides by the
    chosen length instead of the reward.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if sign not in ("corrected", "paper_literal"):
        raise ValueError(f"unknown nll sign mode {sign!r}")
    if norm == "reward":
        if batch.rewards is None:
            raise ValueError("reward-normalized NLL needs batch.rewards")
        denom = np.maximum(np.abs(batch.rewards), eps)
    elif norm == "length":
        denom = np.array([max(len(t.chosen), 1) for t in batch], dtype=np.float64)
    else:
        raise ValueError(f"unknown nll normalization {norm!r}")
    coef = -lam if sign == "corrected" else lam
    g, nodes, loss = _nll_graph()
    inputs = encode_policy(policy.descriptor, [t.prompt for t in batch], [t.chosen for t in batch], key="_w")
    inputs.update(denom=denom, coef=np.float64(coef))
    values = forward(g, policy.params, inputs)
    return _report(values, nodes, loss, None, g, policy.params, with_grad)


def sequence_nll(policy: PolicyModel, prompts: Sequence[Tokens], responses: Sequence[Tokens], with_grad: bool = False) -> LossReport:
    """Mean per-token negative log-likelihood of each response (supervised fine-tuning)."""
    g, nodes, loss = _nll_graph()
    inputs = encode_policy(policy.descriptor, prompts, responses, key="_w")
    inputs.update(denom=np.array([max(len(y), 1) for y in responses], dtype=np.float64), coef=np.float64(-1.0))
    values = forward(g, policy.params, inputs)
    return _report(values, nodes, loss, None, g, policy.params, with_grad)


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------


def estimator_examples(batch: TripleBatch | Sequence[PreferenceTriple], vocab: int, context: int) -> tuple[list[Tokens], np.ndarray]:
    """Binary dataset from preference triples: the labeled order is class 1, the swapped order class 0."""
    templates, labels = [], []
    for t in batch:
        templates.append(render_template(t.prompt, t.chosen, t.rejected, vocab, context))
        labels.append(1)
        templates.append(render_template(t.prompt, t.rejected, t.chosen, vocab, context))
        labels.append(0)
    return templates, np.array(labels, dtype=np.int64)


@functools.lru_cache(maxsize=None)
def _estimator_loss_graph():
    g = Graph()
    logp = g.log_softmax(build_last_token_head(g), axis=-1, name="class_logp")
    picked = g.take_last(logp, g.input("labels", ndim=1, integer=True), name="true_logp")
    per = g.neg(picked, name="per_triple")
    return g, {"total": per, "class_logp": logp}, g.mean(per, name="loss")


def estimator_loss(
    est: EstimatorModel,
    templates: Sequence[Tokens],
    labels: Sequence[int],
    masks: Mapping[str, DropoutMask] | None = None,
    with_grad: bool = False,
) -> LossReport:
    """Mean cross-entropy of the true class; dropout applies when ``masks`` is given."""
    labels = np.asarray(labels, dtype=np.int64)
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError("estimator labels must be 0 or 1")
    g, nodes, loss = _estimator_loss_graph()
    inputs = encode_templates(est.descriptor, templates)
    inputs["labels"] = labels
    values = forward(g, est.params, inputs, masks)
    return _report(values, nodes, loss, None, g, est.params, with_grad, masks)
