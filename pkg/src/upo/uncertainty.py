"""MC-dropout predictions, BALD information gain, sampling weights and alpha.

Gains are in bits, so ``1 - b_hat`` is a certainty score in [0, 1]. Sampling
weights raise that certainty to a sharpening exponent ``mu`` before
normalizing.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import sample_dropout_masks
from .datagen import PreferenceTriple
from .models import HIDDEN_SITE, TEMPLATE_EXTRA, EstimatorModel, Tokens, estimator_probs, render_template

__all__ = [
    "McPrediction",
    "UncertaintyRecord",
    "DegenerateWeightsError",
    "binary_entropy",
    "mc_predict",
    "mc_predict_batch",
    "information_gain",
    "sampling_weights",
    "certainty",
    "alpha_weight",
    "estimate_records",
    "write_uncertainty_csv",
    "read_uncertainty_csv",
]

CSV_COLUMNS = ("triple_id", "b_hat", "s", "p_weight", "alpha")


class DegenerateWeightsError(ValueError):
    pass


@dataclass(frozen=True)
class McPrediction:
    triple_id: str
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or np.any(probs < 0) or np.any(probs > 1):
            raise ValueError("MC probabilities must be a 1-d array in [0, 1]")
        object.__setattr__(self, "probs", probs)

    @property
    def T(self) -> int:
        return self.probs.size

    @property
    def mean(self) -> float:
        return float(self.probs.mean())


@dataclass(frozen=True)
class UncertaintyRecord:
    triple_id: str
    b_hat: float
    s: float
    p_weight: float
    alpha: float
    p_mean: float = 1.0


def _check_mc_args(T: int, rate: float) -> None:
    if T < 2:
        raise ValueError(f"need T >= 2 stochastic passes, got {T}")
    if not 0.0 < rate < 1.0:
        raise ValueError(f"MC dropout rate must be in (0, 1), got {rate}")


def mc_predict_batch(
    est: EstimatorModel,
    templates: Sequence[Tokens],
    T: int = 10,
    rate: float = 0.1,
    seed: int = 0,
    ids: Sequence[str] | None = None,
) -> list[McPrediction]:
    """``T`` stochastic passes over every template.

    Pass ``t`` uses one hidden-unit mask set shared by the whole batch, i.e.
    one sampled weight configuration, so a template's predictions do not
    depend on what else is in the batch.
    """
    _check_mc_args(T, rate)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(templates))]
    if not templates:
        return []
    masks = sample_dropout_masks({HIDDEN_SITE: (est.descriptor.hidden,)}, rate, seed, T)
    probs = np.stack([estimator_probs(est, templates, m) for m in masks], axis=1)
    return [McPrediction(i, row) for i, row in zip(ids, probs)]


def mc_predict(est: EstimatorModel, template: Tokens, T: int = 10, rate: float = 0.1, seed: int = 0, triple_id: str = "") -> McPrediction:
    return mc_predict_batch(est, [template], T, rate, seed, [triple_id])[0]


def binary_entropy(p) -> np.ndarray:
    """Entropy in bits with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    for q in (p, 1.0 - p):
        nz = q > 0
        out[nz] -= q[nz] * np.log2(q[nz])
    return out


def information_gain(mc: McPrediction) -> float:
    """Entropy of the mean prediction minus the mean per-pass entropy (bits)."""
    gain = float(binary_entropy(mc.probs.mean()) - binary_entropy(mc.probs).mean())
    return min(max(gain, 0.0), 1.0)


def certainty(b_hat, mu: float = 1.0):
    return (1.0 - np.asarray(b_hat, dtype=np.float64)) ** mu


def sampling_weights(gains: Sequence[float], mu: float = 1.0) -> np.ndarray:
    """Normalized ``(1 - b_hat)^mu`` weights."""
    if not mu > 0:
        raise ValueError(f"mu must be > 0, got {mu}")
    gains = np.asarray(gains, dtype=np.float64)
    if gains.size == 0:
        return gains
    if np.any(gains < 0) or np.any(gains > 1):
        raise ValueError("information gains must lie in [0, 1]")
    s = certainty(gains, mu)
    total = s.sum()
    if total <= 0:
        raise DegenerateWeightsError("degenerate: zero total certainty")
    return s / total


def alpha_weight(record: UncertaintyRecord, mode: str = "smoothing") -> float:
    """Per-triple smoothing weight.

    ``paper_literal``: ``1 / (P + 1)`` from the normalized weight, in [0.5, 1].
    ``smoothing``: ``(1 - s) / 2`` from the certainty, in [0, 0.5].
    """
    if mode == "paper_literal":
        return 1.0 / (record.p_weight + 1.0)
    if mode == "smoothing":
        return (1.0 - record.s) / 2.0
    if mode == "zero":
        return 0.0
    raise ValueError(f"unknown alpha mode {mode!r}")


def estimate_records(
    est: EstimatorModel,
    triples: Sequence[PreferenceTriple],
    T: int = 10,
    rate: float = 0.1,
    mu: float = 1.0,
    seed: int = 0,
    scope: str = "prompt",
    alpha_mode: str = "smoothing",
    disagreement: str = "drop",
    threshold: float = 0.5,
) -> tuple[list[PreferenceTriple], list[UncertaintyRecord]]:
    """Score candidate triples with the estimator.

    The estimator's mean prediction also acts as a pseudo-label: with
    ``disagreement="drop"`` a triple gets sampling weight 0 unless its mean
    p >= ``threshold``; ``"flip"`` first orients every triple the way the
    estimator prefers and then applies the same threshold; ``"keep"`` ignores
    the prediction. Weights are normalized within each prompt (``scope="prompt"``)
    or over the whole pool (``scope="dataset"``). Returns the (possibly
    reoriented) triples and one record per triple, in input order.
    """
    if scope not in ("prompt", "dataset"):
        raise ValueError(f"unknown weight scope {scope!r}")
    if disagreement not in ("drop", "flip", "keep"):
        raise ValueError(f"unknown disagreement mode {disagreement!r}")
    if not 0.5 <= threshold <= 1.0:
        raise ValueError(f"gate threshold must be in [0.5, 1], got {threshold}")
    triples = list(triples)
    desc = est.descriptor
    vocab = desc.vocab - TEMPLATE_EXTRA
    templates = [render_template(t.prompt, t.chosen, t.rejected, vocab, desc.context) for t in triples]
    preds = mc_predict_batch(est, templates, T, rate, seed, [t.id for t in triples])
    gains = np.array([information_gain(p) for p in preds])
    means = np.array([p.mean for p in preds])
    eligible = np.ones(len(triples), dtype=bool)
    if disagreement == "flip":
        triples = [t.swapped() if m < 0.5 else t for t, m in zip(triples, means)]
        means = np.maximum(means, 1.0 - means)
    if disagreement != "keep":
        eligible = means >= threshold

    groups: dict = defaultdict(list)
    for j, t in enumerate(triples):
        groups[t.prompt if scope == "prompt" else None].append(j)
    weights = np.zeros(len(triples))
    for members in groups.values():
        members = [j for j in members if eligible[j]]
        if members:
            weights[members] = sampling_weights(gains[members], mu)

    records = []
    for j, t in enumerate(triples):
        rec = UncertaintyRecord(t.id, float(gains[j]), float(certainty(gains[j], mu)), float(weights[j]), 0.0, float(means[j]))
        records.append(replace(rec, alpha=alpha_weight(rec, alpha_mode)))
    return triples, records


def _fmt(x: float) -> str:
    return repr(float(x))


def write_uncertainty_csv(path: str | Path, records: Iterable[UncertaintyRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([r.triple_id, _fmt(r.b_hat), _fmt(r.s), _fmt(r.p_weight), _fmt(r.alpha)])


def read_uncertainty_csv(path: str | Path) -> list[UncertaintyRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        UncertaintyRecord(r["triple_id"], float(r["b_hat"]), float(r["s"]), float(r["p_weight"]), float(r["alpha"]))
        for r in rows
    ]
