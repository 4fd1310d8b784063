"""Self-evolution loop: initial fine-tuning, then generate, reward, estimate,
select and retrain for a fixed number of iterations.

Every random draw is keyed by ``derive_seed(root, ...)`` so a run is a pure
function of its configuration and root seed.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import DropoutMask, ParamVector, make_opt_state, opt_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, IterationConfig
from .datagen import (
    PreferenceTriple,
    SyntheticWorld,
    TripleBatch,
    build_pairs,
    label_seed_data,
    make_world,
    rank_responses,
    read_jsonl,
    sample_prompts,
    true_preference,
    utility,
    with_oracle_labels,
    write_jsonl,
)
from .models import (
    HIDDEN_SITE,
    TEMPLATE_EXTRA,
    EstimatorModel,
    PolicyModel,
    RewardModel,
    Tokens,
    estimator_descriptor,
    estimator_probs,
    new_estimator,
    new_policy,
    new_reward,
    policy_descriptor,
    reward_descriptor,
    reward_scores,
    sample_responses,
)
from .objectives import (
    RefLogProbs,
    dpo_loss,
    estimator_examples,
    estimator_loss,
    nll_regularizer,
    reference_logprobs,
    reward_loss,
    sequence_nll,
    upo_loss,
)
from .uncertainty import UncertaintyRecord, estimate_records, read_uncertainty_csv, write_uncertainty_csv

__all__ = [
    "TrainingDivergence",
    "StateError",
    "IterationState",
    "VARIANTS",
    "derive_seed",
    "fit",
    "train_sft",
    "train_reward",
    "train_estimator",
    "train_policy",
    "init_stage",
    "generate_candidates",
    "select_data",
    "run_iteration",
    "evaluate",
    "audit",
    "apply_variant",
    "save_state",
    "load_state",
    "run_experiment",
]

VARIANTS = ("no_rule", "no_estimator", "no_alpha", "no_nll")
METRIC_COLUMNS = ("iter", "win_rate_vs_sft", "noise_rate_selected", "mean_b_hat", "loss_final")


class TrainingDivergence(FloatingPointError):
    pass


class StateError(ValueError):
    pass


def derive_seed(root: int, *keys) -> int:
    """Stable 63-bit seed from a root seed and any mix of ints and strings."""
    words = [int(root) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass
class IterationState:
    iteration: int
    policy: PolicyModel
    reference: PolicyModel
    reward: RewardModel
    estimator: EstimatorModel
    dataset: TripleBatch
    sft: PolicyModel
    seed_pool: TripleBatch
    root_seed: int
    metrics: dict = field(default_factory=dict)
    records: list[UncertaintyRecord] = field(default_factory=list)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

LossFn = Callable[[ParamVector, np.ndarray, int], tuple[float, ParamVector]]


def fit(params: ParamVector, loss_fn: LossFn, n: int, epochs: int, batch_size: int, lr: float, warmup: float, seed: int, what: str = "model"):
    """Minibatch Adam over ``n`` examples; returns ``(params, per-step losses)``.

    ``loss_fn(params, index, step)`` gives the minibatch loss and gradient.
    """
    if epochs <= 0 or n == 0:
        return params, []
    per_epoch = math.ceil(n / batch_size)
    state = make_opt_state(params, lr, warmup, epochs * per_epoch)
    rng = np.random.default_rng(seed)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * batch_size : (b + 1) * batch_size]
            try:
                loss, grad = loss_fn(params, idx, state.step)
                if not math.isfinite(loss):
                    raise FloatingPointError("loss is not finite")
                params, state = opt_step(params, grad, state)
            except (FloatingPointError, ValueError) as exc:
                raise TrainingDivergence(f"{what} training diverged at epoch {epoch}, step {state.step}: {exc}") from None
            losses.append(float(loss))
    return params, losses


def train_sft(policy: PolicyModel, data: TripleBatch, cfg: IterationConfig, seed: int) -> tuple[PolicyModel, list[float]]:
    """Token-level likelihood on every response in the seed pool, both chosen and rejected."""
    prompts = [t.prompt for t in data] * 2
    responses = [t.chosen for t in data] + [t.rejected for t in data]

    def loss_fn(params, idx, _):
        rep = sequence_nll(policy.with_params(params), [prompts[i] for i in idx], [responses[i] for i in idx], with_grad=True)
        return rep.loss, rep.grad

    params, losses = fit(policy.params, loss_fn, len(prompts), cfg.sft_epochs, cfg.batch_size, cfg.lr_sft, cfg.warmup, seed, "sft")
    return policy.with_params(params), losses


def train_reward(rm: RewardModel, data: TripleBatch, cfg: IterationConfig, seed: int, epochs: int | None = None) -> tuple[RewardModel, list[float]]:
    epochs = cfg.reward_epochs if epochs is None else epochs

    def loss_fn(params, idx, _):
        rep = reward_loss(rm.with_params(params), data.subset(idx), with_grad=True)
        return rep.loss, rep.grad

    params, losses = fit(rm.params, loss_fn, len(data), epochs, cfg.batch_size, cfg.lr_reward, cfg.warmup, seed, "reward")
    return rm.with_params(params), losses


def train_estimator(est: EstimatorModel, data: TripleBatch, cfg: IterationConfig, seed: int, epochs: int | None = None) -> tuple[EstimatorModel, list[float]]:
    """Binary order classification with dropout active; masks are drawn per example."""
    epochs = cfg.estimator_epochs if epochs is None else epochs
    desc = est.descriptor
    templates, labels = estimator_examples(data, desc.vocab - TEMPLATE_EXTRA, desc.context)

    def loss_fn(params, idx, step):
        mask = DropoutMask.sample((len(idx), desc.hidden), cfg.dropout, seed, stream=(step,))
        rep = estimator_loss(est.with_params(params), [templates[i] for i in idx], labels[idx], {HIDDEN_SITE: mask}, with_grad=True)
        return rep.loss, rep.grad

    params, losses = fit(est.params, loss_fn, len(templates), epochs, cfg.batch_size, cfg.lr_estimator, cfg.warmup, seed, "estimator")
    return est.with_params(params), losses


def train_policy(
    policy: PolicyModel,
    ref: RefLogProbs,
    data: TripleBatch,
    cfg: IterationConfig,
    seed: int,
    lr: float,
    objective: str = "upo",
) -> tuple[PolicyModel, list[float]]:
    """``objective="dpo"`` or ``"upo"`` (preference loss plus the likelihood regularizer).

    ``ref`` is computed once before training and never refreshed.
    """
    if objective not in ("dpo", "upo"):
        raise ValueError(f"unknown policy objective {objective!r}")

    def loss_fn(params, idx, _):
        model = policy.with_params(params)
        batch = data.subset(idx)
        r = ref.subset(idx)
        if objective == "dpo":
            rep = dpo_loss(model, r, batch, cfg.beta, with_grad=True)
            return rep.loss, rep.grad
        rep = upo_loss(model, r, batch, cfg.beta, with_grad=True)
        if cfg.lam == 0:
            return rep.loss, rep.grad
        reg = nll_regularizer(model, batch, cfg.lam, cfg.nll_eps, cfg.nll_sign, cfg.nll_norm, with_grad=True)
        return rep.loss + reg.loss, rep.grad + reg.grad

    params, losses = fit(policy.params, loss_fn, len(data), cfg.policy_epochs, cfg.batch_size, lr, cfg.warmup, seed, "policy")
    return policy.with_params(params), losses


def _descriptors(cfg: IterationConfig):
    dims = (cfg.vocab, cfg.context, cfg.embed, cfg.hidden, cfg.dropout)
    return policy_descriptor(*dims), reward_descriptor(*dims), estimator_descriptor(*dims)


def init_stage(seed_data: TripleBatch, cfg: IterationConfig, seed: int) -> IterationState:
    """Iteration 0: SFT, then DPO from the SFT snapshot; reward model and estimator on the seed data."""
    if not len(seed_data):
        raise ValueError("seed data must be non-empty")
    pd, rd, ed = _descriptors(cfg)
    base = new_policy(pd, derive_seed(seed, "init", "policy"), zero_head=True)
    sft, sft_losses = train_sft(base, seed_data, cfg, derive_seed(seed, "train", "sft"))
    ref = reference_logprobs(sft, seed_data)
    policy, pol_losses = train_policy(sft.copy(), ref, seed_data, cfg, derive_seed(seed, "train", "dpo"), cfg.lr_policy, "dpo")
    rm, rm_losses = train_reward(new_reward(rd, derive_seed(seed, "init", "reward")), seed_data, cfg, derive_seed(seed, "train", "reward", 0))
    est, est_losses = train_estimator(new_estimator(ed, derive_seed(seed, "init", "estimator")), seed_data, cfg, derive_seed(seed, "train", "estimator", 0))
    metrics = {
        "iter": 0,
        "n_candidates": 0,
        "n_selected": len(seed_data),
        "loss_final": pol_losses[-1] if pol_losses else None,
        "curves": {"sft": sft_losses, "policy": pol_losses, "reward": rm_losses, "estimator": est_losses},
    }
    return IterationState(0, policy, sft, rm, est, seed_data, sft, seed_data, int(seed), metrics)


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------


def generate_candidates(
    policy: PolicyModel, rm: RewardModel, prompts: Sequence[Tokens], cfg: IterationConfig, seed: int, tag: str = "gen", provenance: str = "generated"
) -> list[tuple[Tokens, list, list[PreferenceTriple]]]:
    """Sample ``N`` responses per prompt, score them and pre-screen pairs.

    Returns ``(prompt, ranked responses, pairs)`` for every prompt that has at
    least two distinct responses.
    """
    samples = sample_responses(policy, prompts, cfg.N, cfg.temperature, cfg.top_p, seed)
    uniq = [list(dict.fromkeys(s)) for s in samples]
    flat_x = [x for x, u in zip(prompts, uniq) for _ in u]
    flat_y = [y for u in uniq for y in u]
    scores = reward_scores(rm, flat_x, flat_y)
    out, k = [], 0
    for p, (x, u) in enumerate(zip(prompts, uniq)):
        r = scores[k : k + len(u)]
        k += len(u)
        if len(u) < 2:
            continue
        ranked = rank_responses(u, r)
        top_k = cfg.pair_top_k if cfg.pair_top_k == 0 else min(cfg.pair_top_k, len(u) - 1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pairs = build_pairs(ranked, top_k, x, f"{tag}-p{p}", provenance)
        out.append((tuple(x), ranked, pairs))
    return out


def _weighted_without_replacement(rng: np.random.Generator, weights: np.ndarray, k: int) -> np.ndarray:
    """Sequential weighted draws without replacement (Efraimidis-Spirakis keys)."""
    pos = np.flatnonzero(weights > 0)
    if k > pos.size:
        warnings.warn(f"requested {k} items but only {pos.size} have positive weight; taking all", stacklevel=3)
        k = pos.size
    keys = np.log(rng.random(pos.size)) / weights[pos]
    return pos[np.argsort(-keys, kind="stable")[:k]]


def select_data(
    pairs: TripleBatch,
    records: Sequence[UncertaintyRecord],
    seed_pool: TripleBatch | None,
    cfg: IterationConfig,
    seed: int,
) -> TripleBatch:
    """Easy pairs by ``P``, a few hard pairs by ``1 - P``, plus a uniform seed-pool mix.

    Counts are rounded fractions of ``|pairs|`` (``|seed_pool|`` for the mix).
    Hard pairs are drawn among pairs with a positive weight that the easy draw
    left out. Seed triples carry ``alpha = 0``.
    """
    if len(records) != len(pairs):
        raise ValueError("records must align with pairs")
    rng = np.random.default_rng(seed)
    P = np.array([r.p_weight for r in records])
    alpha = np.array([r.alpha for r in records])
    if np.any(P < 0) or not np.all(np.isfinite(P)):
        raise ValueError("sampling weights must be finite and >= 0")
    n_easy = round(cfg.easy_fraction * len(pairs))
    n_hard = round(cfg.hard_fraction * len(pairs))
    easy = _weighted_without_replacement(rng, P, n_easy) if n_easy else np.zeros(0, int)
    rest = np.ones(len(pairs), bool)
    rest[easy] = False
    hard_w = np.where(rest & (P > 0), 1.0 - P, 0.0)
    hard_w[rest & (P > 0) & (hard_w == 0)] = 1e-12
    hard = np.zeros(0, int)
    if n_hard and hard_w.sum() > 0:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            hard = _weighted_without_replacement(rng, hard_w, min(n_hard, int((hard_w > 0).sum())))
    chosen = sorted(set(easy.tolist()) | set(hard.tolist()))
    triples = [pairs.triples[i] for i in chosen]
    alphas = [float(alpha[i]) for i in chosen]
    if seed_pool is not None and cfg.mix_fraction > 0:
        n_mix = round(cfg.mix_fraction * len(seed_pool))
        mix = np.sort(rng.choice(len(seed_pool), size=min(n_mix, len(seed_pool)), replace=False))
        seen = {t.id for t in triples}
        for i in mix:
            t = seed_pool.triples[i]
            if t.id not in seen:
                triples.append(t)
                alphas.append(0.0)
                seen.add(t.id)
    if not triples:
        raise ValueError("selection produced an empty dataset")
    return TripleBatch(triples, np.array(alphas))


def _uniform_records(triples: Sequence[PreferenceTriple]) -> list[UncertaintyRecord]:
    w = 1.0 / len(triples)
    return [UncertaintyRecord(t.id, 0.0, 1.0, w, 0.0) for t in triples]


def run_iteration(state: IterationState, prompts: Sequence[Tokens], cfg: IterationConfig, seed: int) -> IterationState:
    i = state.iteration + 1
    reference = state.policy.copy()
    groups = generate_candidates(reference, state.reward, prompts, cfg, derive_seed(seed, "generate", i), f"it{i}", f"generated({i})")
    candidates = [t for _, _, pairs in groups for t in pairs]
    if not candidates:
        raise ValueError(f"iteration {i}: no candidate pairs (every prompt produced identical responses)")

    if cfg.use_estimator:
        candidates, records = estimate_records(
            state.estimator, candidates, cfg.T, cfg.dropout, cfg.mu, derive_seed(seed, "mc", i),
            cfg.weight_scope, cfg.alpha_mode, cfg.disagreement, cfg.gate_threshold,
        )
        sel_cfg = cfg
    else:
        records = _uniform_records(candidates)
        sel_cfg = replace(cfg, easy_fraction=1.0, hard_fraction=0.0)
    selected = select_data(TripleBatch(candidates), records, state.seed_pool, sel_cfg, derive_seed(seed, "select", i))
    rewards = reward_scores(state.reward, [t.prompt for t in selected], [t.chosen for t in selected])
    selected = TripleBatch(selected.triples, selected.alpha, rewards)

    ref_lp = reference_logprobs(reference, selected)
    lr = cfg.lr_policy * cfg.lr_factor(i)
    policy, pol_losses = train_policy(reference.copy(), ref_lp, selected, cfg, derive_seed(seed, "train", "policy", i), lr)
    rm, est = state.reward, state.estimator
    rm_losses: list[float] = []
    est_losses: list[float] = []
    if cfg.update_rm_est:
        rm, rm_losses = train_reward(rm, selected, cfg, derive_seed(seed, "train", "reward", i), cfg.update_epochs)
        est, est_losses = train_estimator(est, selected, cfg, derive_seed(seed, "train", "estimator", i), cfg.update_epochs)

    metrics = {
        "iter": i,
        "n_candidates": len(candidates),
        "n_selected": len(selected),
        "mean_b_hat": float(np.mean([r.b_hat for r in records])),
        "loss_final": pol_losses[-1] if pol_losses else None,
        "curves": {"policy": pol_losses, "reward": rm_losses, "estimator": est_losses},
    }
    return IterationState(i, policy, reference, rm, est, selected, state.sft, state.seed_pool, state.root_seed, metrics, records)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(policy: PolicyModel, baseline: PolicyModel, world: SyntheticWorld, prompts: Sequence[Tokens], seed: int = 0) -> dict:
    """Greedy head-to-head under the oracle; ties (identical responses) count half."""
    if not prompts:
        raise ValueError("evaluation needs at least one prompt")
    ours = [r[0] for r in sample_responses(policy, prompts, 1, seed=seed, greedy=True)]
    theirs = [r[0] for r in sample_responses(baseline, prompts, 1, seed=seed, greedy=True)]
    score = 0.0
    for x, a, b in zip(prompts, ours, theirs):
        score += 0.5 if a == b else float(true_preference(world, x, a, b) == a)
    return {
        "win_rate": score / len(prompts),
        "mean_true_utility": float(np.mean([utility(world, x, y) for x, y in zip(prompts, ours)])),
    }


def estimator_accuracy(est: EstimatorModel, data: TripleBatch) -> float:
    desc = est.descriptor
    templates, labels = estimator_examples(data, desc.vocab - TEMPLATE_EXTRA, desc.context)
    return float(np.mean((estimator_probs(est, templates) >= 0.5) == (labels == 1)))


def reward_accuracy(rm: RewardModel, data: TripleBatch) -> float:
    prompts = [t.prompt for t in data]
    rw = reward_scores(rm, prompts, [t.chosen for t in data])
    rl = reward_scores(rm, prompts, [t.rejected for t in data])
    return float(np.mean(rw > rl))


def audit(state: IterationState, world: SyntheticWorld, eval_prompts: Sequence[Tokens]) -> dict:
    """Oracle-side metrics for an iteration; never fed back into training."""
    ev = evaluate(state.policy, state.sft, world, eval_prompts)
    triples = list(state.dataset)
    if state.iteration > 0:
        generated = [t for t in triples if t.provenance != "seed"]
        triples = generated or triples
    labeled = with_oracle_labels(triples, world)
    out = {
        "win_rate_vs_sft": ev["win_rate"],
        "mean_true_utility": ev["mean_true_utility"],
        "noise_rate_selected": sum(t.oracle_label == "flipped" for t in labeled) / len(labeled),
    }
    if state.iteration == 0:
        records = estimate_records(state.estimator, triples, 10, state.estimator.descriptor.dropout or 0.1, seed=derive_seed(state.root_seed, "audit"))[1]
        out["mean_b_hat"] = float(np.mean([r.b_hat for r in records]))
    return out


def apply_variant(cfg: IterationConfig, variant: str | None) -> IterationConfig:
    """Ablation hooks for the selection and objective components."""
    if variant is None:
        return cfg
    if variant == "no_rule":
        return replace(cfg, top_k=0)
    if variant == "no_estimator":
        return replace(cfg, use_estimator=False)
    if variant == "no_alpha":
        return replace(cfg, alpha_mode="zero")
    if variant == "no_nll":
        return replace(cfg, lam=0.0)
    raise ValueError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_state(state: IterationState, path: str | Path) -> Path:
    """Write one iteration directory; every file is rewritten deterministically."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    i, s = state.iteration, state.root_seed
    for name, model in (("policy", state.policy), ("reference", state.reference), ("reward", state.reward), ("estimator", state.estimator), ("sft", state.sft)):
        save_checkpoint(path / f"{name}.ckpt", model, i, s)
    write_jsonl(path / "data.jsonl", state.dataset)
    write_jsonl(path / "seed.jsonl", state.seed_pool)
    extras = {}
    if state.dataset.alpha is not None:
        extras["alpha"] = state.dataset.alpha.tolist()
    if state.dataset.rewards is not None:
        extras["rewards"] = state.dataset.rewards.tolist()
    write_uncertainty_csv(path / "uncertainty.csv", state.records)
    meta = {"iteration": i, "root_seed": s, "dataset": extras, "metrics": state.metrics}
    (path / "metrics.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path


def load_state(path: str | Path) -> IterationState:
    path = Path(path)
    meta_path = path / "metrics.json"
    if not meta_path.is_file():
        raise StateError(f"not a state directory (missing metrics.json): {path}")
    try:
        meta = json.loads(meta_path.read_text())
        models = {}
        for name in ("policy", "reference", "reward", "estimator", "sft"):
            try:
                models[name] = load_checkpoint(path / f"{name}.ckpt")[0]
            except CheckpointError as exc:
                raise CheckpointError(f"{name}.ckpt: {exc}") from None
        extras = meta["dataset"]
        dataset = TripleBatch(read_jsonl(path / "data.jsonl"), extras.get("alpha"), extras.get("rewards"))
        seed_pool = TripleBatch(read_jsonl(path / "seed.jsonl"))
        records = read_uncertainty_csv(path / "uncertainty.csv")
    except CheckpointError as exc:
        raise StateError(f"{path}: {exc}") from None
    except (OSError, KeyError, ValueError) as exc:
        raise StateError(f"{path}: corrupt state: {exc}") from None
    return IterationState(
        int(meta["iteration"]), models["policy"], models["reference"], models["reward"], models["estimator"],
        dataset, models["sft"], seed_pool, int(meta["root_seed"]), meta["metrics"], records,
    )


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_metrics_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([int(r["iter"])] + [_fmt(r.get(c)) for c in METRIC_COLUMNS[1:]])


# ---------------------------------------------------------------------------
# whole runs
# ---------------------------------------------------------------------------


def experiment_world(cfg: ExperimentConfig) -> SyntheticWorld:
    return make_world(cfg.world_seed, cfg.vocab, cfg.context, pair_scale=cfg.world_pair_scale)


def eval_prompts(cfg: ExperimentConfig, world: SyntheticWorld) -> list[Tokens]:
    return sample_prompts(world, cfg.eval_prompts, derive_seed(cfg.world_seed, "eval"))


def iteration_prompts(cfg: ExperimentConfig, world: SyntheticWorld, i: int) -> list[Tokens]:
    return sample_prompts(world, cfg.prompts_per_iter, derive_seed(cfg.seed, "prompts", i))


def start(cfg: ExperimentConfig) -> tuple[SyntheticWorld, IterationState]:
    world = experiment_world(cfg)
    seed_data = label_seed_data(world, cfg.seed_size, cfg.noise_rate, derive_seed(cfg.seed, "seed-data"))
    state = init_stage(seed_data, cfg.iteration_config(), cfg.seed)
    state.metrics.update(audit(state, world, eval_prompts(cfg, world)))
    return world, state


def step(state: IterationState, cfg: ExperimentConfig, world: SyntheticWorld, variant: str | None = None) -> IterationState:
    icfg = apply_variant(cfg.iteration_config(), variant)
    i = state.iteration + 1
    new = run_iteration(state, iteration_prompts(cfg, world, i), icfg, cfg.seed)
    new.metrics.update(audit(new, world, eval_prompts(cfg, world)))
    if variant is not None:
        new.metrics["variant"] = variant
        new.metrics["config"] = icfg.to_json()
    return new


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, iterations: int | None = None, variant: str | None = None) -> list[dict]:
    """Initial stage plus ``iterations`` (default ``cfg.I``) rounds; returns one metrics row per iteration."""
    world, state = start(cfg)
    rows = [state.metrics]
    if out_dir is not None:
        save_state(state, Path(out_dir) / "iter_0")
    for _ in range(cfg.I if iterations is None else iterations):
        state = step(state, cfg, world, variant)
        rows.append(state.metrics)
        if out_dir is not None:
            save_state(state, Path(out_dir) / f"iter_{state.iteration}")
    if out_dir is not None:
        write_metrics_csv(Path(out_dir) / "metrics.csv", rows)
    return rows
