"""Command-line entry point: ``upo {init,iterate,noise-study,ablate,export-plots}``.

A run directory holds ``config.json``, ``iter_<i>/`` state directories,
``metrics.csv`` and a timestamped ``run.log``; every other output is a pure
function of the config and root seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import STRATEGIES, ConfigError, ExperimentConfig, load_config
from .loop import (
    METRIC_COLUMNS,
    VARIANTS,
    StateError,
    TrainingDivergence,
    experiment_world,
    load_state,
    save_state,
    start,
    step,
    write_metrics_csv,
)
from .study import noise_study

PLOT_COLUMNS = ("run", "iter", "step", "metric", "value")
SCALAR_METRICS = ("win_rate_vs_sft", "noise_rate_selected", "mean_b_hat", "loss_final", "mean_true_utility")
STUDY_COLUMNS = ("strategy", "seed", "n_selected", "noise_rate")

log = logging.getLogger("upo")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _attach_log(run: Path) -> None:
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    handler = logging.FileHandler(run / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)


def _iter_dirs(run: Path) -> list[tuple[int, Path]]:
    found = []
    for p in run.glob("iter_*"):
        m = re.fullmatch(r"iter_(\d+)", p.name)
        if m and p.is_dir():
            found.append((int(m.group(1)), p))
    return sorted(found)


def _run_config(run: Path) -> ExperimentConfig:
    path = run / "config.json"
    if not path.is_file():
        raise CliError(f"{run}: not a run directory (missing config.json)")
    try:
        return ExperimentConfig.from_json(json.loads(path.read_text()))
    except (json.JSONDecodeError, ConfigError) as exc:
        raise CliError(f"{path}: {exc}") from None


def _latest(run: Path):
    dirs = _iter_dirs(run)
    if not dirs:
        raise CliError(f"{run}: no iteration state found; run 'init' first")
    return load_state(dirs[-1][1])


def _rewrite_metrics(run: Path) -> None:
    rows = []
    for _, d in _iter_dirs(run):
        rows.append(json.loads((d / "metrics.json").read_text())["metrics"])
    write_metrics_csv(run / "metrics.csv", rows)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_init(args) -> int:
    if not args.config:
        raise CliError("init needs --config <path>")
    cfg = load_config(args.config)
    run = Path(args.state or cfg.output_dir)
    run.mkdir(parents=True, exist_ok=True)
    _attach_log(run)
    (run / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")
    for _, d in _iter_dirs(run):
        if _ != 0:
            raise CliError(f"{run}: already holds iterations beyond iter_0; use a fresh directory")
    _, state = start(cfg)
    save_state(state, run / "iter_0")
    _rewrite_metrics(run)
    log.info("init seed=%d win_rate_vs_sft=%.4f", cfg.seed, state.metrics["win_rate_vs_sft"])
    print(run / "iter_0")
    return 0


def cmd_iterate(args) -> int:
    run = _require_run(args)
    cfg = _run_config(run)
    _attach_log(run)
    if args.iters < 0:
        raise CliError("--iters must be >= 0")
    if args.iters == 0:
        return 0
    state = _latest(run)
    world = experiment_world(cfg)
    for _ in range(args.iters):
        state = step(state, cfg, world)
        save_state(state, run / f"iter_{state.iteration}")
        log.info("iter %d win_rate_vs_sft=%.4f", state.iteration, state.metrics["win_rate_vs_sft"])
        print(run / f"iter_{state.iteration}")
    _rewrite_metrics(run)
    return 0


def cmd_noise_study(args) -> int:
    run = _require_run(args)
    cfg = _run_config(run)
    strategies = _csv_list(args.strategies) if args.strategies else list(cfg.strategies)
    bad = [s for s in strategies if s not in STRATEGIES]
    if bad:
        raise CliError(f"unknown strategy {bad[0]!r}; valid: {', '.join(STRATEGIES)}")
    try:
        seeds = [int(s) for s in _csv_list(args.seeds)] if args.seeds else list(cfg.study_seeds)
    except ValueError:
        raise CliError(f"--seeds must be a comma-separated list of integers, got {args.seeds!r}") from None
    _attach_log(run)
    state = _latest(run)
    rows = noise_study(state, experiment_world(cfg), cfg.iteration_config(), strategies, seeds, args.pool or cfg.study_pool)
    out = run / "noise_study.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STUDY_COLUMNS)
        for r in rows:
            w.writerow([r["strategy"], r["seed"], r["n_selected"], repr(float(r["noise_rate"]))])
    log.info("noise study over %d seeds written", len(seeds))
    print(out)
    return 0


def cmd_ablate(args) -> int:
    run = _require_run(args)
    if args.variant not in VARIANTS:
        raise CliError(f"unknown variant {args.variant!r}; valid: {', '.join(VARIANTS)}")
    cfg = _run_config(run)
    dirs = _iter_dirs(run)
    if not dirs or dirs[0][0] != 0:
        raise CliError(f"{run}: ablations start from iter_0; run 'init' first")
    _attach_log(run)
    base = load_state(dirs[0][1])
    state = step(base, cfg, experiment_world(cfg), args.variant)
    out = run / f"ablate_{args.variant}"
    save_state(state, out / "iter_1")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("variant",) + METRIC_COLUMNS)
        w.writerow([args.variant, state.iteration] + ["" if state.metrics.get(c) is None else repr(float(state.metrics[c])) for c in METRIC_COLUMNS[1:]])
    log.info("ablation %s win_rate_vs_sft=%.4f", args.variant, state.metrics["win_rate_vs_sft"])
    print(out / "metrics.csv")
    return 0


def plot_rows(run: Path) -> list[tuple]:
    """Long-format rows for every run below ``run`` (the run itself and its ablations)."""
    rows = []
    runs = [run] + sorted(p for p in run.iterdir() if p.is_dir() and _iter_dirs(p))
    for r in runs:
        name = run.name if r == run else f"{run.name}/{r.name}"
        for i, d in _iter_dirs(r):
            metrics = json.loads((d / "metrics.json").read_text())["metrics"]
            for key in SCALAR_METRICS:
                if metrics.get(key) is not None:
                    rows.append((name, i, "", key, repr(float(metrics[key]))))
            for curve, values in sorted(metrics.get("curves", {}).items()):
                rows.extend((name, i, s, f"loss_{curve}", repr(float(v))) for s, v in enumerate(values))
    return rows


def cmd_export_plots(args) -> int:
    run = _require_run(args, need_config=False)
    rows = plot_rows(run)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOT_COLUMNS)
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return 0


def _require_run(args, need_config: bool = True) -> Path:
    if not args.state:
        raise CliError(f"{args.command} needs --state <run dir>")
    run = Path(args.state)
    if not run.is_dir():
        raise CliError(f"state directory not found: {run}")
    return run


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="upo", description="Uncertainty-aware self-evolving preference optimization on a synthetic world.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    c = sub.add_parser("init", help="train the iteration-0 models and write iter_0")
    c.add_argument("--config", help="JSON experiment config")
    c.add_argument("--state", help="run directory (default: output_dir from the config)")
    c.set_defaults(func=cmd_init)
    c = sub.add_parser("iterate", help="run further self-evolution iterations")
    c.add_argument("--state", help="run directory")
    c.add_argument("--iters", type=int, default=3)
    c.set_defaults(func=cmd_iterate)
    c = sub.add_parser("noise-study", help="compare data-sampling strategies by noise rate")
    c.add_argument("--state", help="run directory")
    c.add_argument("--strategies", help=f"comma list from {','.join(STRATEGIES)}")
    c.add_argument("--seeds", help="comma list of integers")
    c.add_argument("--pool", type=int, help="candidate pairs per seed")
    c.set_defaults(func=cmd_noise_study)
    c = sub.add_parser("ablate", help="one iteration from iter_0 with a component removed")
    c.add_argument("--state", help="run directory")
    c.add_argument("--variant", required=True, help=f"one of {','.join(VARIANTS)}")
    c.set_defaults(func=cmd_ablate)
    c = sub.add_parser("export-plots", help="long-format CSV of per-iteration metrics and loss curves")
    c.add_argument("--state", help="run directory")
    c.add_argument("--out", help="output file (default: stdout)")
    c.set_defaults(func=cmd_export_plots)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (CliError, ConfigError, StateError, CheckpointError, TrainingDivergence) as exc:
        print(f"upo: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"upo: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
