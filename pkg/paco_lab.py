#!/usr/bin/env python3
"""
paco_lab.py - PaCo Lab Command Line

Configuration-driven pipeline:
  synth-data    -> data/      (grids, ranking instances, labeled pairs)
  train-policy  -> policy/    (flow-matching pretraining)
  train-reward  -> scorer/    (pairwise consistency scorer)
  eval-reward   -> eval/      (ranking metrics vs baselines)
  grpo-train    -> grpo/      (multi-reward GRPO)
  ablate        -> ablations/ (resolution | logtame | alpha)
  report        -> report.txt (acceptance digest)

Exit codes: 0 success, 1 usage/config, 2 data, 3 divergence.

Version: 1.0.0
"""

import argparse
import hashlib
import logging
import sys
from itertools import combinations, permutations
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from flowgen import init_flow_model, load_flow_model, pretrain_policy, save_flow_model
from lab_config import (
    ExperimentConfig,
    apply_environment,
    load_config,
    load_environment,
    parse_config,
    save_config,
    with_overrides,
)
from numcore import (
    ConfigError,
    DataError,
    DivergenceError,
    LabError,
    RngStream,
    Tensor,
    gaussian,
    uniform,
)
from pacodata import build_dataset, load_grids, load_instances, load_pairs, write_dataset
from pacogrpo import (
    advantages,
    alignment_channel,
    coefficient_of_variation,
    consistency_channel,
    epoch_csv_header,
    epoch_csv_row,
    evaluate_policy,
    log_tame,
    logtame_ablation,
    make_channels,
    resolution_ablation,
    train_grpo,
)
from pacoreward import (
    RandomScorer,
    benchmark_decisions,
    compare_scorers,
    decision_accuracy,
    load_scorer,
    paco_loss,
    save_scorer,
    score,
    train_scorer,
)
from rankmetrics import RANKINGS_HEADER, REPORT_HEADER, benchmark_report, kendall_tau, spearman_rho
from run_store import RunDirectoryError, RunStore, read_json, write_csv, write_json
from toyworld import raw_cosine_score, sample_prompts, true_consistency

logger = logging.getLogger("paco_lab")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3

ABLATION_MODES = ("resolution", "logtame", "alpha")
PLOT_HEADER = ("epoch", "series", "value", "cost_points")

# Child streams of the root seed, one per pipeline concern
STREAM_DATA = 0
STREAM_POLICY_PROMPTS = 1
STREAM_EVAL_PROMPTS = 2
STREAM_POLICY_INIT = 3
STREAM_PRETRAIN = 4
STREAM_SCORER = 5
STREAM_RANDOM_BASELINE = 6
STREAM_GRPO = 7
STREAM_ABLATION = 8
STREAM_CHECKS = 9


class LabArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to EXIT_USAGE"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"✗ {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def print_banner(title: str):
    print("=" * 70)
    print(f"  PaCo Lab - {title}")
    print("=" * 70)


# ============================================================================
# SHARED SETUP
# ============================================================================

def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or defaults) -> environment -> CLI flags"""
    if args.config:
        config = load_config(args.config)
    else:
        if args.seed is None:
            raise ConfigError("a seed is required: pass --seed or a --config that sets one")
        config = parse_config({"seed": args.seed}, source="defaults")
    config = apply_environment(config, load_environment())
    channels = args.channels.split(",") if getattr(args, "channels", None) else None
    return with_overrides(config, seed=args.seed, out_dir=args.out, channels=channels)


def root_stream(config: ExperimentConfig, *path: int) -> RngStream:
    return RngStream(config.seed).child(*path) if path else RngStream(config.seed)


def policy_prompts(config: ExperimentConfig):
    return sample_prompts(config.policy.prompts, config.dataset.set_size,
                          root_stream(config, STREAM_POLICY_PROMPTS), config.world.constants())


def eval_prompts(config: ExperimentConfig):
    return sample_prompts(config.grpo.eval_conditions, config.dataset.set_size,
                          root_stream(config, STREAM_EVAL_PROMPTS), config.world.constants())


def _require_file(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} not found", path=str(path))
    return path


def _load_channels(config: ExperimentConfig, scorer_path: Optional[Path]):
    needs_scorer = any(c.backend == "scorer" for c in config.channels)
    pair_score = None
    if needs_scorer:
        if scorer_path is None:
            raise ConfigError("a channel uses the scorer backend; pass --scorer")
        scorer = load_scorer(_require_file(scorer_path, "scorer checkpoint"))
        pair_score = lambda a, b: score(scorer, a, b)
    return make_channels(config.channels, pair_score)


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_synth_data(args: argparse.Namespace, config: ExperimentConfig, store: RunStore) -> int:
    print_banner("Synthesize Dataset")
    out = store.stage("data", args.force)
    dataset = build_dataset(config.dataset, root_stream(config, STREAM_DATA), config.world.constants(),
                            progress=args.progress)
    write_dataset(dataset, out)
    save_config(config, store.path("config.json"))
    for key, value in dataset.counts.items():
        print(f"{key}: {value}")
    if dataset.counts["instances"] != dataset.counts["expected_instances"]:
        print("⚠️  instance count differs from the count identity")
    print(f"✓ Dataset written to {out}")
    return EXIT_OK


def cmd_train_policy(args: argparse.Namespace, config: ExperimentConfig, store: RunStore) -> int:
    print_banner("Pretrain Policy")
    out = store.stage("policy", args.force)
    world = config.world.constants()
    model = init_flow_model(root_stream(config, STREAM_POLICY_INIT), config.policy.hidden, world)
    log = pretrain_policy(model, policy_prompts(config), root_stream(config, STREAM_PRETRAIN),
                          steps=config.policy.steps, batch_size=config.policy.batch_size, lr=config.policy.lr,
                          identity_jitter=config.policy.identity_jitter, resolutions=config.policy.resolutions,
                          progress=args.progress)
    save_flow_model(model, out / "policy.ckpt", {"seed": config.seed})
    write_csv(out / "pretrain_log.csv", ("step", "resolution", "loss"),
              ((r["step"], r["resolution"], r["loss"]) for r in log))
    channels = [consistency_channel(), alignment_channel()]
    scores = evaluate_policy(model, channels, eval_prompts(config), config.grpo.eval_resolution,
                             config.grpo.sampling_steps, root_stream(config, STREAM_GRPO).child(2))
    write_json(out / "summary.json", {"final_loss": log[-1]["loss"] if log else None,
                                      "steps": len(log), "eval": scores})
    print(f"✓ Policy checkpoint: {out / 'policy.ckpt'}")
    print(f"  eval consistency={scores['consistency']:.4f} alignment={scores['alignment']:.4f}")
    return EXIT_OK


def cmd_train_reward(args: argparse.Namespace, config: ExperimentConfig, store: RunStore) -> int:
    print_banner("Train Pair Scorer")
    pairs_path = _require_file(Path(args.pairs) if args.pairs else store.path("data", "pairs.jsonl"), "pairs file")
    grids = load_grids(_require_file(pairs_path.parent / "grids.jsonl", "grids file"))
    pairs = load_pairs(pairs_path, grids)
    out = store.stage("scorer", args.force)
    sc = config.scorer
    scorer, log = train_scorer(pairs, sc.alpha, sc.epochs, sc.lr, root_stream(config, STREAM_SCORER),
                               batch_size=sc.batch_size, hidden=sc.hidden, fast=sc.fast,
                               world=config.world.constants(), progress=args.progress)
    save_scorer(scorer, out / "scorer.ckpt", {"alpha": sc.alpha, "fast": sc.fast, "seed": config.seed})
    write_csv(out / "train_log.csv", ("epoch", "loss", "decision_accuracy"),
              ((r["epoch"], r["loss"], r["decision_accuracy"]) for r in log))
    accuracy = decision_accuracy(scorer, pairs)
    write_json(out / "summary.json", {"pairs": len(pairs), "epochs": sc.epochs, "alpha": sc.alpha,
                                      "fast": sc.fast, "decision_accuracy": accuracy})
    print(f"✓ Scorer checkpoint: {out / 'scorer.ckpt'}")
    print(f"  decision accuracy on {len(pairs)} training pairs: {accuracy:.4f}")
    return EXIT_OK


def cmd_eval_reward(args: argparse.Namespace, config: ExperimentConfig, store: RunStore) -> int:
    print_banner("Evaluate Scorers")
    bench_path = _require_file(Path(args.benchmark) if args.benchmark else store.path("data", "benchmark.jsonl"),
                               "benchmark file")
    grids = load_grids(_require_file(bench_path.parent / "grids.jsonl", "grids file"))
    instances = load_instances(bench_path, grids)
    scorer = load_scorer(_require_file(Path(args.scorer) if args.scorer else store.path("scorer", "scorer.ckpt"),
                                       "scorer checkpoint"))
    world = config.world.constants()
    scorers = {
        "paco_reward": lambda a, b: score(scorer, a, b),
        "raw_cosine": raw_cosine_score,
        "random": RandomScorer(root_stream(config, STREAM_RANDOM_BASELINE)),
        "oracle": lambda a, b: true_consistency(a, b, world),
    }
    rows, details = benchmark_report(scorers, instances)
    out = store.stage("eval", args.force)
    write_csv(out / "metrics.csv", REPORT_HEADER, (r.as_row() for r in rows))
    write_csv(out / "rankings.csv", RANKINGS_HEADER, (
        (name, r.instance_id, " ".join(map(str, r.predicted)), " ".join(map(str, r.annotated)),
         " ".join(f"{s:.6f}" for s in r.scores))
        for name, rankings in details.items() for r in rankings))
    decisions = benchmark_decisions(scorer, instances)
    write_json(out / "summary.json", {"rows": [dict(zip(REPORT_HEADER, r.as_row())) for r in rows],
                                      "paco_reward_decisions": decisions})
    print(f"{'method':<12} {'acc':>7} {'tau':>7} {'rho':>7} {'t1b1':>7} {'pair':>7}")
    for r in rows:
        print(f"{r.method:<12} {r.accuracy:7.4f} {r.tau:7.4f} {r.rho:7.4f} {r.t1b1:7.4f} {r.pairwise_acc:7.4f}")
    print(f"  paco_reward decisions on {decisions['pairs']} extremes pairs: "
          f"accuracy={decisions['decision_accuracy']:.4f} auc={decisions['auc']:.4f}")
    print(f"✓ Metrics written to {out / 'metrics.csv'}")
    return EXIT_OK


def _pct_change(before: float, after: float) -> Optional[float]:
    return None if before == 0 else 100.0 * (after - before) / abs(before)


def cmd_grpo_train(args: argparse.Namespace, config: ExperimentConfig, store: RunStore) -> int:
    print_banner("GRPO Training")
    policy_path = _require_file(Path(args.policy) if args.policy else store.path("policy", "policy.ckpt"),
                                "policy checkpoint")
    scorer_path = Path(args.scorer) if args.scorer else store.path("scorer", "scorer.ckpt")
    channels = _load_channels(config, scorer_path)
    names = [c.name for c in channels]
    if set(names) != {"consistency", "alignment"}:
        print("⚠️  dominance ratio needs --channels consistency,alignment; it will not be reported")
    policy = load_flow_model(policy_path)
    run = train_grpo(policy, channels, config.grpo, policy_prompts(config), eval_prompts(config),
                     root_stream(config, STREAM_GRPO), progress=args.progress)
    out = store.stage("grpo", args.force)
    write_csv(out / "epochs.csv", epoch_csv_header(names), (epoch_csv_row(r, names) for r in run.reports))
    eval_header = ["epoch", *names, "aggregated"]
    write_csv(out / "evaluations.csv", eval_header, ([ev[k] for k in eval_header] for ev in run.evaluations))
    save_flow_model(run.policy, out / "policy.ckpt", {"seed": config.seed, "epochs": config.grpo.epochs})
    before, after = run.evaluations[0], run.evaluations[-1]
    summary = {
        "channels": names,
        "epochs": config.grpo.epochs,
        "pre_eval": before,
        "final_eval": after,
        "change_pct": {n: _pct_change(before[n], after[n]) for n in names},
        "final_dominance": run.reports[-1].dominance if run.reports else None,
        "points_per_epoch": run.reports[0].points if run.reports else 0,
    }
    write_json(out / "summary.json", summary)
    for n in names:
        change = summary["change_pct"][n]
        print(f"  {n}: {before[n]:.4f} -> {after[n]:.4f}" + ("" if change is None else f" ({change:+.1f}%)"))
    print(f"✓ GRPO run written to {out}")
    return EXIT_OK


def _ablate_alpha(config: ExperimentConfig, store: RunStore, progress: bool):
    """Scorer variants (alpha 0.1, alpha 1, fast) trained on the same pairs"""
    pairs_path = _require_file(store.path("data", "pairs.jsonl"), "pairs file")
    grids = load_grids(_require_file(store.path("data", "grids.jsonl"), "grids file"))
    pairs = load_pairs(pairs_path, grids)
    benchmark = load_instances(_require_file(store.path("data", "benchmark.jsonl"), "benchmark file"), grids)
    sc = config.scorer
    summary, metric_rows, curves = compare_scorers(pairs, benchmark, root_stream(config, STREAM_ABLATION),
                                                   epochs=sc.epochs, lr=sc.lr, batch_size=sc.batch_size,
                                                   hidden=sc.hidden, world=config.world.constants(),
                                                   progress=progress)
    write_csv(store.path("ablations", "alpha_metrics.csv"), REPORT_HEADER, (r.as_row() for r in metric_rows))
    return summary, curves


def cmd_ablate(args: argparse.Namespace, config: ExperimentConfig, store: RunStore) -> int:
    print_banner(f"Ablation: {args.mode}")
    out = store.path("ablations")
    target = out / f"{args.mode}.json"
    if target.exists() and not args.force:
        raise RunDirectoryError(f"{target} exists (use --force to overwrite)")

    if args.mode == "alpha":
        summary, rows = _ablate_alpha(config, store, args.progress)
    else:
        policy_path = _require_file(Path(args.policy) if args.policy else store.path("policy", "policy.ckpt"),
                                    "policy checkpoint")
        scorer_path = Path(args.scorer) if args.scorer else store.path("scorer", "scorer.ckpt")
        policy = load_flow_model(policy_path)
        prompts, held_out = policy_prompts(config), eval_prompts(config)

    if args.mode == "resolution":
        channels = _load_channels(config, scorer_path)
        resolutions = [int(v) for v in args.resolutions.split(",")] if args.resolutions else \
            [config.grpo.eval_resolution // 2, 16]
        summary, rows = resolution_ablation(policy, channels, config.grpo, prompts, held_out, resolutions,
                                            root_stream(config, STREAM_ABLATION), progress=args.progress)
    elif args.mode == "logtame":
        data = config.model_dump(mode="json")
        for channel in data["channels"]:
            if channel["name"] == "consistency":
                channel["weight"] = channel["weight"] * args.skew
        skewed = parse_config(data, source="logtame ablation")
        channels = _load_channels(skewed, scorer_path)
        seeds = [(config.seed + s) % 2 ** 64 for s in range(args.seeds)]
        summary, rows = logtame_ablation(policy, channels, config.grpo, prompts, held_out, seeds,
                                         progress=args.progress)
        summary["skew"] = args.skew

    write_json(target, summary)
    write_csv(out / f"{args.mode}_curves.csv", PLOT_HEADER, rows)
    if args.mode == "resolution":
        for entry in summary["runs"]:
            status = "failed" if entry["failed"] else f"final={entry['final_eval']:.4f}"
            print(f"  d_train={entry['train_resolution']:>4} cost x{entry['cost_ratio']:.3f} {status}")
    elif args.mode == "logtame":
        print(f"  tamed below naive in {summary['tamed_lower_count']}/{summary['seed_pairs']} seed pairs")
    else:
        for entry in summary["variants"]:
            print(f"  {entry['name']:<10} held-out acc={entry['held_out_accuracy']:.4f} "
                  f"tau={entry['metrics']['tau']:.4f} t1b1={entry['metrics']['t1b1']:.4f}")
    print(f"✓ Ablation written to {target}")
    return EXIT_OK


# ============================================================================
# REPORT
# ============================================================================

def _brute_tau(p: Sequence[int], q: Sequence[int]) -> float:
    n = len(p)
    pos_p = {c: i for i, c in enumerate(p)}
    pos_q = {c: i for i, c in enumerate(q)}
    s = sum(np.sign(pos_p[a] - pos_p[b]) * np.sign(pos_q[a] - pos_q[b]) for a, b in combinations(range(n), 2))
    return s / (n * (n - 1) / 2)


def _brute_rho(p: Sequence[int], q: Sequence[int]) -> float:
    n = len(p)
    pos_p = {c: i for i, c in enumerate(p)}
    pos_q = {c: i for i, c in enumerate(q)}
    d2 = sum((pos_p[c] - pos_q[c]) ** 2 for c in range(n))
    return 1.0 - 6.0 * d2 / (n * (n * n - 1))


def exact_checks(stream: RngStream) -> Dict[str, float]:
    """Cheap seeded checks behind the exact acceptance items"""
    perms = list(permutations(range(4)))
    metric_error = max(
        max(abs(kendall_tau(p, q) - _brute_tau(p, q)), abs(spearman_rho(p, q) - _brute_rho(p, q)))
        for p in perms for q in perms)

    logprobs = -uniform(stream.child(0), (5, 1000), 0.0, 5.0)
    loss = lambda a: paco_loss(Tensor(logprobs), a).item()
    alpha = 0.3
    mixture_error = abs(loss(alpha) - (alpha * loss(1.0) + (1 - alpha) * loss(0.0)))
    uniform_error = abs(loss(0.2) - float(-logprobs.mean()))

    channels = uniform(stream.child(1), (1000, 16), 0.0, 3.0)
    order_kept = all(np.array_equal(np.argsort(r, kind="stable"), np.argsort(np.log1p(r), kind="stable"))
                     for r in channels)
    cv_error = max(abs(coefficient_of_variation(c * r) - coefficient_of_variation(r))
                   for r in channels[:100] for c in (0.1, 3.0, 100.0))
    inactive_identical = all(np.array_equal(log_tame(r, 0.1, 0.2), r) for r in channels[:100])

    groups = gaussian(stream.child(2), (200, 16)).data
    adv = advantages(groups)
    return {
        "metric_max_error": float(metric_error),
        "loss_mixture_error": float(mixture_error),
        "loss_uniform_error": float(uniform_error),
        "taming_order_preserved": float(order_kept),
        "cv_scale_error": float(cv_error),
        "taming_inactive_identical": float(inactive_identical),
        "advantage_mean_error": float(np.abs(adv.mean(axis=1)).max()),
        "advantage_std_error": float(np.abs(adv.std(axis=1) - 1.0).max()),
        "degenerate_zero": float(not advantages(np.ones((3, 16))).any()),
    }


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _run_digest(store: RunStore) -> List[str]:
    """SHA-256 of every output file, for rerun comparison"""
    lines = []
    for path in sorted(p for p in store.root.rglob("*") if p.is_file() and p.name != "report.txt"):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
        lines.append(f"    {path.relative_to(store.root)}  {digest}")
    return lines


def build_report(store: RunStore, checks: Dict[str, float]) -> str:
    summaries = store.summaries()
    lines = ["PaCo Lab acceptance digest", f"run: {store.root.name}", ""]

    def section(number: int, title: str, body: List[str]):
        lines.append(f"[{number}] {title}")
        lines.extend(f"    {b}" for b in body)
        lines.append("")

    counts = read_json(store.path("data", "counts.json")) if store.exists("data", "counts.json") else None
    section(1, "Count identity", ["not run"] if counts is None else [
        f"grid_images={counts['grid_images']} instances={counts['instances']} "
        f"expected={counts['expected_instances']} match={counts['instances'] == counts['expected_instances']}"])

    eval_rows = read_json(summaries["eval/summary"])["rows"] if "eval/summary" in summaries else []
    oracle = next((r for r in eval_rows if r["method"] == "oracle"), None)
    section(2, "Metric oracle equivalence", [
        f"max |tau/rho - brute force| over 576 permutation pairs = {_fmt(checks['metric_max_error'])}",
        "oracle row: " + ("not run" if oracle is None else
                          " ".join(f"{k}={_fmt(oracle[k])}" for k in ("accuracy", "tau", "rho", "t1b1")))])

    section(3, "Weighted-loss identities", [
        f"|L(a) - a L(1) - (1-a) L(0)| = {_fmt(checks['loss_mixture_error'])}",
        f"|L(1/n) - mean NLL| = {_fmt(checks['loss_uniform_error'])}"])

    policy = read_json(summaries["policy/summary"]) if "policy/summary" in summaries else None
    section(4, "SDE correctness", ["covered by the test suite (a=0 reduction, density mass, ratio, gradients)",
                                   "pre-RL policy eval: " + ("not run" if policy is None else
                                                             " ".join(f"{k}={_fmt(v)}" for k, v in
                                                                      sorted(policy["eval"].items())))])

    section(5, "Taming properties", [
        f"order preserved={bool(checks['taming_order_preserved'])}",
        f"max CV scale error={_fmt(checks['cv_scale_error'])}",
        f"inactive branch bit-identical={bool(checks['taming_inactive_identical'])}"])

    section(6, "Advantage properties", [
        f"max |mean|={_fmt(checks['advantage_mean_error'])} max |std-1|={_fmt(checks['advantage_std_error'])}",
        f"degenerate groups all zero={bool(checks['degenerate_zero'])}"])

    body = ["not run"] if not eval_rows else [
        f"{r['method']}: tau={_fmt(r['tau'])} rho={_fmt(r['rho'])} t1b1={_fmt(r['t1b1'])} "
        f"pairwise={_fmt(r['pairwise_acc'])} n={r['n_samples']}" for r in eval_rows]
    if "scorer/summary" in summaries:
        body.append(f"training decision accuracy={_fmt(read_json(summaries['scorer/summary'])['decision_accuracy'])}")
    if "eval/summary" in summaries:
        decisions = read_json(summaries["eval/summary"]).get("paco_reward_decisions")
        if decisions:
            body.append(f"benchmark extremes decisions: accuracy={_fmt(decisions['decision_accuracy'])} "
                        f"auc={_fmt(decisions['auc'])} pairs={decisions['pairs']}")
    if "ablations/alpha" in summaries:
        body.extend(f"variant {v['name']}: held-out acc={_fmt(v['held_out_accuracy'])} "
                    f"tau={_fmt(v['metrics']['tau'])} rho={_fmt(v['metrics']['rho'])} "
                    f"t1b1={_fmt(v['metrics']['t1b1'])}"
                    for v in read_json(summaries["ablations/alpha"])["variants"])
    section(7, "Reward model efficacy", body)

    grpo = read_json(summaries["grpo/summary"]) if "grpo/summary" in summaries else None
    section(8, "RL efficacy", ["not run"] if grpo is None else [
        f"{n}: {_fmt(grpo['pre_eval'][n])} -> {_fmt(grpo['final_eval'][n])} "
        f"({_fmt(grpo['change_pct'][n])}%)" for n in grpo["channels"]])

    logtame = read_json(summaries["ablations/logtame"]) if "ablations/logtame" in summaries else None
    section(9, "Log-tame ablation", ["not run"] if logtame is None else [
        f"tamed below naive in {logtame['tamed_lower_count']}/{logtame['seed_pairs']} seed pairs"] + [
        f"seed {p['seed']}: naive={_fmt(p['naive_final'])} tamed={_fmt(p['tamed_final'])}"
        for p in logtame["pairs"]])

    resolution = read_json(summaries["ablations/resolution"]) if "ablations/resolution" in summaries else None
    section(10, "Resolution decoupling", ["not run"] if resolution is None else [
        f"d_train={r['train_resolution']} cost_ratio={_fmt(r['cost_ratio'])} "
        f"relative_final={_fmt(r['relative_final'])} meets_80pct={r['meets_80pct']} failed={r['failed']}"
        for r in resolution["runs"]])

    section(11, "Reproducibility", ["rerun with the same config and seed; these digests must match"]
            + [line.strip() for line in _run_digest(store)])
    return "\n".join(lines)


def cmd_report(args: argparse.Namespace, config: Optional[ExperimentConfig], store: RunStore) -> int:
    if not store.root.is_dir() or not store.summaries():
        raise DataError("run directory holds no stage summaries", path=str(store.root))
    seed = config.seed if config is not None else 0
    text = build_report(store, exact_checks(RngStream(seed).child(STREAM_CHECKS)))
    (store.root / "report.txt").write_text(text + "\n")
    print(text)
    print(f"✓ Report written to {store.root / 'report.txt'}")
    return EXIT_OK


# ============================================================================
# MAIN CLI
# ============================================================================

COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-policy": cmd_train_policy,
    "train-reward": cmd_train_reward,
    "eval-reward": cmd_eval_reward,
    "grpo-train": cmd_grpo_train,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> LabArgumentParser:
    common = LabArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='Experiment config JSON (default: built-in defaults)')
    common.add_argument('--seed', type=int, help='Root seed (overrides the config)')
    common.add_argument('--out', type=str, help='Run directory (overrides config out_dir)')
    common.add_argument('--force', action='store_true', help='Overwrite an existing stage directory')
    common.add_argument('--progress', action='store_true', help='Show progress bars')
    common.add_argument('--log-level', type=str, default=None,
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Logging level (default: PACO_LAB_LOG_LEVEL or WARNING)')

    parser = LabArgumentParser(
        description="PaCo Lab - pairwise consistency rewards and multi-reward GRPO",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Build the dataset and print the count summary
  python paco_lab.py synth-data --config experiment.json

  # Pretrain the policy, then train and evaluate the scorer
  python paco_lab.py train-policy --config experiment.json
  python paco_lab.py train-reward --config experiment.json
  python paco_lab.py eval-reward --config experiment.json

  # GRPO with the trained scorer as the consistency channel
  python paco_lab.py grpo-train --config experiment.json --channels consistency,alignment

  # Ablations and the acceptance digest
  python paco_lab.py ablate --config experiment.json --mode logtame
  python paco_lab.py ablate --config experiment.json --mode alpha
  python paco_lab.py report runs/default
        """
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth-data", parents=[common], help="Build grids, ranking instances and pairs")
    sub.add_parser("train-policy", parents=[common], help="Flow-matching pretraining of the policy")

    p = sub.add_parser("train-reward", parents=[common], help="Train the pair scorer")
    p.add_argument('--pairs', type=str, help='pairs.jsonl (default: <out>/data/pairs.jsonl)')

    p = sub.add_parser("eval-reward", parents=[common], help="Rank the benchmark with scorer and baselines")
    p.add_argument('--scorer', type=str, help='Scorer checkpoint (default: <out>/scorer/scorer.ckpt)')
    p.add_argument('--benchmark', type=str, help='benchmark.jsonl (default: <out>/data/benchmark.jsonl)')

    for name, help_text in (("grpo-train", "Multi-reward GRPO from the pretrained policy"),
                            ("ablate", "Resolution, log-tame or scorer-alpha ablation")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument('--policy', type=str, help='Policy checkpoint (default: <out>/policy/policy.ckpt)')
        p.add_argument('--scorer', type=str, help='Scorer checkpoint for scorer-backed channels')
        p.add_argument('--channels', type=str, help='Comma-separated reward channels, e.g. consistency,alignment')
    p.add_argument('--mode', required=True, choices=ABLATION_MODES, help='Ablation to run')
    p.add_argument('--resolutions', type=str, help='Training resolutions for mode=resolution (default: d_eval/2,16)')
    p.add_argument('--seeds', type=int, default=5, help='Seed pairs for mode=logtame (default: 5)')
    p.add_argument('--skew', type=float, default=3.0, help='Consistency weight multiplier for mode=logtame')

    p = sub.add_parser("report", parents=[common], help="Write the acceptance digest of a run directory")
    p.add_argument('run_dir', nargs='?', help='Run directory (default: --out or config out_dir)')
    return parser


def configure_logging(level: Optional[str], env: Dict[str, str]):
    name = (level or env.get("PACO_LAB_LOG_LEVEL") or "WARNING").upper()
    logging.basicConfig(level=getattr(logging, name, logging.WARNING),
                        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point; returns the exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level, load_environment())

    try:
        if args.command == "report":
            config = None
            if args.config or args.seed is not None:
                config = resolve_config(args)
            root = args.run_dir or args.out or (config.out_dir if config else None)
            if root is None:
                raise ConfigError("report needs a run directory")
            return cmd_report(args, config, RunStore(root))
        config = resolve_config(args)
        return COMMANDS[args.command](args, config, RunStore(config.out_dir))
    except ConfigError as e:
        print(f"✗ Config error: {e}")
        return EXIT_USAGE
    except RunDirectoryError as e:
        print(f"✗ {e}")
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"✗ Diverged: {e}")
        if e.diagnostics:
            print(f"  diagnostics: {e.diagnostics}")
        return EXIT_DIVERGENCE
    except (DataError, LabError) as e:
        print(f"✗ {e}")
        return EXIT_DATA
    except ValueError as e:
        print(f"✗ Invalid input: {e}")
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("\n\n⚠️  Interrupted by user")
        return 130


if __name__ == "__main__":
    sys.exit(main())
