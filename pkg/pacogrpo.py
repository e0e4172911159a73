#!/usr/bin/env python3
"""
pacogrpo.py - Multi-Reward Group Policy Optimization for PaCo Lab

One epoch:
1. Sample N prompts, G image sets per prompt, at the training resolution
   (each set = M signals, one per content, sharing a stream)
2. Score every set with K reward channels -> raw panel (K x N x G)
3. Per channel: coefficient of variation h^k; log(1 + R) when h^k > delta
4. Weighted sum over channels -> r_hat; group-standardize -> advantages
5. One Adam step on -(clipped surrogate) + beta * KL

Evaluation always runs deterministic ODE sampling at the evaluation
resolution, so low-resolution training is judged at full resolution.

Version: 1.0.0
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from flowgen import (
    FlowModel,
    Trajectory,
    logprob_under,
    sample_ode,
    sample_trajectory,
    set_conditions,
    transition_logprobs,
)
from lab_config import ChannelConfig, GrpoConfig
from numcore import (
    AdamState,
    ChannelError,
    DivergenceError,
    DomainError,
    LabError,
    NonFiniteError,
    RngStream,
    Tape,
    Tensor,
    adam_step,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    copy_params,
    exp,
    gradients,
    integers,
    mean,
    minimum,
    mul,
    scale,
    sub,
    tsum,
)
from toyworld import PromptSpec, Signal, alignment_reward, consistency_reward_set

logger = logging.getLogger(__name__)

DEGENERATE_STD = 1e-8
CV_SHIFT_MEAN = 0.5

ChannelFn = Callable[[List[Signal], PromptSpec], float]

# ============================================================================
# REWARD CHANNELS
# ============================================================================

@dataclass
class RewardChannel:
    """Scores one image set (M signals of one prompt)"""
    name: str
    weight: float
    fn: ChannelFn

    def __call__(self, signals: List[Signal], prompt: PromptSpec) -> float:
        try:
            value = float(self.fn(signals, prompt))
        except LabError as e:
            raise ChannelError(self.name, e) from e
        if not np.isfinite(value):
            raise ChannelError(self.name, NonFiniteError(f"non-finite reward {value}"))
        return value


def consistency_channel(weight: float = 1.0, pair_score: Optional[Callable[[Signal, Signal], float]] = None
                        ) -> RewardChannel:
    """Mean pairwise consistency over the set (analytic oracle or a trained scorer)"""
    return RewardChannel("consistency", weight, lambda signals, prompt: consistency_reward_set(signals, pair_score))


def alignment_channel(weight: float = 1.0) -> RewardChannel:
    """Mean content alignment of each signal with its own content vector"""
    def fn(signals: List[Signal], prompt: PromptSpec) -> float:
        return float(np.mean([alignment_reward(x, prompt, i) for i, x in enumerate(signals)]))
    return RewardChannel("alignment", weight, fn)


def make_channels(configs: Sequence[ChannelConfig], pair_score: Optional[Callable[[Signal, Signal], float]] = None
                  ) -> List[RewardChannel]:
    channels = []
    for cfg in configs:
        if cfg.name == "consistency":
            if cfg.backend == "scorer" and pair_score is None:
                raise ValueError("consistency channel is configured for a scorer but none was provided")
            channels.append(consistency_channel(cfg.weight, pair_score if cfg.backend == "scorer" else None))
        elif cfg.name == "alignment":
            channels.append(alignment_channel(cfg.weight))
        else:
            raise ValueError(f"unknown reward channel '{cfg.name}'")
    return channels


# ============================================================================
# REWARD PANEL
# ============================================================================

def coefficient_of_variation(rewards: np.ndarray) -> float:
    """Population std over mean, across every (condition, member) of one channel"""
    rewards = np.asarray(rewards, dtype=np.float64)
    mu = rewards.mean()
    if mu == 0.0:
        raise DomainError("coefficient of variation is undefined at zero mean; shift the channel first")
    return float(rewards.std() / mu)


def shift_for_cv(rewards: np.ndarray) -> Tuple[np.ndarray, float]:
    """Channels with mean <= 0 are shifted to mean CV_SHIFT_MEAN; returns (shifted, shift)"""
    mu = float(np.mean(rewards))
    if mu > 0.0:
        return rewards, 0.0
    shift = CV_SHIFT_MEAN - mu
    logger.warning("channel mean %.4g <= 0; shifting by %.4g before computing CV", mu, shift)
    return rewards + shift, shift


def log_tame(rewards: np.ndarray, h: float, delta: float) -> np.ndarray:
    """log(1 + R) when h > delta, otherwise the channel unchanged"""
    rewards = np.asarray(rewards, dtype=np.float64)
    if h <= delta:
        return rewards.copy()
    if np.any(rewards <= -1.0):
        raise DomainError("log-taming needs every reward > -1")
    return np.log1p(rewards)


def aggregate(tamed: np.ndarray, weights: Sequence[float]) -> np.ndarray:
    """r_hat[i, j] = sum_k w_k * tamed[k, i, j]"""
    tamed = np.asarray(tamed, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (tamed.shape[0],):
        raise ValueError(f"{weights.size} weights for {tamed.shape[0]} channels")
    return np.einsum("k,kng->ng", weights, tamed)


def advantages(r_hat: np.ndarray) -> np.ndarray:
    """Per-condition standardization (population std); flat groups get zeros"""
    r_hat = np.asarray(r_hat, dtype=np.float64)
    if r_hat.ndim != 2 or r_hat.shape[1] < 2:
        raise ValueError(f"advantages need groups of at least 2 members, got shape {r_hat.shape}")
    mu = r_hat.mean(axis=1, keepdims=True)
    sd = r_hat.std(axis=1, keepdims=True)
    flat = sd < DEGENERATE_STD
    out = np.where(flat, 0.0, (r_hat - mu) / np.where(flat, 1.0, sd))
    return out


@dataclass
class RewardPanel:
    channels: List[str]
    weights: np.ndarray
    raw: np.ndarray
    tamed: np.ndarray
    aggregated: np.ndarray
    advantages: np.ndarray
    cv: np.ndarray
    tamed_flags: List[bool]
    shifts: List[float]
    threshold: float


def build_panel(raw: np.ndarray, channels: Sequence[str], weights: Sequence[float],
                taming: bool = True, threshold="dynamic-mean") -> RewardPanel:
    """Raw (K, N, G) rewards -> CV, taming, aggregation and advantages"""
    raw = np.asarray(raw, dtype=np.float64)
    shifted = [shift_for_cv(raw[k]) for k in range(raw.shape[0])]
    cv = np.array([coefficient_of_variation(r) for r, _ in shifted])
    delta = float(cv.mean()) if threshold == "dynamic-mean" else float(threshold)
    if taming:
        tamed = np.stack([log_tame(raw[k], cv[k], delta) for k in range(raw.shape[0])])
        flags = [bool(h > delta) for h in cv]
    else:
        tamed = raw.copy()
        flags = [False] * raw.shape[0]
    r_hat = aggregate(tamed, weights)
    return RewardPanel(
        channels=list(channels),
        weights=np.asarray(weights, dtype=np.float64),
        raw=raw,
        tamed=tamed,
        aggregated=r_hat,
        advantages=advantages(r_hat),
        cv=cv,
        tamed_flags=flags,
        shifts=[s for _, s in shifted],
        threshold=delta,
    )


# ============================================================================
# OBJECTIVE
# ============================================================================

def clipped_objective(new_logprobs: Tensor, old_logprobs: np.ndarray, adv: np.ndarray, eps: float) -> Tensor:
    """mean(min(r * A, clip(r, 1 - eps, 1 + eps) * A)), r = exp(new - old)"""
    new_logprobs = as_tensor(new_logprobs)
    old_logprobs = np.asarray(old_logprobs, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    if new_logprobs.shape != old_logprobs.shape or adv.shape != old_logprobs.shape:
        raise ValueError(f"misaligned log-probs {new_logprobs.shape}/{old_logprobs.shape} and advantages {adv.shape}")
    ratio = exp(sub(new_logprobs, Tensor(old_logprobs)))
    if not np.all(np.isfinite(ratio.data)):
        bad = np.argwhere(~np.isfinite(ratio.data)).ravel().tolist()
        raise NonFiniteError("policy ratio is not finite", diagnostics={"positions": bad[:10]})
    a = Tensor(adv)
    unclipped = mul(ratio, a)
    clipped = mul(clip(ratio, 1.0 - eps, 1.0 + eps), a)
    return mean(minimum(unclipped, clipped))


def kl_penalty(new_logprobs: Tensor, ref_logprobs: np.ndarray) -> Tensor:
    """mean(exp(ref - new) - (ref - new) - 1), non-negative"""
    diff = sub(Tensor(np.asarray(ref_logprobs, dtype=np.float64)), as_tensor(new_logprobs))
    return mean(sub(sub(exp(diff), diff), Tensor(1.0)))


# ============================================================================
# EPOCH
# ============================================================================

@dataclass
class EpochReport:
    epoch: int
    channel_means: Dict[str, float]
    channel_stds: Dict[str, float]
    cv: Dict[str, float]
    tamed: Dict[str, bool]
    shifts: Dict[str, float]
    threshold: float
    aggregated_mean: float
    j_clip: float
    kl: float
    points: int
    seconds: float = 0.0
    updated: bool = False
    dominance: Optional[float] = None

    def to_json(self) -> Dict:
        return dict(self.__dict__)


def epoch_csv_header(channels: Sequence[str]) -> List[str]:
    header = ["epoch"]
    for name in channels:
        header += [f"{name}_mean", f"{name}_std", f"{name}_cv", f"{name}_tamed"]
    return header + ["threshold", "aggregated_mean", "j_clip", "kl", "dominance", "points", "seconds"]


def epoch_csv_row(report: EpochReport, channels: Sequence[str]) -> List:
    row = [report.epoch]
    for name in channels:
        row += [report.channel_means[name], report.channel_stds[name], report.cv[name], int(report.tamed[name])]
    dominance = "" if report.dominance is None else report.dominance
    return row + [report.threshold, report.aggregated_mean, report.j_clip, report.kl, dominance,
                  report.points, report.seconds]


def points_per_epoch(config: GrpoConfig, set_size: int, resolution: Optional[int] = None) -> int:
    """Latent points the sampler processes in one epoch: N * G * M * T * d"""
    d = config.train_resolution if resolution is None else resolution
    return config.conditions_per_epoch * config.group_size * set_size * config.sampling_steps * d


def sample_groups(policy: FlowModel, prompts: Sequence[PromptSpec], config: GrpoConfig,
                  stream: RngStream) -> List[List[Trajectory]]:
    """G trajectories per prompt; member (i, j) draws from stream.child(1, i, j)"""
    jobs = [(i, j) for i in range(len(prompts)) for j in range(config.group_size)]

    def run(job: Tuple[int, int]) -> Trajectory:
        i, j = job
        return sample_trajectory(policy, set_conditions(prompts[i]), config.train_resolution,
                                 config.sampling_steps, config.sde_steps, config.noise_a, stream.child(1, i, j))

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            flat = list(pool.map(run, jobs))
    else:
        flat = [run(job) for job in jobs]
    return [flat[i * config.group_size:(i + 1) * config.group_size] for i in range(len(prompts))]


def score_groups(groups: List[List[Trajectory]], prompts: Sequence[PromptSpec],
                 channels: Sequence[RewardChannel]) -> np.ndarray:
    raw = np.zeros((len(channels), len(groups), len(groups[0])))
    for i, group in enumerate(groups):
        for j, traj in enumerate(group):
            signals = traj.outputs()
            for k, channel in enumerate(channels):
                raw[k, i, j] = channel(signals, prompts[i])
    return raw


def _member_logprobs(model: FlowModel, traj: Trajectory) -> Tensor:
    """(S,) per-step log-density of a whole image set"""
    return tsum(transition_logprobs(model, traj), axis=1)


def grpo_epoch(
    policy: FlowModel,
    channels: Sequence[RewardChannel],
    config: GrpoConfig,
    prompts: Sequence[PromptSpec],
    stream: RngStream,
    epoch: int = 0,
    reference: Optional[FlowModel] = None,
) -> Tuple[FlowModel, EpochReport]:
    """Sample, score, standardize and take one optimizer step"""
    started = time.perf_counter() if config.record_wall_clock else 0.0
    picks = integers(stream.child(0), len(prompts), config.conditions_per_epoch)
    chosen = [prompts[int(p)] for p in picks]
    set_size = chosen[0].set_size

    groups = sample_groups(policy, chosen, config, stream)
    raw = score_groups(groups, chosen, channels)
    names = [c.name for c in channels]
    panel = build_panel(raw, names, [c.weight for c in channels], config.taming, config.taming_threshold)

    members = [(traj, panel.advantages[i, j]) for i, g in enumerate(groups) for j, traj in enumerate(g)]
    recorded = [(traj, a) for traj, a in members if traj.sde_steps]
    j_value, kl_value, updated = 0.0, 0.0, False
    if recorded:
        old = np.concatenate([np.array([lp.sum() for lp in traj.logprobs]) for traj, _ in recorded])
        adv = np.concatenate([np.full(len(traj.sde_steps), a) for traj, a in recorded])
        ref_model = reference if reference is not None else policy
        ref = np.concatenate([logprob_under(ref_model, traj).sum(axis=1) for traj, _ in recorded])
        with Tape():
            parts = [_member_logprobs(policy, traj) for traj, _ in recorded]
            new = parts[0] if len(parts) == 1 else concat(parts, axis=0)
            objective = clipped_objective(new, old, adv, config.clip_eps)
            kl = kl_penalty(new, ref)
            loss = scale(objective, -1.0)
            if config.kl_beta > 0.0:
                loss = add(loss, scale(kl, config.kl_beta))
        j_value, kl_value = objective.item(), kl.item()
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"GRPO loss diverged in epoch {epoch}",
                                  diagnostics={"epoch": epoch, "j_clip": j_value, "kl": kl_value})
        if np.any(adv) or config.kl_beta > 0.0:
            backward(loss, policy.params)
            policy.params, policy.optimizer = adam_step(policy.params, gradients(policy.params),
                                                        policy.optimizer, config.lr)
            updated = True

    report = EpochReport(
        epoch=epoch,
        channel_means={n: float(panel.raw[k].mean()) for k, n in enumerate(names)},
        channel_stds={n: float(panel.raw[k].std()) for k, n in enumerate(names)},
        cv={n: float(panel.cv[k]) for k, n in enumerate(names)},
        tamed={n: panel.tamed_flags[k] for k, n in enumerate(names)},
        shifts={n: panel.shifts[k] for k, n in enumerate(names)},
        threshold=panel.threshold,
        aggregated_mean=float(panel.aggregated.mean()),
        j_clip=j_value,
        kl=kl_value,
        points=points_per_epoch(config, set_size),
        seconds=(time.perf_counter() - started) if config.record_wall_clock else 0.0,
        updated=updated,
    )
    logger.info("epoch %d: %s j=%.4g kl=%.3g", epoch, report.channel_means, j_value, kl_value)
    return policy, report


# ============================================================================
# DOMINANCE
# ============================================================================

def dominance_ratio(report: EpochReport, baseline: EpochReport, eps: float = 1e-3,
                    consistency: str = "consistency", alignment: str = "alignment") -> float:
    """
    (consistency gain since baseline) / max(|alignment gain|, eps)

    The denominator is a magnitude: an alignment loss counts like an equal
    alignment gain, so consistency rising while alignment falls reads as
    dominance rather than as a negative ratio below every balanced run.
    """
    designated = set(report.channel_means)
    if designated != {consistency, alignment}:
        raise ValueError(f"dominance ratio needs exactly the channels {consistency!r} and {alignment!r}, "
                         f"got {sorted(designated)}")
    gain_c = report.channel_means[consistency] - baseline.channel_means[consistency]
    gain_a = report.channel_means[alignment] - baseline.channel_means[alignment]
    return float(gain_c / max(abs(gain_a), eps))


# ============================================================================
# TRAINING & EVALUATION
# ============================================================================

def evaluate_policy(policy: FlowModel, channels: Sequence[RewardChannel], prompts: Sequence[PromptSpec],
                    resolution: int, steps: int, stream: RngStream) -> Dict[str, float]:
    """ODE samples at `resolution`; mean reward per channel plus the weighted sum"""
    totals = {c.name: [] for c in channels}
    for i, prompt in enumerate(prompts):
        signals = sample_ode(policy, set_conditions(prompt), resolution, steps, stream.child(i))
        for channel in channels:
            totals[channel.name].append(channel(signals, prompt))
    result = {name: float(np.mean(values)) for name, values in totals.items()}
    result["aggregated"] = float(sum(c.weight * result[c.name] for c in channels))
    return result


@dataclass
class GrpoRun:
    policy: FlowModel
    reports: List[EpochReport] = field(default_factory=list)
    evaluations: List[Dict] = field(default_factory=list)


def train_grpo(
    policy: FlowModel,
    channels: Sequence[RewardChannel],
    config: GrpoConfig,
    prompts: Sequence[PromptSpec],
    eval_prompts: Sequence[PromptSpec],
    stream: RngStream,
    eval_every: int = 1,
    progress: bool = False,
) -> GrpoRun:
    """Epoch loop from the given policy; evaluation before training and every eval_every epochs"""
    reference = FlowModel(params=copy_params(policy.params), world=policy.world)
    eval_stream = stream.child(2)
    run = GrpoRun(policy=policy)
    names = {c.name for c in channels}
    track_dominance = names == {"consistency", "alignment"}

    def evaluate(epoch: int) -> None:
        scores = evaluate_policy(run.policy, channels, eval_prompts, config.eval_resolution,
                                 config.sampling_steps, eval_stream)
        run.evaluations.append({"epoch": epoch, **scores})

    evaluate(0)
    for epoch in tqdm(range(config.epochs), desc="grpo", disable=not progress):
        run.policy, report = grpo_epoch(run.policy, channels, config, prompts, stream.child(0, epoch),
                                        epoch, reference)
        if track_dominance:
            report.dominance = dominance_ratio(report, run.reports[0] if run.reports else report,
                                               config.dominance_eps)
        run.reports.append(report)
        if (epoch + 1) % eval_every == 0 or epoch + 1 == config.epochs:
            evaluate(epoch + 1)
    return run


def _fresh_copy(policy: FlowModel) -> FlowModel:
    return FlowModel(params=copy_params(policy.params), world=policy.world, optimizer=AdamState())


def resolution_ablation(
    policy: FlowModel,
    channels: Sequence[RewardChannel],
    config: GrpoConfig,
    prompts: Sequence[PromptSpec],
    eval_prompts: Sequence[PromptSpec],
    resolutions: Sequence[int],
    stream: RngStream,
    progress: bool = False,
) -> Tuple[Dict, List[Tuple]]:
    """
    Same initial policy and seed at each training resolution; evaluation at
    the evaluation resolution. Returns (summary, plot rows).
    """
    if any(d < 8 for d in resolutions):
        raise ValueError("training resolutions must be >= 8")
    ordered = list(dict.fromkeys([config.eval_resolution, *resolutions]))
    set_size = prompts[0].set_size
    runs: Dict[int, Dict] = {}
    rows: List[Tuple] = []
    for d in ordered:
        cfg = config.model_copy(update={"train_resolution": d})
        points = points_per_epoch(cfg, set_size)
        entry = {"train_resolution": d, "points_per_epoch": points, "failed": False, "error": None}
        try:
            result = train_grpo(_fresh_copy(policy), channels, cfg, prompts, eval_prompts, stream,
                                progress=progress)
        except LabError as e:
            logger.warning("training at d=%d failed: %s", d, e)
            entry.update(failed=True, error=str(e), final_eval=None, curve=[])
        else:
            curve = [ev["aggregated"] for ev in result.evaluations]
            entry.update(final_eval=curve[-1], curve=curve)
            for ev in result.evaluations:
                rows.append((ev["epoch"], f"d{d}", ev["aggregated"], ev["epoch"] * points))
        runs[d] = entry

    baseline = runs[config.eval_resolution]
    base_points = baseline["points_per_epoch"]
    for d, entry in runs.items():
        entry["cost_ratio"] = entry["points_per_epoch"] / base_points
        if entry["failed"] or baseline["final_eval"] is None:
            entry["relative_final"] = None
            entry["meets_80pct"] = False
        else:
            entry["relative_final"] = entry["final_eval"] / baseline["final_eval"]
            entry["meets_80pct"] = entry["final_eval"] >= 0.8 * baseline["final_eval"]
    summary = {
        "mode": "resolution",
        "eval_resolution": config.eval_resolution,
        "runs": [runs[d] for d in ordered],
    }
    return summary, rows


def logtame_ablation(
    policy: FlowModel,
    channels: Sequence[RewardChannel],
    config: GrpoConfig,
    prompts: Sequence[PromptSpec],
    eval_prompts: Sequence[PromptSpec],
    seeds: Sequence[int],
    progress: bool = False,
) -> Tuple[Dict, List[Tuple]]:
    """Paired naive vs tamed runs per seed; compares final dominance ratios"""
    if {c.name for c in channels} != {"consistency", "alignment"}:
        raise ValueError("the log-tame ablation needs exactly the consistency and alignment channels")
    set_size = prompts[0].set_size
    points = points_per_epoch(config, set_size)
    pairs, rows = [], []
    for seed in seeds:
        finals = {}
        for series, taming in (("naive", False), ("tamed", True)):
            cfg = config.model_copy(update={"taming": taming})
            result = train_grpo(_fresh_copy(policy), channels, cfg, prompts, eval_prompts,
                                RngStream(seed), progress=progress)
            curve = [r.dominance for r in result.reports]
            for r in result.reports:
                rows.append((r.epoch, f"{series}_s{seed}", r.dominance, (r.epoch + 1) * points))
            finals[series] = curve[-1] if curve else 0.0
        pairs.append({"seed": seed, "naive_final": finals["naive"], "tamed_final": finals["tamed"],
                      "tamed_lower": finals["tamed"] < finals["naive"]})
    summary = {
        "mode": "logtame",
        "pairs": pairs,
        "tamed_lower_count": sum(p["tamed_lower"] for p in pairs),
        "seed_pairs": len(pairs),
    }
    return summary, rows
