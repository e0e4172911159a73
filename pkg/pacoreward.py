#!/usr/bin/env python3
"""
pacoreward.py - Pairwise Consistency Scorer for PaCo Lab

A small generative scorer: given (reference, candidate) it emits a token
sequence [YES|NO, rationale..., END]. Training maximizes a weighted
likelihood where the decision token carries weight alpha and the
rationale tokens share 1 - alpha (mean over the rationale). At inference
only the first position is evaluated and P(YES) is the consistency score.

Fast mode trains the decision token alone (alpha = 1, no rationale).

Version: 1.0.0
"""

import logging
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata
from tqdm import tqdm

from numcore import (
    AdamState,
    DataError,
    DivergenceError,
    RngStream,
    Tape,
    Tensor,
    adam_step,
    as_tensor,
    backward,
    concat,
    forward_mlp,
    gradients,
    init_mlp,
    load_checkpoint,
    log_softmax_pick,
    matmul,
    mean,
    permutation,
    reshape,
    save_checkpoint,
    scale,
    softmax,
    tanh,
    uniform,
)
from pacodata import (
    VOCAB_SIZE,
    YES_TOKEN,
    LabeledPair,
    PairLabel,
    RankingInstance,
    rank_by_scores,
    ranking_to_pairs,
)
from rankmetrics import MetricRow, benchmark_report
from toyworld import DEFAULT_WORLD, Signal, WorldConstants, extract_identity

logger = logging.getLogger(__name__)

BOS = VOCAB_SIZE

# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass
class PairScorer:
    """Feature encoder + autoregressive token head"""
    encoder: Dict[str, Tensor]
    head: Dict[str, Tensor]
    world: WorldConstants = DEFAULT_WORLD
    optimizer: AdamState = field(default_factory=AdamState)

    @property
    def positions(self) -> int:
        """Decision token, one rationale token per identity component, END"""
        return self.world.k_id + 2

    def parameters(self) -> Dict[str, Tensor]:
        named = {f"enc_{k}": v for k, v in self.encoder.items()}
        named.update({f"head_{k}": v for k, v in self.head.items()})
        return named

    def __call__(self, reference: Signal, candidate: Signal) -> float:
        return score(self, reference, candidate)


@dataclass
class ScoredCandidate:
    index: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


class RandomScorer:
    """i.i.d. uniform scores; the null baseline"""

    def __init__(self, stream: RngStream):
        self.stream = stream

    def __call__(self, reference: Signal, candidate: Signal) -> float:
        return float(uniform(self.stream, 1)[0])


# ============================================================================
# MODEL
# ============================================================================

def feature_width(world: WorldConstants = DEFAULT_WORLD) -> int:
    return 3 * world.k_id


def pair_features(reference: Signal, candidate: Signal, world: WorldConstants = DEFAULT_WORLD) -> np.ndarray:
    """[identity(ref), identity(cand), identity(cand) - identity(ref)]"""
    a = extract_identity(reference, world)
    b = extract_identity(candidate, world)
    return np.concatenate([a, b, b - a])


def init_scorer(stream: RngStream, hidden: int = 32, world: WorldConstants = DEFAULT_WORLD) -> PairScorer:
    encoder = init_mlp([feature_width(world), hidden, hidden], stream.child(0))
    positions = world.k_id + 2
    head = init_mlp([hidden + positions + VOCAB_SIZE + 1, hidden, VOCAB_SIZE], stream.child(1), out_scale=0.1)
    return PairScorer(encoder=encoder, head=head, world=world)


def _encode(scorer: PairScorer, feats: np.ndarray) -> Tensor:
    return tanh(forward_mlp(scorer.encoder, Tensor(feats)))


def _head_inputs(scorer: PairScorer, h: Tensor, prev_tokens: np.ndarray) -> Tensor:
    """prev_tokens (L, B): token fed at each position (BOS at position 0)"""
    length, batch = prev_tokens.shape
    blocks = []
    for p in range(length):
        pos = np.zeros((batch, scorer.positions))
        pos[:, p] = 1.0
        prev = np.zeros((batch, VOCAB_SIZE + 1))
        prev[np.arange(batch), prev_tokens[p]] = 1.0
        blocks.append(concat([h, Tensor(pos), Tensor(prev)], axis=1))
    return blocks[0] if length == 1 else concat(blocks, axis=0)


def sequence_logprobs(scorer: PairScorer, feats: np.ndarray, targets: np.ndarray) -> Tensor:
    """(L, B) log p(y_p | features, y_<p) with the target prefix fed back"""
    targets = np.asarray(targets, dtype=np.int64)
    batch, length = targets.shape
    if length > scorer.positions:
        raise ValueError(f"target length {length} exceeds the scorer's {scorer.positions} positions")
    prev = np.full((length, batch), BOS, dtype=np.int64)
    prev[1:] = targets[:, :-1].T
    logits = forward_mlp(scorer.head, _head_inputs(scorer, _encode(scorer, feats), prev))
    picked = log_softmax_pick(logits, targets.T.reshape(-1))
    return reshape(picked, (length, batch))


def decision_distribution(scorer: PairScorer, feats: np.ndarray) -> np.ndarray:
    """(B, VOCAB_SIZE) token distribution at the first position"""
    feats = np.atleast_2d(feats)
    prev = np.full((1, feats.shape[0]), BOS, dtype=np.int64)
    logits = forward_mlp(scorer.head, _head_inputs(scorer, _encode(scorer, feats), prev))
    return softmax(logits.data)


# ============================================================================
# LOSS
# ============================================================================

def loss_weights(n: int, alpha: float) -> np.ndarray:
    """alpha on the decision token, (1 - alpha) spread evenly over the rest"""
    if n < 1:
        raise ValueError("target sequence is empty")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if n == 1:
        return np.ones(1)
    return np.concatenate([[alpha], np.full(n - 1, (1.0 - alpha) / (n - 1))])


def paco_loss(logprobs: Union[Tensor, np.ndarray, Sequence[float]], alpha: float) -> Tensor:
    """
    -[alpha * log p(y_0) + (1 - alpha) * mean_{i>=1} log p(y_i)]

    logprobs is (n,) for one sequence or (n, B) for a batch; the batch
    loss is the mean over sequences.
    """
    logprobs = as_tensor(logprobs)
    if logprobs.size == 0:
        raise ValueError("target sequence is empty")
    n = logprobs.shape[0]
    if logprobs.data.ndim == 1:
        logprobs = reshape(logprobs, (n, 1))
    weighted = matmul(Tensor(loss_weights(n, alpha)[None, :]), logprobs)
    return scale(mean(weighted), -1.0)


# ============================================================================
# TRAINING
# ============================================================================

def pair_targets(pairs: Sequence[LabeledPair], with_rationale: bool) -> np.ndarray:
    if not with_rationale:
        return np.array([[p.first_token] for p in pairs], dtype=np.int64)
    lengths = {len(p.rationale) for p in pairs}
    if len(lengths) != 1:
        raise DataError(f"rationales have mixed lengths {sorted(lengths)}")
    return np.array([[p.first_token, *p.rationale] for p in pairs], dtype=np.int64)


def train_scorer(
    pairs: Sequence[LabeledPair],
    alpha: float,
    epochs: int,
    lr: float,
    stream: RngStream,
    batch_size: int = 64,
    hidden: int = 32,
    fast: bool = False,
    world: WorldConstants = DEFAULT_WORLD,
    progress: bool = False,
) -> Tuple[PairScorer, List[Dict]]:
    """
    Minimize the mean weighted-likelihood loss with Adam over shuffled epochs

    Returns:
        (scorer, per-epoch log of loss and decision accuracy)
    """
    if not pairs:
        raise ValueError("no training pairs")
    with_rationale = not fast and all(p.rationale for p in pairs)
    if not fast and not with_rationale:
        logger.warning("pairs carry no rationale tokens; training the decision token only")
    effective_alpha = alpha if with_rationale else 1.0

    scorer = init_scorer(stream.child(0), hidden, world)
    feats = np.stack([pair_features(p.reference, p.candidate, world) for p in pairs])
    targets = pair_targets(pairs, with_rationale)
    labels = np.array([p.label == PairLabel.CONSISTENT for p in pairs])
    params = scorer.parameters()

    log: List[Dict] = []
    shuffle = stream.child(1)
    for epoch in tqdm(range(epochs), desc="scorer", disable=not progress):
        order = permutation(shuffle, len(pairs))
        total = 0.0
        for start in range(0, len(pairs), batch_size):
            idx = order[start:start + batch_size]
            with Tape():
                loss = paco_loss(sequence_logprobs(scorer, feats[idx], targets[idx]), effective_alpha)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"scorer loss diverged in epoch {epoch}",
                    diagnostics={"epoch": epoch, "batch_start": start, "loss": value},
                )
            backward(loss, params)
            params, scorer.optimizer = adam_step(params, gradients(params), scorer.optimizer, lr)
            total += value * len(idx)
        accuracy = _decision_accuracy(scorer, feats, labels)
        log.append({"epoch": epoch, "loss": total / len(pairs), "decision_accuracy": accuracy})
        logger.info("scorer epoch %d loss=%.5f acc=%.4f", epoch, total / len(pairs), accuracy)
    return scorer, log


# ============================================================================
# INFERENCE
# ============================================================================

def score(scorer: PairScorer, reference: Signal, candidate: Signal) -> float:
    """P(first token = YES)"""
    probs = decision_distribution(scorer, pair_features(reference, candidate, scorer.world))
    return float(probs[0, YES_TOKEN])


def score_batch(scorer: PairScorer, references: Sequence[Signal], candidates: Sequence[Signal]) -> np.ndarray:
    feats = np.stack([pair_features(r, c, scorer.world) for r, c in zip(references, candidates)])
    return decision_distribution(scorer, feats)[:, YES_TOKEN]


def scored_candidates(scorer: PairScorer, instance: RankingInstance) -> List[ScoredCandidate]:
    values = score_batch(scorer, [instance.reference] * len(instance.candidates), instance.candidates)
    return [ScoredCandidate(i, float(v)) for i, v in enumerate(values)]


def rank_candidates(scorer: PairScorer, instance: RankingInstance) -> List[int]:
    """Candidate indices by descending score; ties by ascending index"""
    return rank_by_scores([c.score for c in scored_candidates(scorer, instance)])


def _decision_accuracy(scorer: PairScorer, feats: np.ndarray, labels: np.ndarray) -> float:
    yes = decision_distribution(scorer, feats)[:, YES_TOKEN]
    return float(np.mean((yes > 0.5) == labels))


def decision_accuracy(scorer: PairScorer, pairs: Sequence[LabeledPair]) -> float:
    """Fraction of pairs where P(YES) > 0.5 matches the label"""
    if not pairs:
        raise ValueError("no pairs to evaluate")
    feats = np.stack([pair_features(p.reference, p.candidate, scorer.world) for p in pairs])
    labels = np.array([p.label == PairLabel.CONSISTENT for p in pairs])
    return _decision_accuracy(scorer, feats, labels)


def auc(scores: Sequence[float], positives: Sequence[bool]) -> float:
    """Area under the ROC curve (Mann-Whitney, ties averaged)"""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(positives.sum()), int((~positives).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def benchmark_decisions(scorer: PairScorer, instances: Sequence[RankingInstance]) -> Dict[str, float]:
    """P(YES) > 0.5 decisions and AUC on the extremes pairs of an annotated benchmark"""
    pairs = [p for inst in instances for p in ranking_to_pairs(inst, "extremes")]
    if not pairs:
        raise ValueError("benchmark is empty")
    yes = score_batch(scorer, [p.reference for p in pairs], [p.candidate for p in pairs])
    labels = np.array([p.label == PairLabel.CONSISTENT for p in pairs])
    return {
        "pairs": len(pairs),
        "decision_accuracy": float(np.mean((yes > 0.5) == labels)),
        "auc": auc(yes, labels),
    }


# ============================================================================
# SCORER COMPARISON
# ============================================================================

@dataclass(frozen=True)
class ScorerVariant:
    name: str
    alpha: float
    fast: bool = False


DEFAULT_VARIANTS = (
    ScorerVariant("alpha_0.1", 0.1),
    ScorerVariant("alpha_1", 1.0),
    ScorerVariant("fast", 1.0, fast=True),
)


def split_pairs(pairs: Sequence[LabeledPair], held_out: float) -> Tuple[List[LabeledPair], List[LabeledPair]]:
    """Tail split by position; pairs of one instance are adjacent and stay together"""
    if not 0.0 < held_out < 1.0:
        raise ValueError(f"held-out fraction must be in (0, 1), got {held_out}")
    count = 2 * max(1, int(round(held_out * len(pairs) / 2)))
    if count >= len(pairs):
        raise ValueError(f"{len(pairs)} pairs leave nothing to train on with held-out fraction {held_out}")
    return list(pairs[:-count]), list(pairs[-count:])


def compare_scorers(
    pairs: Sequence[LabeledPair],
    benchmark: Sequence[RankingInstance],
    stream: RngStream,
    variants: Sequence[ScorerVariant] = DEFAULT_VARIANTS,
    held_out: float = 0.2,
    epochs: int = 10,
    lr: float = 2e-4,
    batch_size: int = 64,
    hidden: int = 32,
    world: WorldConstants = DEFAULT_WORLD,
    progress: bool = False,
) -> Tuple[Dict, List[MetricRow], List[Tuple]]:
    """
    Train every variant on the same pairs from the same stream and compare them

    Each variant gets held-out decision accuracy on the tail of the pairs,
    extremes decisions on the benchmark and one benchmark metric row.

    Returns:
        (summary, metric rows in variant order, loss curves as
        (epoch, series, value, cost_points) rows)
    """
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ValueError(f"variant names must be unique, got {names}")
    train, held = split_pairs(pairs, held_out)
    entries, scorers, curves = [], {}, []
    for variant in variants:
        scorer, log = train_scorer(train, variant.alpha, epochs, lr, stream, batch_size=batch_size,
                                   hidden=hidden, fast=variant.fast, world=world, progress=progress)
        scorers[variant.name] = scorer
        curves.extend((r["epoch"], variant.name, r["loss"], len(train)) for r in log)
        entries.append({
            "name": variant.name,
            "alpha": variant.alpha,
            "fast": variant.fast,
            "final_loss": log[-1]["loss"] if log else None,
            "held_out_accuracy": decision_accuracy(scorer, held),
            "benchmark": benchmark_decisions(scorer, benchmark),
        })
        logger.info("variant %s held-out accuracy %.4f", variant.name, entries[-1]["held_out_accuracy"])

    rows, _ = benchmark_report({name: partial(score, s) for name, s in scorers.items()}, benchmark)
    for entry, row in zip(entries, rows):
        entry["metrics"] = {"accuracy": row.accuracy, "tau": row.tau, "rho": row.rho, "t1b1": row.t1b1,
                            "pairwise_acc": row.pairwise_acc}
    summary = {"train_pairs": len(train), "held_out_pairs": len(held), "benchmark_instances": len(benchmark),
               "epochs": epochs, "lr": lr, "variants": entries}
    return summary, rows, curves


# ============================================================================
# PERSISTENCE
# ============================================================================

def save_scorer(scorer: PairScorer, path: Union[str, Path], extra: Optional[Dict] = None) -> Path:
    meta = {"kind": "pair_scorer", "world": asdict(scorer.world), **(extra or {})}
    return save_checkpoint(path, scorer.parameters(), meta)


def load_scorer(path: Union[str, Path]) -> PairScorer:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "pair_scorer":
        raise DataError(f"checkpoint holds a '{meta.get('kind')}', expected a pair_scorer", path=str(path))
    world = WorldConstants(**meta["world"]) if "world" in meta else DEFAULT_WORLD
    encoder = {k[len("enc_"):]: v for k, v in params.items() if k.startswith("enc_")}
    head = {k[len("head_"):]: v for k, v in params.items() if k.startswith("head_")}
    if not encoder or not head:
        raise DataError("scorer checkpoint is missing encoder or head tensors", path=str(path))
    return PairScorer(encoder=encoder, head=head, world=world)
