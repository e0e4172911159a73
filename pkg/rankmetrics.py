#!/usr/bin/env python3
"""
rankmetrics.py - Ranking Metrics for PaCo Lab

Compares predicted candidate rankings with annotated ones:
- Kendall tau and Spearman rho on rank positions (scipy.stats)
- Top-1-Bottom-1 accuracy
- Per-position accuracy
- Pairwise accuracy on top-1 vs bottom-1 candidates

Rankings are permutations listed best-to-worst.

Version: 1.0.0
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from scipy.stats import kendalltau, spearmanr

from numcore import DataError
from pacodata import RankingInstance, rank_by_scores
from toyworld import Signal

logger = logging.getLogger(__name__)

REPORT_HEADER = ("method", "accuracy", "tau", "rho", "t1b1", "pairwise_acc", "n_samples")
RANKINGS_HEADER = ("method", "instance_id", "predicted", "annotated", "scores")

ScoreFn = Callable[[Signal, Signal], float]

# ============================================================================
# DATA STRUCTURES
# ============================================================================

def _check_permutation(label: str, ranking: Sequence[int]) -> None:
    if sorted(ranking) != list(range(len(ranking))):
        raise ValueError(f"{label} ranking {list(ranking)} is not a permutation of 0..{len(ranking) - 1}")


@dataclass
class RankingPairSample:
    predicted: List[int]
    annotated: List[int]

    def __post_init__(self):
        self.predicted = [int(v) for v in self.predicted]
        self.annotated = [int(v) for v in self.annotated]
        _check_permutation("predicted", self.predicted)
        _check_permutation("annotated", self.annotated)
        if len(self.predicted) != len(self.annotated):
            raise ValueError(f"arity mismatch: {len(self.predicted)} vs {len(self.annotated)}")

    @property
    def arity(self) -> int:
        return len(self.predicted)


@dataclass
class MetricRow:
    method: str
    accuracy: float
    tau: float
    rho: float
    t1b1: float
    pairwise_acc: float
    n_samples: int

    def as_row(self) -> Tuple:
        return (self.method, self.accuracy, self.tau, self.rho, self.t1b1, self.pairwise_acc, self.n_samples)


# ============================================================================
# METRICS
# ============================================================================

def rank_positions(ranking: Sequence[int]) -> np.ndarray:
    """positions[c] = place of candidate c in a best-to-worst ranking"""
    positions = np.empty(len(ranking), dtype=np.int64)
    positions[np.asarray(ranking)] = np.arange(len(ranking))
    return positions


def _aligned(predicted: Sequence[int], annotated: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    sample = RankingPairSample(list(predicted), list(annotated))
    if sample.arity < 2:
        raise ValueError("rank correlation needs at least 2 candidates")
    return rank_positions(sample.predicted), rank_positions(sample.annotated)


def kendall_tau(predicted: Sequence[int], annotated: Sequence[int]) -> float:
    a, b = _aligned(predicted, annotated)
    return float(kendalltau(a, b)[0])


def spearman_rho(predicted: Sequence[int], annotated: Sequence[int]) -> float:
    a, b = _aligned(predicted, annotated)
    return float(spearmanr(a, b)[0])


def _non_empty(samples: Sequence[RankingPairSample]) -> None:
    if not samples:
        raise ValueError("no ranking samples")


def t1b1_accuracy(samples: Sequence[RankingPairSample]) -> float:
    _non_empty(samples)
    hits = sum(1 for s in samples if s.predicted[0] == s.annotated[0] and s.predicted[-1] == s.annotated[-1])
    return hits / len(samples)


def position_accuracy(samples: Sequence[RankingPairSample]) -> float:
    _non_empty(samples)
    per_sample = [np.mean(np.asarray(s.predicted) == np.asarray(s.annotated)) for s in samples]
    return float(np.mean(per_sample))


def pairwise_accuracy(top_scores: Sequence[float], bottom_scores: Sequence[float]) -> float:
    """
    Decisions on the extremes pairs of each instance: (reference, top-1) is
    the consistent pair, (reference, bottom-1) the inconsistent one, and a
    scorer decides correctly when the consistent pair scores higher. Ties
    count half.

    The comparison needs no calibrated threshold, so any score scale works
    (an oracle scores 1.0). The P(YES) > 0.5 decision rule for the pair
    scorer is pacoreward.benchmark_decisions.
    """
    top = np.asarray(top_scores, dtype=np.float64)
    bottom = np.asarray(bottom_scores, dtype=np.float64)
    if top.size == 0 or top.shape != bottom.shape:
        raise ValueError("pairwise accuracy needs equally many, non-zero top and bottom scores")
    return float(np.mean((top > bottom) + 0.5 * (top == bottom)))


# ============================================================================
# BENCHMARK
# ============================================================================

@dataclass
class InstanceRanking:
    instance_id: int
    predicted: List[int]
    annotated: List[int]
    scores: List[float]


def rank_instances(score_fn: ScoreFn, instances: Sequence[RankingInstance]) -> List[InstanceRanking]:
    results = []
    for inst in instances:
        if inst.annotation is None:
            raise DataError(f"benchmark instance {inst.instance_id} is not annotated")
        scores = [float(score_fn(inst.reference, c)) for c in inst.candidates]
        results.append(InstanceRanking(inst.instance_id, rank_by_scores(scores), list(inst.annotation), scores))
    return results


def metric_row(method: str, rankings: Sequence[InstanceRanking]) -> MetricRow:
    samples = [RankingPairSample(r.predicted, r.annotated) for r in rankings]
    top = [r.scores[r.annotated[0]] for r in rankings]
    bottom = [r.scores[r.annotated[-1]] for r in rankings]
    return MetricRow(
        method=method,
        accuracy=position_accuracy(samples),
        tau=float(np.mean([kendall_tau(s.predicted, s.annotated) for s in samples])),
        rho=float(np.mean([spearman_rho(s.predicted, s.annotated) for s in samples])),
        t1b1=t1b1_accuracy(samples),
        pairwise_acc=pairwise_accuracy(top, bottom),
        n_samples=len(samples),
    )


def benchmark_report(scorers: Dict[str, ScoreFn], instances: Sequence[RankingInstance]
                     ) -> Tuple[List[MetricRow], Dict[str, List[InstanceRanking]]]:
    """One metric row per scorer (in the given order) plus the per-instance rankings"""
    if not instances:
        raise ValueError("benchmark is empty")
    rows, details = [], {}
    for name, fn in scorers.items():
        rankings = rank_instances(fn, instances)
        rows.append(metric_row(name, rankings))
        details[name] = rankings
        logger.info("benchmark %s: %s", name, rows[-1])
    return rows, details
