"""Tests for rankmetrics: rank correlations, accuracies, benchmark reports"""

import itertools
from dataclasses import replace

import pytest

from lab_config import DatasetConfig
from numcore import RngStream
from pacodata import build_dataset
from rankmetrics import (
    REPORT_HEADER,
    RankingPairSample,
    benchmark_report,
    kendall_tau,
    metric_row,
    pairwise_accuracy,
    position_accuracy,
    rank_instances,
    rank_positions,
    spearman_rho,
    t1b1_accuracy,
)
from toyworld import true_consistency

PERMUTATIONS = [list(p) for p in itertools.permutations(range(4))]


def _brute_tau(a, b):
    pa, pb = rank_positions(a), rank_positions(b)
    total = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        total += 1 if (pa[i] - pa[j]) * (pb[i] - pb[j]) > 0 else -1
    return total / 6


def _brute_rho(a, b):
    d = rank_positions(a) - rank_positions(b)
    return 1 - 6 * float((d ** 2).sum()) / (4 * 15)


# ============================================================================
# CORRELATIONS
# ============================================================================

def test_rank_positions_inverts_ranking():
    assert rank_positions([2, 0, 3, 1]).tolist() == [1, 3, 0, 2]


def test_correlations_match_brute_force_on_every_pair():
    for a, b in itertools.product(PERMUTATIONS, PERMUTATIONS):
        assert kendall_tau(a, b) == pytest.approx(_brute_tau(a, b), abs=1e-12)
        assert spearman_rho(a, b) == pytest.approx(_brute_rho(a, b), abs=1e-12)


def test_identity_and_reversal():
    assert kendall_tau([0, 1, 2, 3], [0, 1, 2, 3]) == pytest.approx(1.0)
    assert kendall_tau([3, 2, 1, 0], [0, 1, 2, 3]) == pytest.approx(-1.0)
    assert spearman_rho([3, 2, 1, 0], [0, 1, 2, 3]) == pytest.approx(-1.0)


def test_sample_rejects_non_permutations():
    with pytest.raises(ValueError):
        RankingPairSample([0, 0, 1, 2], [0, 1, 2, 3])
    with pytest.raises(ValueError):
        RankingPairSample([0, 1, 2], [0, 1, 2, 3])
    with pytest.raises(ValueError):
        kendall_tau([0], [0])


# ============================================================================
# ACCURACIES
# ============================================================================

def test_t1b1_needs_both_ends():
    samples = [
        RankingPairSample([0, 1, 2, 3], [0, 2, 1, 3]),
        RankingPairSample([0, 1, 3, 2], [0, 1, 2, 3]),
    ]
    assert t1b1_accuracy(samples) == 0.5


def test_position_accuracy_averages_per_sample():
    samples = [
        RankingPairSample([0, 1, 2, 3], [0, 1, 2, 3]),
        RankingPairSample([1, 0, 2, 3], [0, 1, 2, 3]),
    ]
    assert position_accuracy(samples) == pytest.approx(0.75)


def test_empty_samples_rejected():
    with pytest.raises(ValueError):
        t1b1_accuracy([])
    with pytest.raises(ValueError):
        position_accuracy([])


def test_pairwise_accuracy_counts_ties_half():
    assert pairwise_accuracy([0.9, 0.5, 0.2], [0.1, 0.5, 0.4]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        pairwise_accuracy([], [])
    with pytest.raises(ValueError):
        pairwise_accuracy([0.1], [0.1, 0.2])


# ============================================================================
# BENCHMARK
# ============================================================================

@pytest.fixture
def benchmark():
    config = DatasetConfig(prompts=2, grids_per_prompt=2, holdout=6, resolution=32)
    return build_dataset(config, RngStream(13)).benchmark


def test_oracle_scores_every_metric_perfectly(benchmark):
    rows, details = benchmark_report({"oracle": true_consistency}, benchmark)
    row = rows[0]
    assert row.method == "oracle" and row.n_samples == len(benchmark)
    for value in (row.accuracy, row.tau, row.rho, row.t1b1, row.pairwise_acc):
        assert value == pytest.approx(1.0)
    assert [r.instance_id for r in details["oracle"]] == [i.instance_id for i in benchmark]


def test_reversed_oracle_scores_worst(benchmark):
    rows, _ = benchmark_report({"reversed": lambda a, b: -true_consistency(a, b)}, benchmark)
    assert rows[0].tau == pytest.approx(-1.0)
    assert rows[0].t1b1 == 0.0 and rows[0].pairwise_acc == 0.0


def test_report_keeps_scorer_order(benchmark):
    rows, _ = benchmark_report({"b": true_consistency, "a": lambda x, y: 0.5}, benchmark)
    assert [r.method for r in rows] == ["b", "a"]
    assert len(rows[0].as_row()) == len(REPORT_HEADER)
    assert rows[1].pairwise_acc == 0.5


def test_unannotated_instance_rejected(benchmark):
    bare = replace(benchmark[0], annotation=None)
    with pytest.raises(ValueError):
        rank_instances(true_consistency, [bare])
    with pytest.raises(ValueError):
        benchmark_report({"oracle": true_consistency}, [])


def test_metric_row_uses_annotated_extremes(benchmark):
    rankings = rank_instances(true_consistency, benchmark)
    rankings[0].scores[rankings[0].annotated[0]] = -1.0
    row = metric_row("tampered", rankings)
    assert row.pairwise_acc == pytest.approx(1.0 - 1.0 / len(rankings))
