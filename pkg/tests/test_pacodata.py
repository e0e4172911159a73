"""Tests for pacodata: grid synthesis, pairing, conversion, persistence"""

import itertools
import json

import numpy as np
import pytest

from lab_config import DatasetConfig
from numcore import DataError, RngStream
from pacodata import (
    END_TOKEN,
    RATIONALE_OFFSET,
    Grid,
    PairLabel,
    PairSource,
    RankingInstance,
    build_dataset,
    build_grids,
    expected_instance_count,
    inject_consistent_pairs,
    load_grids,
    load_instances,
    load_pairs,
    oracle_annotate,
    rank_by_scores,
    ranking_to_pairs,
    rationale_symbol,
    split_benchmark,
    subfigure_pairing,
    synth_rationale,
    write_dataset,
)
from toyworld import DEFAULT_WORLD, extract_identity, sample_prompts, true_consistency


def _grids(prompts=1, g=2, rows=2, cols=2, jitter=0.1, drift=0.0, seed=3):
    ps = sample_prompts(prompts, 4, RngStream(seed))
    return build_grids(ps, g, rows, cols, 0.0, RngStream(seed).child(1), jitter, drift, 32)


def _instances(grids):
    by_prompt = {}
    for grid in grids:
        by_prompt.setdefault(grid.prompt_id, []).append(grid)
    out = []
    for pid in sorted(by_prompt):
        out.extend(subfigure_pairing(by_prompt[pid], start_id=len(out)))
    return out


# ============================================================================
# COUNTS
# ============================================================================

def test_expected_count_matches_default_figures():
    assert expected_instance_count(708, 4, 2, 2) == 33984
    assert 708 * 4 == 2832
    assert expected_instance_count(1, 2, 2, 2) == 8


@pytest.mark.parametrize("prompts,g", [(1, 2), (2, 3), (1, 4), (3, 2), (2, 2)])
def test_pairing_count_matches_enumeration(prompts, g):
    grids = _grids(prompts, g)
    instances = _instances(grids)
    enumerated = [
        (grid.grid_id, cell, other.grid_id)
        for grid, other in itertools.product(grids, grids)
        if grid.prompt_id == other.prompt_id and grid.grid_id != other.grid_id
        for cell in range(4)
    ]
    assert len(instances) == len(enumerated) == expected_instance_count(prompts, g, 2, 2)
    assert [i.instance_id for i in instances] == list(range(len(instances)))


def test_pairing_never_uses_own_grid():
    for inst in _instances(_grids(1, 3)):
        assert all(ref.grid_id != inst.reference_ref.grid_id for ref in inst.candidate_refs)
        assert all(ref.prompt_id == inst.reference_ref.prompt_id for ref in inst.candidate_refs)


def test_pairing_requires_four_cells():
    grids = _grids(1, 2, rows=1, cols=2)
    with pytest.raises(ValueError):
        subfigure_pairing(grids)


def test_build_grids_guards():
    ps = sample_prompts(1, 4, RngStream(1))
    with pytest.raises(ValueError):
        build_grids(ps, 1, 2, 2, 0.0, RngStream(1))
    with pytest.raises(ValueError):
        build_grids(ps, 2, 1, 1, 0.0, RngStream(1))


def test_grids_are_reproducible():
    a, b = _grids(2, 2), _grids(2, 2)
    assert [g.to_json() for g in a] == [g.to_json() for g in b]


def test_zero_jitter_grids_are_fully_consistent():
    grids = _grids(1, 2, jitter=0.0, drift=0.0)
    cells = [c for g in grids for c in g.subfigures]
    for a, b in itertools.combinations(cells, 2):
        assert true_consistency(a, b) == pytest.approx(1.0)


def _identity_spread(grid):
    ids = np.stack([extract_identity(c) for c in grid.subfigures])
    return float(np.abs(ids - ids[0]).max())


def test_grid_cells_share_identity_by_default():
    ps = sample_prompts(1, 4, RngStream(3))
    grids = build_grids(ps, 2, 2, 2, 0.0, RngStream(3).child(1), d=32)
    assert all(_identity_spread(g) < 1e-9 for g in grids)
    assert DatasetConfig().cell_drift == 0.0


def test_cell_drift_is_opt_in():
    grids = _grids(1, 2, drift=0.15)
    assert all(_identity_spread(g) > 1e-3 for g in grids)


# ============================================================================
# ANNOTATION & PAIRS
# ============================================================================

def test_rank_by_scores_ties_keep_index_order():
    assert rank_by_scores([0.2, 0.9, 0.9, 0.1]) == [1, 2, 0, 3]


def test_oracle_annotation_orders_by_true_consistency():
    inst = oracle_annotate(_instances(_grids())[0])
    scores = [true_consistency(inst.reference, c) for c in inst.candidates]
    assert [scores[i] for i in inst.annotation] == sorted(scores, reverse=True)


def test_extremes_policy_labels_top_and_bottom():
    inst = oracle_annotate(_instances(_grids())[0])
    pairs = ranking_to_pairs(inst, "extremes", start_id=10)
    assert [p.pair_id for p in pairs] == [10, 11]
    assert pairs[0].candidate_ref == inst.candidate_refs[inst.annotation[0]]
    assert pairs[0].label == PairLabel.CONSISTENT
    assert pairs[1].candidate_ref == inst.candidate_refs[inst.annotation[-1]]
    assert pairs[1].label == PairLabel.INCONSISTENT

    all_pairs = ranking_to_pairs(inst, "all")
    assert len(all_pairs) == 4
    assert sum(p.label == PairLabel.CONSISTENT for p in all_pairs) == 2


def test_pairs_require_annotation_and_known_policy():
    inst = _instances(_grids())[0]
    with pytest.raises(ValueError):
        ranking_to_pairs(inst)
    with pytest.raises(ValueError):
        ranking_to_pairs(oracle_annotate(inst), "middle")


def test_instance_rejects_wrong_candidate_count():
    inst = _instances(_grids())[0]
    with pytest.raises(ValueError):
        RankingInstance(0, inst.reference, inst.reference_ref, inst.candidates[:3], inst.candidate_refs[:3])


def test_rationale_symbols():
    assert rationale_symbol(0.01) == 0
    assert rationale_symbol(0.1) == 1 and rationale_symbol(-0.1) == 2
    assert rationale_symbol(0.2) == 3 and rationale_symbol(-0.2) == 4
    assert rationale_symbol(0.5) == 5 and rationale_symbol(-0.5) == 6


def test_synth_rationale_layout():
    pair = ranking_to_pairs(oracle_annotate(_instances(_grids())[0]))[1]
    tokens = synth_rationale(pair)
    assert len(tokens) == DEFAULT_WORLD.k_id + 1
    assert tokens[-1] == END_TOKEN
    assert all(RATIONALE_OFFSET <= t < END_TOKEN for t in tokens[:-1])


def test_split_is_seeded_and_disjoint():
    instances = _instances(_grids(2, 2))
    train, bench = split_benchmark(instances, 5, RngStream(4))
    again_train, again_bench = split_benchmark(instances, 5, RngStream(4))
    assert len(bench) == 5 and len(train) == len(instances) - 5
    assert [i.instance_id for i in bench] == [i.instance_id for i in again_bench]
    assert not {i.instance_id for i in train} & {i.instance_id for i in bench}
    with pytest.raises(ValueError):
        split_benchmark(instances, len(instances), RngStream(4))


def test_injected_pairs_come_from_one_grid():
    grids = _grids(2, 2)
    pairs = inject_consistent_pairs(grids, 6, RngStream(5), start_id=100)
    assert [p.pair_id for p in pairs] == list(range(100, 106))
    for p in pairs:
        assert p.source == PairSource.INJECTED and p.label == PairLabel.CONSISTENT
        assert p.reference_ref.grid_id == p.candidate_ref.grid_id
        assert p.reference_ref.cell != p.candidate_ref.cell
    assert inject_consistent_pairs(grids, 0, RngStream(5)) == []


# ============================================================================
# PIPELINE & PERSISTENCE
# ============================================================================

def _small_dataset(**overrides):
    config = DatasetConfig(**{"prompts": 2, "grids_per_prompt": 2, "holdout": 4, "resolution": 32, **overrides})
    return build_dataset(config, RngStream(21)), config


def test_build_dataset_counts():
    dataset, config = _small_dataset(injected_pairs=3)
    counts = dataset.counts
    assert counts["instances"] == counts["expected_instances"] == 16
    assert counts["grid_images"] == 4 and counts["subfigures"] == 16
    assert counts["benchmark_instances"] == 4 and counts["train_instances"] == 12
    assert counts["pairs"] == 2 * 12 + 3 and counts["injected_pairs"] == 3
    assert all(a.annotation is not None for a in dataset.instances)
    assert all(p.rationale for p in dataset.pairs)


def test_dataset_files_are_byte_identical_across_runs(tmp_path):
    a, _ = _small_dataset()
    b, _ = _small_dataset()
    files_a = write_dataset(a, tmp_path / "a")
    files_b = write_dataset(b, tmp_path / "b")
    for key in files_a:
        assert files_a[key].read_bytes() == files_b[key].read_bytes()


def test_dataset_round_trip(tmp_path):
    dataset, _ = _small_dataset()
    files = write_dataset(dataset, tmp_path)
    grids = load_grids(files["grids"])
    instances = load_instances(files["benchmark"], grids)
    pairs = load_pairs(files["pairs"], grids)
    assert [i.instance_id for i in instances] == [i.instance_id for i in dataset.benchmark]
    assert [i.annotation for i in instances] == [i.annotation for i in dataset.benchmark]
    np.testing.assert_array_equal(instances[0].reference.samples, dataset.benchmark[0].reference.samples)
    assert [p.to_json() for p in pairs] == [p.to_json() for p in dataset.pairs]
    assert isinstance(grids[0], Grid)


def test_corrupted_record_reports_line_number(tmp_path):
    dataset, _ = _small_dataset()
    files = write_dataset(dataset, tmp_path)
    lines = files["pairs"].read_text().splitlines()
    lines[6] = "{not json"
    files["pairs"].write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=":7:") as info:
        load_pairs(files["pairs"], load_grids(files["grids"]))
    assert info.value.line == 7


def test_unresolvable_reference_reports_line(tmp_path):
    dataset, _ = _small_dataset()
    files = write_dataset(dataset, tmp_path)
    lines = files["pairs"].read_text().splitlines()
    record = json.loads(lines[2])
    record["candidate"]["grid_id"] = 999
    lines[2] = json.dumps(record)
    files["pairs"].write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError) as info:
        load_pairs(files["pairs"], load_grids(files["grids"]))
    assert info.value.line == 3


def test_missing_file_names_path(tmp_path):
    with pytest.raises(DataError, match="nope.jsonl"):
        load_grids(tmp_path / "nope.jsonl")
