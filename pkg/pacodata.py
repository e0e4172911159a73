#!/usr/bin/env python3
"""
pacodata.py - Consistency Dataset Pipeline for PaCo Lab

prompts -> grids -> sub-figure combinatorial pairing -> oracle ranking
-> benchmark split -> ranking-to-pair conversion -> rationale tokens

Count identity for m*n = 4: |instances| = P * g * m * n * (g - 1).

Version: 1.0.0
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from lab_config import DatasetConfig
from numcore import DataError, RngStream, gaussian, integers, permutation
from run_store import iter_jsonl_numbered, write_json, write_jsonl
from toyworld import (
    DEFAULT_WORLD,
    PromptSpec,
    Signal,
    WorldConstants,
    extract_identity,
    render,
    sample_prompts,
    true_consistency,
)

logger = logging.getLogger(__name__)

CANDIDATES = 4

# Scorer vocabulary: decision tokens, 16 rationale symbols, end token
YES_TOKEN = 0
NO_TOKEN = 1
RATIONALE_OFFSET = 2
RATIONALE_SYMBOLS = 16
END_TOKEN = RATIONALE_OFFSET + RATIONALE_SYMBOLS
VOCAB_SIZE = END_TOKEN + 1

# |identity difference| bin edges -> bins 0..3
RATIONALE_BIN_EDGES = (0.05, 0.15, 0.3)

# ============================================================================
# DATA STRUCTURES
# ============================================================================

class PairLabel(Enum):
    CONSISTENT = "consistent"
    INCONSISTENT = "inconsistent"


class PairSource(Enum):
    RANKING = "ranking"
    INJECTED = "injected"


class PairPolicy(Enum):
    EXTREMES = "extremes"
    ALL = "all"


@dataclass
class Grid:
    """m x n subfigures rendered from one prompt with one seed"""
    grid_id: int
    prompt_id: int
    seed: int
    stream_id: int
    rows: int
    cols: int
    identity: List[float]
    subfigures: List[Signal]

    def to_json(self) -> Dict:
        return {
            "grid_id": self.grid_id,
            "prompt_id": self.prompt_id,
            "seed": self.seed,
            "stream_id": self.stream_id,
            "rows": self.rows,
            "cols": self.cols,
            "identity": self.identity,
            "subfigures": [s.to_json() for s in self.subfigures],
        }

    @classmethod
    def from_json(cls, data: Dict) -> "Grid":
        grid = cls(
            grid_id=data["grid_id"],
            prompt_id=data["prompt_id"],
            seed=data["seed"],
            stream_id=data["stream_id"],
            rows=data["rows"],
            cols=data["cols"],
            identity=data["identity"],
            subfigures=[Signal.from_json(s) for s in data["subfigures"]],
        )
        if len(grid.subfigures) != grid.rows * grid.cols:
            raise ValueError(f"grid {grid.grid_id} has {len(grid.subfigures)} subfigures, layout needs {grid.rows * grid.cols}")
        return grid


@dataclass(frozen=True)
class CellRef:
    """Provenance of one subfigure"""
    prompt_id: int
    grid_id: int
    cell: int

    def to_json(self) -> Dict:
        return {"prompt_id": self.prompt_id, "grid_id": self.grid_id, "cell": self.cell}

    @classmethod
    def from_json(cls, data: Dict) -> "CellRef":
        return cls(int(data["prompt_id"]), int(data["grid_id"]), int(data["cell"]))


@dataclass
class RankingInstance:
    """One reference subfigure and the four subfigures of another grid"""
    instance_id: int
    reference: Signal
    reference_ref: CellRef
    candidates: List[Signal]
    candidate_refs: List[CellRef]
    annotation: Optional[List[int]] = None

    def __post_init__(self):
        if len(self.candidates) != CANDIDATES or len(self.candidate_refs) != CANDIDATES:
            raise ValueError(f"a ranking instance needs exactly {CANDIDATES} candidates")
        if self.annotation is not None and sorted(self.annotation) != list(range(CANDIDATES)):
            raise ValueError(f"annotation {self.annotation} is not a permutation of 0..{CANDIDATES - 1}")

    @property
    def prompt_id(self) -> int:
        return self.reference_ref.prompt_id

    def to_json(self) -> Dict:
        return {
            "instance_id": self.instance_id,
            "reference": self.reference_ref.to_json(),
            "candidates": [r.to_json() for r in self.candidate_refs],
            "annotation": self.annotation,
        }


@dataclass
class LabeledPair:
    pair_id: int
    instance_id: Optional[int]
    reference: Signal
    reference_ref: CellRef
    candidate: Signal
    candidate_ref: CellRef
    label: PairLabel
    source: PairSource = PairSource.RANKING
    rationale: List[int] = field(default_factory=list)

    @property
    def first_token(self) -> int:
        return YES_TOKEN if self.label == PairLabel.CONSISTENT else NO_TOKEN

    def to_json(self) -> Dict:
        return {
            "pair_id": self.pair_id,
            "instance_id": self.instance_id,
            "reference": self.reference_ref.to_json(),
            "candidate": self.candidate_ref.to_json(),
            "label": self.label.value,
            "source": self.source.value,
            "rationale": self.rationale,
        }


@dataclass
class Dataset:
    prompts: List[PromptSpec]
    grids: List[Grid]
    instances: List[RankingInstance]
    train: List[RankingInstance]
    benchmark: List[RankingInstance]
    pairs: List[LabeledPair]
    seed: int
    counts: Dict[str, int] = field(default_factory=dict)


# ============================================================================
# GRIDS & PAIRING
# ============================================================================

def build_grids(
    prompts: Sequence[PromptSpec],
    grids_per_prompt: int,
    rows: int,
    cols: int,
    noise_scale: float,
    stream: RngStream,
    identity_jitter: float = 0.1,
    cell_drift: float = 0.0,
    d: int = 64,
    world: WorldConstants = DEFAULT_WORLD,
    progress: bool = False,
) -> List[Grid]:
    """
    P * g grids; grid (p, k) draws from its own child stream

    Every subfigure of a grid carries the grid's jittered identity, so cells
    differ only by content index and render noise. A nonzero cell_drift adds
    an independent identity offset per cell (off by default).
    """
    if grids_per_prompt < 2:
        raise ValueError(f"need at least 2 grids per prompt, got {grids_per_prompt}")
    if rows * cols < 2:
        raise ValueError(f"a grid needs at least 2 subfigures, layout is {rows}x{cols}")
    grids: List[Grid] = []
    for prompt_id, prompt in enumerate(tqdm(prompts, desc="grids", disable=not progress)):
        for k in range(grids_per_prompt):
            grid_stream = stream.child(prompt_id, k)
            base = np.asarray(prompt.identity)
            if identity_jitter:
                base = np.clip(base + identity_jitter * gaussian(grid_stream, base.size).data, -1.0, 1.0)
            cells = []
            for cell in range(rows * cols):
                identity = base
                if cell_drift:
                    identity = base + cell_drift * gaussian(grid_stream, base.size).data
                cell_prompt = prompt.with_identity(identity)
                cells.append(render(cell_prompt, cell % prompt.set_size, noise_scale, grid_stream, d, world))
            grids.append(Grid(
                grid_id=prompt_id * grids_per_prompt + k,
                prompt_id=prompt_id,
                seed=grid_stream.seed,
                stream_id=grid_stream.stream_id,
                rows=rows,
                cols=cols,
                identity=[float(v) for v in base],
                subfigures=cells,
            ))
    return grids


def subfigure_pairing(grids: Sequence[Grid], start_id: int = 0) -> List[RankingInstance]:
    """Every subfigure as reference against every other grid of the same prompt"""
    if not grids:
        return []
    prompt_ids = {g.prompt_id for g in grids}
    if len(prompt_ids) != 1:
        raise ValueError(f"pairing expects grids of one prompt, got prompts {sorted(prompt_ids)}")
    for g in grids:
        if g.rows * g.cols != CANDIDATES:
            raise ValueError(f"instances need exactly {CANDIDATES} candidates, grid layout is {g.rows}x{g.cols}")

    instances = []
    next_id = start_id
    for ref_grid in grids:
        for cell, reference in enumerate(ref_grid.subfigures):
            ref = CellRef(ref_grid.prompt_id, ref_grid.grid_id, cell)
            for other in grids:
                if other.grid_id == ref_grid.grid_id:
                    continue
                instances.append(RankingInstance(
                    instance_id=next_id,
                    reference=reference,
                    reference_ref=ref,
                    candidates=list(other.subfigures),
                    candidate_refs=[CellRef(other.prompt_id, other.grid_id, c) for c in range(CANDIDATES)],
                ))
                next_id += 1
    return instances


def expected_instance_count(prompts: int, grids_per_prompt: int, rows: int, cols: int) -> int:
    return prompts * grids_per_prompt * rows * cols * (grids_per_prompt - 1)


# ============================================================================
# ANNOTATION & CONVERSION
# ============================================================================

def rank_by_scores(scores: Sequence[float]) -> List[int]:
    """Indices best-to-worst; ties keep ascending index"""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def oracle_annotate(instance: RankingInstance, world: WorldConstants = DEFAULT_WORLD) -> RankingInstance:
    scores = [true_consistency(instance.reference, c, world) for c in instance.candidates]
    return replace(instance, annotation=rank_by_scores(scores))


def ranking_to_pairs(instance: RankingInstance, policy: Union[str, PairPolicy] = PairPolicy.EXTREMES,
                     start_id: int = 0) -> List[LabeledPair]:
    """
    extremes: top-1 consistent, bottom-1 inconsistent
    all:      additionally rank 2 consistent, rank 3 inconsistent
    """
    if instance.annotation is None:
        raise ValueError(f"instance {instance.instance_id} is not annotated")
    try:
        policy = PairPolicy(policy)
    except ValueError:
        raise ValueError(f"unknown pair policy '{policy}' (policies: {', '.join(p.value for p in PairPolicy)})") from None

    order = instance.annotation
    picks = [(order[0], PairLabel.CONSISTENT), (order[-1], PairLabel.INCONSISTENT)]
    if policy == PairPolicy.ALL:
        picks += [(order[1], PairLabel.CONSISTENT), (order[2], PairLabel.INCONSISTENT)]
    return [
        LabeledPair(
            pair_id=start_id + i,
            instance_id=instance.instance_id,
            reference=instance.reference,
            reference_ref=instance.reference_ref,
            candidate=instance.candidates[c],
            candidate_ref=instance.candidate_refs[c],
            label=label,
        )
        for i, (c, label) in enumerate(picks)
    ]


def rationale_symbol(diff: float) -> int:
    """0 for negligible differences, else 2*bin - 1 (+) or 2*bin (-) for bins 1..3"""
    magnitude_bin = int(np.digitize(abs(diff), RATIONALE_BIN_EDGES))
    if magnitude_bin == 0:
        return 0
    return 2 * magnitude_bin - (0 if diff < 0 else 1)


def synth_rationale(pair: LabeledPair, world: WorldConstants = DEFAULT_WORLD) -> List[int]:
    """One token per identity component (candidate minus reference), then END"""
    diff = extract_identity(pair.candidate, world) - extract_identity(pair.reference, world)
    return [RATIONALE_OFFSET + rationale_symbol(float(v)) for v in diff] + [END_TOKEN]


def split_benchmark(instances: Sequence[RankingInstance], holdout: int,
                    stream: RngStream) -> Tuple[List[RankingInstance], List[RankingInstance]]:
    """Seeded split without replacement; both parts keep the input order"""
    if not 0 <= holdout < len(instances):
        raise ValueError(f"holdout {holdout} must be below the instance count {len(instances)}")
    chosen = set(int(i) for i in permutation(stream, len(instances))[:holdout])
    train = [inst for i, inst in enumerate(instances) if i not in chosen]
    benchmark = [inst for i, inst in enumerate(instances) if i in chosen]
    return train, benchmark


def inject_consistent_pairs(grids: Sequence[Grid], count: int, stream: RngStream,
                            start_id: int = 0) -> List[LabeledPair]:
    """Externally verified consistent pairs: two cells of the same grid"""
    pairs = []
    if count == 0 or not grids:
        return pairs
    picks = integers(stream, len(grids), count)
    for i, g in enumerate(picks):
        grid = grids[g]
        cells = permutation(stream, len(grid.subfigures))[:2]
        a, b = int(cells[0]), int(cells[1])
        pairs.append(LabeledPair(
            pair_id=start_id + i,
            instance_id=None,
            reference=grid.subfigures[a],
            reference_ref=CellRef(grid.prompt_id, grid.grid_id, a),
            candidate=grid.subfigures[b],
            candidate_ref=CellRef(grid.prompt_id, grid.grid_id, b),
            label=PairLabel.CONSISTENT,
            source=PairSource.INJECTED,
        ))
    return pairs


# ============================================================================
# PIPELINE
# ============================================================================

def build_dataset(config: DatasetConfig, stream: RngStream, world: WorldConstants = DEFAULT_WORLD,
                  progress: bool = False) -> Dataset:
    prompts = sample_prompts(config.prompts, config.set_size, stream.child(0), world)
    grids = build_grids(prompts, config.grids_per_prompt, config.rows, config.cols, config.noise_scale,
                        stream.child(1), config.identity_jitter, config.cell_drift, config.resolution,
                        world, progress)

    instances: List[RankingInstance] = []
    by_prompt: Dict[int, List[Grid]] = {}
    for g in grids:
        by_prompt.setdefault(g.prompt_id, []).append(g)
    for prompt_id in sorted(by_prompt):
        instances.extend(subfigure_pairing(by_prompt[prompt_id], start_id=len(instances)))
    instances = [oracle_annotate(inst, world) for inst in tqdm(instances, desc="annotate", disable=not progress)]

    train, benchmark = split_benchmark(instances, config.holdout, stream.child(2))

    pairs: List[LabeledPair] = []
    for inst in train:
        pairs.extend(ranking_to_pairs(inst, config.pair_policy, start_id=len(pairs)))
    pairs.extend(inject_consistent_pairs(grids, config.injected_pairs, stream.child(3), start_id=len(pairs)))
    if config.rationale:
        for pair in pairs:
            pair.rationale = synth_rationale(pair, world)

    dataset = Dataset(prompts, grids, instances, train, benchmark, pairs, seed=stream.seed)
    dataset.counts = count_summary(dataset, config)
    logger.info("dataset built: %s", dataset.counts)
    return dataset


def count_summary(dataset: Dataset, config: DatasetConfig) -> Dict[str, int]:
    consistent = sum(1 for p in dataset.pairs if p.label == PairLabel.CONSISTENT)
    return {
        "prompts": len(dataset.prompts),
        "grid_images": len(dataset.grids),
        "subfigures": sum(len(g.subfigures) for g in dataset.grids),
        "instances": len(dataset.instances),
        "expected_instances": expected_instance_count(config.prompts, config.grids_per_prompt,
                                                      config.rows, config.cols),
        "train_instances": len(dataset.train),
        "benchmark_instances": len(dataset.benchmark),
        "pairs": len(dataset.pairs),
        "consistent_pairs": consistent,
        "inconsistent_pairs": len(dataset.pairs) - consistent,
        "injected_pairs": sum(1 for p in dataset.pairs if p.source == PairSource.INJECTED),
    }


# ============================================================================
# PERSISTENCE
# ============================================================================

def write_dataset(dataset: Dataset, directory: Union[str, Path]) -> Dict[str, Path]:
    directory = Path(directory)
    files = {
        "prompts": directory / "prompts.jsonl",
        "grids": directory / "grids.jsonl",
        "instances": directory / "instances.jsonl",
        "benchmark": directory / "benchmark.jsonl",
        "pairs": directory / "pairs.jsonl",
        "split": directory / "split.json",
        "counts": directory / "counts.json",
    }
    write_jsonl(files["prompts"], ({"prompt_id": i, **p.to_json()} for i, p in enumerate(dataset.prompts)))
    write_jsonl(files["grids"], (g.to_json() for g in dataset.grids))
    write_jsonl(files["instances"], (i.to_json() for i in dataset.instances))
    write_jsonl(files["benchmark"], (i.to_json() for i in dataset.benchmark))
    write_jsonl(files["pairs"], (p.to_json() for p in dataset.pairs))
    write_json(files["split"], {
        "seed": dataset.seed,
        "train": [i.instance_id for i in dataset.train],
        "benchmark": [i.instance_id for i in dataset.benchmark],
    })
    write_json(files["counts"], dataset.counts)
    return files


def load_grids(path: Union[str, Path]) -> Dict[int, Grid]:
    grids: Dict[int, Grid] = {}
    for line, record in iter_jsonl_numbered(path):
        try:
            grid = Grid.from_json(record)
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"bad grid record ({e})", path=str(path), line=line) from None
        grids[grid.grid_id] = grid
    return grids


def _resolve(grids: Dict[int, Grid], ref: CellRef) -> Signal:
    grid = grids.get(ref.grid_id)
    if grid is None or grid.prompt_id != ref.prompt_id or not 0 <= ref.cell < len(grid.subfigures):
        raise KeyError(f"unresolvable subfigure {ref}")
    return grid.subfigures[ref.cell]


def load_instances(path: Union[str, Path], grids: Dict[int, Grid]) -> List[RankingInstance]:
    instances = []
    for number, record in iter_jsonl_numbered(path):
        try:
            ref = CellRef.from_json(record["reference"])
            cand_refs = [CellRef.from_json(c) for c in record["candidates"]]
            instances.append(RankingInstance(
                instance_id=int(record["instance_id"]),
                reference=_resolve(grids, ref),
                reference_ref=ref,
                candidates=[_resolve(grids, r) for r in cand_refs],
                candidate_refs=cand_refs,
                annotation=record.get("annotation"),
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"bad instance record ({e})", path=str(path), line=number) from None
    return instances


def load_pairs(path: Union[str, Path], grids: Dict[int, Grid]) -> List[LabeledPair]:
    pairs = []
    for number, record in iter_jsonl_numbered(path):
        try:
            ref = CellRef.from_json(record["reference"])
            cand = CellRef.from_json(record["candidate"])
            pairs.append(LabeledPair(
                pair_id=int(record["pair_id"]),
                instance_id=record.get("instance_id"),
                reference=_resolve(grids, ref),
                reference_ref=ref,
                candidate=_resolve(grids, cand),
                candidate_ref=cand,
                label=PairLabel(record["label"]),
                source=PairSource(record.get("source", "ranking")),
                rationale=[int(t) for t in record.get("rationale", [])],
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"bad pair record ({e})", path=str(path), line=number) from None
    return pairs

