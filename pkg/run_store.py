#!/usr/bin/env python3
"""
run_store.py - Run Directory Manager for PaCo Lab

Owns the on-disk layout of one experiment run:

<out_dir>/
  ├── config.json          # Effective configuration
  ├── data/                # prompts, grids, instances, benchmark, pairs (JSONL) + split/counts
  ├── policy/              # pretrained policy checkpoint + pretraining log
  ├── scorer/              # pair scorer checkpoint + training log
  ├── eval/                # ranking metric report + per-instance rankings
  ├── grpo/                # epoch CSV, final policy, summary
  ├── ablations/           # comparison JSON + plot-data CSV per mode
  └── report.txt           # digest written by `report`

Every stage writes only inside its own subdirectory and refuses to
overwrite a non-empty one unless forced. All writers are deterministic:
sorted JSON keys, fixed CSV headers, no timestamps.

Version: 1.0.0
"""

import csv
import json
import logging
import shutil
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Sequence, Tuple, Union

from numcore import DataError, LabError

logger = logging.getLogger(__name__)

STAGES = ("data", "policy", "scorer", "eval", "grpo", "ablations")


class RunDirectoryError(LabError):
    """Refusal to write into an existing non-empty stage directory"""


# ============================================================================
# FILE FORMATS
# ============================================================================

def write_jsonl(path: Union[str, Path], records: Iterable[Dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
            count += 1
    return count


def iter_jsonl(path: Union[str, Path]) -> Iterator[Dict]:
    for _, record in iter_jsonl_numbered(path):
        yield record


def iter_jsonl_numbered(path: Union[str, Path]) -> Iterator[Tuple[int, Dict]]:
    """Yield (line number, record); malformed lines raise DataError citing path and line"""
    path = Path(path)
    if not path.exists():
        raise DataError("file not found", path=str(path))
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"malformed JSON ({e.msg})", path=str(path), line=number) from None
            if not isinstance(record, dict):
                raise DataError("record is not a JSON object", path=str(path), line=number)
            yield number, record


def read_jsonl(path: Union[str, Path]) -> List[Dict]:
    return list(iter_jsonl(path))


def write_json(path: Union[str, Path], data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2, allow_nan=False) + "\n")
    return path


def read_json(path: Union[str, Path]) -> Any:
    path = Path(path)
    if not path.exists():
        raise DataError("file not found", path=str(path))
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"malformed JSON ({e.msg})", path=str(path), line=e.lineno) from None


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"CSV row has {len(row)} fields, header has {len(header)}")
            writer.writerow(row)
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise DataError("file not found", path=str(path))
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ============================================================================
# RUN STORE
# ============================================================================

class RunStore:
    """
    Run directory manager

    Args:
        root: Output directory of the run (created on demand)
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def stage(self, name: str, force: bool = False) -> Path:
        """
        Prepare a stage directory for writing

        Args:
            name: One of STAGES
            force: Clear an existing non-empty directory instead of refusing

        Returns:
            Path to the (empty) stage directory
        """
        if name not in STAGES:
            raise ValueError(f"unknown stage '{name}' (stages: {', '.join(STAGES)})")
        path = self.root / name
        if path.exists() and any(path.iterdir()):
            if not force:
                raise RunDirectoryError(f"{path} is not empty (use --force to overwrite)")
            logger.info("clearing %s", path)
            shutil.rmtree(path)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def exists(self, *parts: str) -> bool:
        return self.path(*parts).exists()

    def summaries(self) -> Dict[str, Path]:
        """JSON summaries present in the run, keyed by stage/file stem"""
        found: Dict[str, Path] = {}
        if not self.root.exists():
            return found
        for stage in STAGES:
            stage_dir = self.root / stage
            if stage_dir.is_dir():
                for item in sorted(stage_dir.glob("*.json")):
                    found[f"{stage}/{item.stem}"] = item
        return found
