"""Helpers for running the CLI in-process and comparing run directories."""
import hashlib
from pathlib import Path

from roadlab.cli import main

TINY_TRAIN = ["--set", "train.max_epochs=2", "--set", "train.patience=1", "--set", "train.batch_size=16",
              "--set", "train.max_steps=3"]
TINY_STUDY = ["--tracks", "2", "--length", "100", "--set", "study.collect_tracks=2",
              "--set", "study.collect_length=120", "--set", "study.max_epochs=2", "--set", "study.patience=1",
              "--set", "study.n_perm=1000"]


def run(*argv) -> int:
    return main([str(a) for a in argv])


def tree_digest(root) -> dict:
    """Relative path -> sha256 of every file below ``root``."""
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


RESULTS = []  # (criterion, passed, detail), printed at the end of the session


def record(criterion: str, passed: bool, detail: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}"
    RESULTS.append(line)
    print(line)
    return passed
