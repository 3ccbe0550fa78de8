"""Trajectory files and their aggregation into summary tables and curves."""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .search import SearchTrajectory, TrajectoryEntry

FIELDS = ("seed", "algorithm", "query_index", "cell_hash", "accuracy", "best_so_far")


class RaggedBudgetError(ValueError):
    pass


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_trajectory(traj: SearchTrajectory, path) -> Path:
    """Trajectory lines plus a ``.meta.json`` sidecar (budget, early stop, iteration log)."""
    path = Path(path)
    lines = "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in traj.records())
    meta = {"seed": traj.seed, "algorithm": traj.algorithm, "budget": traj.budget,
            "length": len(traj), "early_stop": traj.early_stop, "notes": traj.notes,
            "iterations": traj.iterations}
    _atomic_write(meta_path(path), json.dumps(meta, sort_keys=True, indent=1) + "\n")
    _atomic_write(path, lines)
    return path


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def read_trajectories(path) -> list[SearchTrajectory]:
    """All trajectories in one file (several seeds/algorithms may share a file)."""
    path = Path(path)
    meta = {}
    if meta_path(path).exists():
        meta = json.loads(meta_path(path).read_text())
    runs: dict[tuple, SearchTrajectory] = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = [f for f in FIELDS if f not in rec]
            if missing:
                raise ValueError(f"{path}:{n}: missing fields {missing}")
            key = (rec["seed"], rec["algorithm"])
            if key not in runs:
                runs[key] = SearchTrajectory(rec["seed"], rec["algorithm"], meta.get("budget", 0))
            runs[key].entries.append(TrajectoryEntry(rec["query_index"], rec["cell_hash"], rec["accuracy"],
                                                     rec["best_so_far"]))
    for t in runs.values():
        if not meta:
            t.budget = len(t.entries)
        t.early_stop = bool(meta.get("early_stop", False))
    return list(runs.values())


@dataclass
class AlgorithmSummary:
    algorithm: str
    runs: int
    budget: int
    mean: float
    median: float
    std: float
    min: float
    max: float

    def record(self) -> dict:
        return {"algorithm": self.algorithm, "runs": self.runs, "budget": self.budget, "final_best_mean": self.mean,
                "final_best_median": self.median, "final_best_std": self.std, "final_best_min": self.min,
                "final_best_max": self.max}


def summarize(trajectories: Sequence[SearchTrajectory], allow_ragged: bool = False
              ) -> tuple[list[AlgorithmSummary], list[dict]]:
    """Per-algorithm statistics of the final best and the per-query best-so-far curve."""
    if not trajectories:
        raise ValueError("no trajectories to summarize")
    budgets = {t.budget for t in trajectories}
    if len(budgets) > 1 and not allow_ragged:
        raise RaggedBudgetError(f"trajectories have mixed budgets {sorted(budgets)}; pass --allow-ragged")
    groups: dict[str, list[SearchTrajectory]] = defaultdict(list)
    for t in trajectories:
        groups[t.algorithm].append(t)
    summaries, curve = [], []
    for alg in sorted(groups):
        runs = [t for t in groups[alg] if t.entries]
        finals = np.array([t.best for t in runs])
        summaries.append(AlgorithmSummary(alg, len(runs), max(t.budget for t in groups[alg]),
                                          float(finals.mean()), float(np.median(finals)), float(finals.std()),
                                          float(finals.min()), float(finals.max())))
        longest = max(len(t) for t in runs)
        for q in range(longest):
            vals = np.array([t.entries[q].best_so_far for t in runs if len(t) > q])
            curve.append({"algorithm": alg, "query_index": q, "runs": int(vals.size), "mean": float(vals.mean()),
                          "median": float(np.median(vals)), "std": float(vals.std())})
    return summaries, curve


def format_table(summaries: Iterable[AlgorithmSummary]) -> str:
    head = f"{'algorithm':<32}{'runs':>6}{'budget':>8}{'mean':>10}{'median':>10}{'std':>10}{'err% mean':>11}"
    rows = [head, "-" * len(head)]
    for s in summaries:
        rows.append(f"{s.algorithm:<32}{s.runs:>6d}{s.budget:>8d}{s.mean:>10.5f}{s.median:>10.5f}"
                    f"{s.std:>10.5f}{100 * (1 - s.mean):>11.3f}")
    return "\n".join(rows) + "\n"


def emit_report(paths: Sequence, out_dir, allow_ragged: bool = False) -> list[AlgorithmSummary]:
    """Write summary.jsonl, curve.jsonl and table.txt under ``out_dir``."""
    if not paths:
        raise ValueError("no trajectory files given")
    trajs = [t for p in paths for t in read_trajectories(p)]
    summaries, curve = summarize(trajs, allow_ragged)
    out_dir = Path(out_dir)
    _atomic_write(out_dir / "summary.jsonl", "".join(json.dumps(s.record()) + "\n" for s in summaries))
    _atomic_write(out_dir / "curve.jsonl", "".join(json.dumps(c) + "\n" for c in curve))
    _atomic_write(out_dir / "table.txt", format_table(summaries))
    return summaries
