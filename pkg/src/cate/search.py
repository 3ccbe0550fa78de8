"""Search subroutines over a query-budgeted accuracy oracle.

Every algorithm records one trajectory entry per distinct cell it queries.
Cells are identified by canonical hash, so an algorithm never spends budget
on a cell (or an isomorphic copy) it has already seen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .benchmark import BenchmarkOracle
from .encodings import latent_neighbors
from .predictors import DngoModel, MlpPredictor, expected_improvement
from .space import CellError, CellGraph, SpaceSpec, canonical_hash, mutate_cell, neighbors, random_cell

log = logging.getLogger(__name__)

RANDOM = "random"
REA = "rea"
LOCAL = "local"
LOCAL_LATENT = "local-latent"
DNGO = "dngo"
MLP = "mlp"
CATE_DNGO_LS = "cate-dngo-ls"
ALGORITHMS = (RANDOM, REA, LOCAL, LOCAL_LATENT, DNGO, MLP, CATE_DNGO_LS)

MAX_RETRIES = 1000


@dataclass
class TrajectoryEntry:
    query_index: int
    cell_hash: str
    accuracy: float
    best_so_far: float


@dataclass
class SearchTrajectory:
    seed: int
    algorithm: str
    budget: int
    entries: list[TrajectoryEntry] = field(default_factory=list)
    early_stop: bool = False
    notes: list[str] = field(default_factory=list)
    iterations: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def best(self) -> float:
        return self.entries[-1].best_so_far if self.entries else float("nan")

    @property
    def best_curve(self) -> np.ndarray:
        return np.array([e.best_so_far for e in self.entries])

    def records(self) -> list[dict]:
        return [{"seed": self.seed, "algorithm": self.algorithm, "query_index": e.query_index,
                 "cell_hash": e.cell_hash, "accuracy": e.accuracy, "best_so_far": e.best_so_far}
                for e in self.entries]


class _BudgetReached(Exception):
    pass


class _Run:
    """Per-run bookkeeping: visited hashes, budget and the trajectory."""

    def __init__(self, oracle: BenchmarkOracle, budget: int, seed: int, algorithm: str):
        if budget < 1:
            raise ValueError(f"budget must be >= 1, got {budget}")
        self.oracle = oracle
        self.traj = SearchTrajectory(seed, algorithm, budget)
        self.visited: dict[str, float] = {}

    @property
    def remaining(self) -> int:
        return self.traj.budget - len(self.traj.entries)

    def seen(self, cell: CellGraph) -> bool:
        return canonical_hash(cell) in self.visited

    def query(self, cell: CellGraph) -> float:
        h = canonical_hash(cell)
        if h in self.visited:
            return self.visited[h]
        if self.remaining <= 0:
            raise _BudgetReached
        acc = self.oracle.query(cell)
        self.visited[h] = acc
        best = max(acc, self.traj.entries[-1].best_so_far) if self.traj.entries else acc
        self.traj.entries.append(TrajectoryEntry(len(self.traj.entries), h, acc, best))
        return acc

    def stop(self, reason: str) -> None:
        self.traj.early_stop = True
        self.traj.notes.append(reason)


def _fresh_random(run: _Run, spec: SpaceSpec, rng: np.random.Generator) -> CellGraph | None:
    for _ in range(MAX_RETRIES):
        c = random_cell(spec, rng)
        if not run.seen(c):
            return c
    return None


@dataclass
class CandidateUniverse:
    """A fixed set of distinct cells with precomputed encodings."""

    cells: list[CellGraph]
    encodings: np.ndarray | None = None
    hashes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.hashes:
            self.hashes = [canonical_hash(c) for c in self.cells]
        if len(set(self.hashes)) != len(self.hashes):
            raise CellError("candidate universe contains isomorphic duplicates")
        if self.encodings is not None:
            self.encodings = np.asarray(self.encodings, dtype=np.float64)
            if len(self.encodings) != len(self.cells):
                raise ValueError(f"{len(self.encodings)} encodings for {len(self.cells)} cells")
        self.position = {h: i for i, h in enumerate(self.hashes)}

    def __len__(self) -> int:
        return len(self.cells)

    def require_encodings(self, what: str) -> np.ndarray:
        if self.encodings is None:
            raise CellError(f"{what} needs precomputed encodings for the candidate universe")
        return self.encodings


# ------------------------------------------------------------------ baselines


def random_search(oracle: BenchmarkOracle, spec: SpaceSpec, budget: int, seed: int = 0,
                  universe: CandidateUniverse | None = None) -> SearchTrajectory:
    """Query ``budget`` distinct random cells, from the space or from ``universe``."""
    run = _Run(oracle, budget, seed, RANDOM)
    rng = np.random.default_rng([seed, 1])
    try:
        if universe is not None:
            for i in rng.permutation(len(universe))[:budget]:
                run.query(universe.cells[i])
            if run.remaining > 0:
                run.stop("candidate universe exhausted")
            return run.traj
        while run.remaining > 0:
            c = _fresh_random(run, spec, rng)
            if c is None:
                run.stop(f"no new distinct cell in {MAX_RETRIES} draws")
                break
            run.query(c)
    except _BudgetReached:
        pass
    return run.traj


def regularized_evolution(oracle: BenchmarkOracle, spec: SpaceSpec, budget: int, population: int = 20,
                          tournament: int = 5, seed: int = 0,
                          mutate: Callable[[CellGraph, np.random.Generator], CellGraph] | None = None
                          ) -> SearchTrajectory:
    """Aging evolution: the oldest member dies each step, not the worst."""
    if population > budget:
        raise ValueError(f"population {population} exceeds budget {budget}")
    if not 1 <= tournament <= population:
        raise ValueError(f"tournament size {tournament} not in [1, {population}]")
    mutate = mutate or (lambda cell, rng: mutate_cell(cell, spec, rng))
    run = _Run(oracle, budget, seed, REA)
    rng = np.random.default_rng([seed, 2])
    pop: list[tuple[CellGraph, float]] = []
    try:
        while len(pop) < population:
            c = _fresh_random(run, spec, rng)
            if c is None:
                run.stop(f"no new distinct cell in {MAX_RETRIES} draws")
                return run.traj
            pop.append((c, run.query(c)))
        while run.remaining > 0:
            child = None
            for _ in range(MAX_RETRIES):
                picks = rng.choice(len(pop), size=tournament, replace=False)
                parent = max((pop[i] for i in picks), key=lambda m: m[1])[0]
                cand = mutate(parent, rng)
                if not run.seen(cand):
                    child = cand
                    break
            if child is None:
                run.stop(f"no unvisited child in {MAX_RETRIES} mutations")
                break
            pop.append((child, run.query(child)))
            pop.pop(0)
    except _BudgetReached:
        pass
    return run.traj


def local_search(oracle: BenchmarkOracle, spec: SpaceSpec, budget: int, seed: int = 0,
                 neighbor_source: str = "edit", universe: CandidateUniverse | None = None,
                 k: int = 10) -> SearchTrajectory:
    """First-improvement hill climbing with random restarts.

    ``edit``: neighbors are all valid single-edit cells, tried in random
    order; the walk moves to the first one that beats the current cell.
    ``latent``: neighbors are the ``k`` nearest unvisited universe cells in
    encoding space; all are queried and the walk moves to the best if it
    improves. Either way an exhausted neighborhood triggers a restart.
    """
    if neighbor_source not in ("edit", "latent"):
        raise ValueError(f"neighbor_source must be 'edit' or 'latent', got {neighbor_source!r}")
    latent = neighbor_source == "latent"
    if latent:
        if universe is None:
            raise CellError("latent local search needs a candidate universe with encodings")
        enc = universe.require_encodings("latent local search")
    run = _Run(oracle, budget, seed, LOCAL_LATENT if latent else LOCAL)
    rng = np.random.default_rng([seed, 3])

    def restart() -> tuple[CellGraph, float] | None:
        if latent:
            free = [i for i, h in enumerate(universe.hashes) if h not in run.visited]
            if not free:
                return None
            c = universe.cells[free[int(rng.integers(len(free)))]]
        else:
            c = _fresh_random(run, spec, rng)
            if c is None:
                return None
        return c, run.query(c)

    try:
        state = restart()
        while state is not None and run.remaining > 0:
            cur, cur_acc = state
            moved = False
            if latent:
                here = universe.position[canonical_hash(cur)]
                exclude = [universe.position[h] for h in run.visited if h in universe.position]
                nbrs = latent_neighbors(enc[here], enc, k, exclude).indices
                scored = [(run.query(universe.cells[i]), i) for i in nbrs]
                if scored:
                    acc, i = max(scored, key=lambda t: t[0])
                    if acc > cur_acc:
                        state, moved = (universe.cells[i], acc), True
            else:
                cands = neighbors(cur, spec)
                for j in rng.permutation(len(cands)):
                    c = cands[j]
                    if run.seen(c):
                        continue
                    acc = run.query(c)
                    if acc > cur_acc:
                        state, moved = (c, acc), True
                        break
            if not moved:
                state = restart()
        if state is None and run.remaining > 0:
            run.stop("no unvisited restart cell")
    except _BudgetReached:
        pass
    return run.traj


# ------------------------------------------------------- predictor-guided


def _make_predictor(kind: str, epochs: int, seed: int):
    if kind == DNGO:
        return DngoModel(epochs=epochs, seed=seed)
    if kind == MLP:
        return MlpPredictor(epochs=epochs, seed=seed)
    raise ValueError(f"unknown predictor {kind!r}")


def _initial_pool(run: _Run, universe: CandidateUniverse, size: int, rng) -> list[int]:
    pool = []
    for i in rng.permutation(len(universe))[:size]:
        run.query(universe.cells[i])
        pool.append(int(i))
    return pool


def predictor_search(oracle: BenchmarkOracle, universe: CandidateUniverse, budget: int, seed: int = 0,
                     predictor: str = DNGO, init: int = 10, top_k: int = 5, epochs: int = 100,
                     algorithm: str | None = None) -> SearchTrajectory:
    """Predictor-guided search over a candidate universe.

    DNGO ranks unvisited candidates by expected improvement over the pool
    best; the MLP predictor ranks by predicted mean.
    """
    enc = universe.require_encodings("predictor search")
    if budget < init:
        raise ValueError(f"budget {budget} smaller than initial pool {init}")
    run = _Run(oracle, budget, seed, algorithm or predictor)
    rng = np.random.default_rng([seed, 4])
    try:
        pool = _initial_pool(run, universe, init, rng)
        it = 0
        while run.remaining > 0:
            free = np.array([i for i, h in enumerate(universe.hashes) if h not in run.visited])
            if free.size == 0:
                run.stop("candidate universe exhausted")
                break
            y = np.array([run.visited[universe.hashes[i]] for i in pool])
            model = _make_predictor(predictor, epochs, seed * 1000 + it).fit(enc[pool], y)
            mean, var = model.predict(enc[free])
            score = expected_improvement(mean, var, y.max()) if predictor == DNGO else mean
            order = free[np.argsort(-score, kind="stable")][:min(top_k, run.remaining)]
            for i in order:
                run.query(universe.cells[i])
                pool.append(int(i))
            it += 1
    except _BudgetReached:
        pass
    return run.traj


def cate_dngo_ls(oracle: BenchmarkOracle, universe: CandidateUniverse, budget: int, seed: int = 0,
                 init: int = 10, top_k: int = 5, epochs: int = 100) -> SearchTrajectory:
    """DNGO top-k selection interleaved with latent nearest-neighbor moves.

    Each iteration queries the ``top_k`` unvisited candidates by predicted
    mean, then finds the true top-k of the pool. If M of the new cells made
    it in, each of the remaining top_k - M incumbents contributes its
    nearest unvisited latent neighbor, so a round adds top_k to 2 * top_k
    cells. Neighbors already pooled, or claimed earlier in the same round,
    are skipped in favor of the next-nearest and the skip is logged.
    """
    enc = universe.require_encodings("CATE-DNGO-LS")
    if budget < init:
        raise ValueError(f"budget {budget} smaller than initial pool {init}")
    if init < top_k:
        raise ValueError(f"initial pool {init} smaller than top_k {top_k}")
    run = _Run(oracle, budget, seed, CATE_DNGO_LS)
    rng = np.random.default_rng([seed, 5])
    pool: list[int] = []
    it = 0

    def acc_of(i: int) -> float:
        return run.visited[universe.hashes[i]]

    try:
        pool = _initial_pool(run, universe, init, rng)
        while run.remaining > 0:
            free = np.array([i for i, h in enumerate(universe.hashes) if h not in run.visited])
            if free.size == 0:
                run.stop("candidate universe exhausted")
                break
            before = len(pool)
            record = {"iteration": it, "pool_before": before, "skipped_neighbors": 0}
            run.traj.iterations.append(record)
            y = np.array([acc_of(i) for i in pool])
            mean, _ = DngoModel(epochs=epochs, seed=seed * 1000 + it).fit(enc[pool], y).predict(enc[free])
            new = [int(i) for i in free[np.argsort(-mean, kind="stable")][:top_k]]
            for i in new:
                run.query(universe.cells[i])
                pool.append(i)
            # stable ranking: ties resolved by pool order
            ranked = sorted(range(len(pool)), key=lambda p: -acc_of(pool[p]))[:top_k]
            top = [pool[p] for p in ranked]
            m = sum(i in new for i in top)
            record["m"] = m
            for i in (t for t in top if t not in new):
                if run.remaining <= 0:
                    record["truncated"] = True
                    break
                exclude = [universe.position[h] for h in run.visited if h in universe.position]
                nb = latent_neighbors(enc[i], enc, 1, exclude)
                full = latent_neighbors(enc[i], enc, 1, [i]).indices
                if len(full) and (not len(nb.indices) or full[0] != nb.indices[0]):
                    record["skipped_neighbors"] += 1
                    log.debug("nearest neighbor of %s already pooled, taking next-nearest", universe.hashes[i][:12])
                if nb.short:
                    break
                run.query(universe.cells[nb.indices[0]])
                pool.append(int(nb.indices[0]))
            record["added"] = len(pool) - before
            record.setdefault("truncated", False)
            it += 1
    except _BudgetReached:
        if run.traj.iterations:
            rec = run.traj.iterations[-1]
            rec["added"] = len(pool) - rec["pool_before"]
            rec["truncated"] = True
            rec.setdefault("m", None)
    return run.traj


# ----------------------------------------------------------------- dispatch


def run_search(algorithm: str, oracle: BenchmarkOracle, spec: SpaceSpec, budget: int, seed: int,
               universe: CandidateUniverse | None = None, **kwargs) -> SearchTrajectory:
    if algorithm == RANDOM:
        return random_search(oracle, spec, budget, seed, universe)
    if algorithm == REA:
        return regularized_evolution(oracle, spec, budget, seed=seed, **kwargs)
    if algorithm == LOCAL:
        return local_search(oracle, spec, budget, seed)
    if algorithm == LOCAL_LATENT:
        return local_search(oracle, spec, budget, seed, "latent", universe, **kwargs)
    if algorithm in (DNGO, MLP):
        if universe is None:
            raise CellError(f"{algorithm} search needs a candidate universe")
        return predictor_search(oracle, universe, budget, seed, predictor=algorithm, **kwargs)
    if algorithm == CATE_DNGO_LS:
        if universe is None:
            raise CellError("CATE-DNGO-LS needs a candidate universe")
        return cate_dngo_ls(oracle, universe, budget, seed, **kwargs)
    raise ValueError(f"unknown algorithm {algorithm!r}; known: {ALGORITHMS}")
