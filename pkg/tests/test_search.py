from __future__ import annotations

import itertools

import numpy as np
import pytest

from cate.benchmark import BenchmarkOracle, synthetic_benchmark
from cate.encodings import ADJACENCY_ONEHOT, encode_many
from cate.search import (CATE_DNGO_LS, DNGO, MLP, CandidateUniverse, cate_dngo_ls, local_search,
                         predictor_search, random_search, regularized_evolution, run_search)
from cate.space import NB101_SPACE, CellError, CellGraph, canonical_hash, is_valid, sample_distinct_cells

from .conftest import CONV1, CONV3, POOL

SPACE4 = NB101_SPACE.with_nodes(4, 4)


@pytest.fixture(scope="module")
def universe() -> CandidateUniverse:
    cells = sample_distinct_cells(NB101_SPACE, 400, seed=3)
    return CandidateUniverse(cells, encode_many(ADJACENCY_ONEHOT, cells, NB101_SPACE))


def check_trajectory(traj, budget):
    assert len(traj) <= budget
    curve = traj.best_curve
    assert np.all(np.diff(curve) >= 0)
    hashes = [e.cell_hash for e in traj.entries]
    assert len(set(hashes)) == len(hashes)
    assert [e.query_index for e in traj.entries] == list(range(len(traj)))
    assert np.allclose(curve, np.maximum.accumulate([e.accuracy for e in traj.entries]))


# ------------------------------------------------------------------ random


def test_random_search_budget_and_seeds():
    a = random_search(synthetic_benchmark(NB101_SPACE), NB101_SPACE, 150, seed=0)
    b = random_search(synthetic_benchmark(NB101_SPACE), NB101_SPACE, 150, seed=1)
    check_trajectory(a, 150)
    assert len(a) == 150
    assert [e.cell_hash for e in a.entries] != [e.cell_hash for e in b.entries]


def test_random_search_universe_exhaustion(universe):
    small = CandidateUniverse(universe.cells[:20])
    t = random_search(synthetic_benchmark(NB101_SPACE), NB101_SPACE, 50, seed=0, universe=small)
    assert len(t) == 20 and t.early_stop


def test_oracle_counter_matches_trajectory():
    o = synthetic_benchmark(NB101_SPACE)
    t = random_search(o, NB101_SPACE, 40, seed=2)
    assert o.num_queries == len(t) == 40


# --------------------------------------------------------------------- REA


def test_rea_queries_full_budget():
    t = regularized_evolution(synthetic_benchmark(NB101_SPACE), NB101_SPACE, 150, 20, 5, seed=0)
    check_trajectory(t, 150)
    assert len(t) == 150 and not t.early_stop


def test_rea_identity_mutation_only_initial_population():
    t = regularized_evolution(synthetic_benchmark(NB101_SPACE), NB101_SPACE, 150, 20, 5, seed=0,
                              mutate=lambda cell, rng: cell)
    assert len(t) == 20 and t.early_stop


def test_rea_argument_checks():
    with pytest.raises(ValueError):
        regularized_evolution(synthetic_benchmark(NB101_SPACE), NB101_SPACE, 10, population=20)
    with pytest.raises(ValueError):
        regularized_evolution(synthetic_benchmark(NB101_SPACE), NB101_SPACE, 100, population=20, tournament=30)


# ------------------------------------------------------------ local search


def _target_distance_fn():
    target = CellGraph.from_edges(["input", CONV3, POOL, "output"], [(0, 1), (1, 2), (2, 3), (0, 3)])

    def dist(c: CellGraph) -> int:
        best = None
        for perm in itertools.permutations(range(1, c.n - 1)):
            p = c.permuted((0, *perm, c.n - 1))
            d = sum(a != b for a, b in zip(p.ops, target.ops)) + int(np.abs(
                p.adjacency.astype(int) - target.adjacency).sum())
            best = d if best is None else min(best, d)
        return best

    return target, dist


def test_local_search_single_basin_reaches_optimum():
    target, dist = _target_distance_fn()
    for seed in range(25):
        o = BenchmarkOracle(lambda c: 1.0 - 0.05 * dist(c))
        t = local_search(o, SPACE4, 60, seed=seed)
        check_trajectory(t, 60)
        assert t.best == 1.0, seed


def test_local_search_edit_full_budget_on_synthetic():
    t = local_search(synthetic_benchmark(NB101_SPACE), NB101_SPACE, 150, seed=4)
    check_trajectory(t, 150)
    assert len(t) == 150


def test_local_search_exhausts_tiny_space():
    tiny = NB101_SPACE.with_nodes(3, 3)
    t = local_search(synthetic_benchmark(tiny), tiny, 50, seed=0)
    assert len(t) == 6 and t.early_stop  # 3 ops x {with, without} the input-output edge


def test_latent_local_search_requires_encodings(universe):
    with pytest.raises(CellError):
        local_search(synthetic_benchmark(NB101_SPACE), NB101_SPACE, 20, neighbor_source="latent")
    with pytest.raises(CellError, match="encodings"):
        local_search(synthetic_benchmark(NB101_SPACE), NB101_SPACE, 20, neighbor_source="latent",
                     universe=CandidateUniverse(universe.cells[:30]))


def test_latent_local_search_runs(universe):
    t = local_search(synthetic_benchmark(NB101_SPACE), NB101_SPACE, 60, seed=1, neighbor_source="latent",
                     universe=universe, k=5)
    check_trajectory(t, 60)
    assert len(t) == 60
    assert all(e.cell_hash in universe.position for e in t.entries)


# -------------------------------------------------------------- predictors


@pytest.mark.parametrize("kind", [DNGO, MLP])
def test_predictor_search_budget(universe, kind):
    t = predictor_search(synthetic_benchmark(NB101_SPACE), universe, 30, seed=0, predictor=kind, epochs=10)
    check_trajectory(t, 30)
    assert len(t) == 30 and t.algorithm == kind


def test_predictor_search_needs_encodings(universe):
    with pytest.raises(CellError):
        predictor_search(synthetic_benchmark(NB101_SPACE), CandidateUniverse(universe.cells[:30]), 20)


def test_universe_rejects_duplicates(diamond):
    with pytest.raises(CellError):
        CandidateUniverse([diamond, diamond.permuted((0, 2, 1, 3))])


# ------------------------------------------------------------ CATE-DNGO-LS


def _scripted_oracle(later_better: bool) -> BenchmarkOracle:
    """Accuracy set by query order: later queries always better, or the first ten always best."""
    counter = itertools.count()

    def acc(_cell):
        k = next(counter)
        if later_better:
            return 0.5 + 1e-3 * k
        return 0.99 - 1e-5 * k if k < 10 else 0.5 - 1e-5 * k

    return BenchmarkOracle(acc)


def test_cate_m5_adds_exactly_five(universe):
    t = cate_dngo_ls(_scripted_oracle(True), universe, 60, seed=0, epochs=5)
    full = [r for r in t.iterations if not r["truncated"]]
    assert full and all(r["m"] == 5 and r["added"] == 5 for r in full)


def test_cate_m0_adds_exactly_ten(universe):
    t = cate_dngo_ls(_scripted_oracle(False), universe, 150, seed=0, epochs=5)
    assert len(t) == 150
    full = [r for r in t.iterations if not r["truncated"]]
    assert len(full) == 14
    assert all(r["m"] == 0 and r["added"] == 10 for r in full)


def test_cate_budget_exact_with_truncation(universe):
    t = cate_dngo_ls(_scripted_oracle(False), universe, 145, seed=0, epochs=5)
    assert len(t) == 145
    assert t.iterations[-1]["truncated"] and t.iterations[-1]["added"] == 5
    assert all(5 <= r["added"] <= 10 for r in t.iterations[:-1])


def test_cate_pool_growth_contract_on_synthetic(universe):
    for seed in range(3):
        t = cate_dngo_ls(synthetic_benchmark(NB101_SPACE), universe, 80, seed=seed, epochs=10)
        check_trajectory(t, 80)
        assert len(t) == 80
        for r in t.iterations:
            assert r["truncated"] or 5 <= r["added"] <= 10
            assert r["pool_before"] + r["added"] <= 80


def test_cate_argument_checks(universe):
    with pytest.raises(ValueError):
        cate_dngo_ls(synthetic_benchmark(NB101_SPACE), universe, 5, init=10)
    with pytest.raises(ValueError):
        cate_dngo_ls(synthetic_benchmark(NB101_SPACE), universe, 50, init=3, top_k=5)
    with pytest.raises(CellError):
        cate_dngo_ls(synthetic_benchmark(NB101_SPACE), CandidateUniverse(universe.cells[:20]), 20)


def test_run_search_dispatch(universe):
    t = run_search(CATE_DNGO_LS, synthetic_benchmark(NB101_SPACE), NB101_SPACE, 20, 0, universe, epochs=5)
    assert t.algorithm == CATE_DNGO_LS and len(t) == 20
    with pytest.raises(CellError):
        run_search(DNGO, synthetic_benchmark(NB101_SPACE), NB101_SPACE, 20, 0)
    assert all(is_valid(universe.cells[universe.position[e.cell_hash]], NB101_SPACE) for e in t.entries)
    assert canonical_hash(universe.cells[0]) == universe.hashes[0]
