"""Cell DAGs: representation, validation, sampling, edits, hashing and batching."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

MASK = "[MASK]"
PAD = "[PAD]"

INPUT = "input"
OUTPUT = "output"
CONV3X3 = "conv3x3-bn-relu"
CONV1X1 = "conv1x1-bn-relu"
MAXPOOL3X3 = "maxpool3x3"


class CellError(ValueError):
    pass


@dataclass(frozen=True)
class OpVocab:
    """Ordered operation labels.

    Label order is ``inputs + ops + (output, MASK, PAD)``; indices into
    :attr:`labels` are the token ids fed to the encoder. ``costs`` maps an
    attribute kind to per-op cost per unit of fan-in.
    """

    inputs: tuple[str, ...]
    ops: tuple[str, ...]
    output: str
    costs: dict[str, dict[str, float]] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        labels = self.labels
        if len(set(labels)) != len(labels):
            raise ValueError(f"vocabulary labels are not unique: {labels}")

    @property
    def labels(self) -> tuple[str, ...]:
        return self.inputs + self.ops + (self.output, MASK, PAD)

    @property
    def real_labels(self) -> tuple[str, ...]:
        return self.inputs + self.ops + (self.output,)

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise CellError(f"label {label!r} not in vocabulary") from None

    @property
    def mask_id(self) -> int:
        return self.index(MASK)

    @property
    def pad_id(self) -> int:
        return self.index(PAD)

    @property
    def op_ids(self) -> np.ndarray:
        return np.array([self.index(o) for o in self.ops], dtype=np.int64)

    def is_structural(self, label: str) -> bool:
        return label in self.inputs or label == self.output

    def cost(self, label: str, kind: str) -> float:
        if kind not in self.costs:
            raise KeyError(f"unknown attribute kind {kind!r}; known: {sorted(self.costs)}")
        return float(self.costs[kind].get(label, 0.0))


# Per fan-in cost units: a 3x3 conv carries 9x the weights of a 1x1 conv; pooling has none.
NB101_VOCAB = OpVocab(
    inputs=(INPUT,),
    ops=(CONV3X3, CONV1X1, MAXPOOL3X3),
    output=OUTPUT,
    costs={
        "params": {CONV3X3: 9.0, CONV1X1: 1.0, MAXPOOL3X3: 0.0},
        "flops": {CONV3X3: 9.0, CONV1X1: 1.0, MAXPOOL3X3: 1.0},
    },
)


@dataclass(frozen=True)
class SpaceSpec:
    vocab: OpVocab = NB101_VOCAB
    max_nodes: int = 7
    max_edges: int = 9
    attribute: str = "params"
    min_nodes: int = 3
    edge_prob: float = 0.5

    def __post_init__(self):
        if self.max_nodes < 2:
            raise ValueError("max_nodes must be >= 2")
        if not (2 <= self.min_nodes <= self.max_nodes):
            raise ValueError(f"min_nodes must lie in [2, max_nodes], got {self.min_nodes}")

    @property
    def ops(self) -> tuple[str, ...]:
        return self.vocab.ops

    def with_nodes(self, min_nodes: int, max_nodes: int) -> "SpaceSpec":
        return SpaceSpec(self.vocab, max_nodes, self.max_edges, self.attribute, min_nodes, self.edge_prob)


NB101_SPACE = SpaceSpec()


class CellGraph:
    """Labeled DAG with a strictly upper-triangular adjacency matrix."""

    __slots__ = ("ops", "adjacency", "_hash")

    def __init__(self, ops: Sequence[str], adjacency):
        self.ops = tuple(ops)
        adj = np.array(adjacency, dtype=np.int8)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] != len(self.ops):
            raise CellError(f"adjacency shape {adj.shape} does not match {len(self.ops)} ops")
        adj.setflags(write=False)
        self.adjacency = adj
        self._hash: str | None = None

    @property
    def n(self) -> int:
        return len(self.ops)

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.sum())

    def __eq__(self, other) -> bool:
        return (isinstance(other, CellGraph) and self.ops == other.ops
                and np.array_equal(self.adjacency, other.adjacency))

    def __hash__(self) -> int:
        return hash((self.ops, self.adjacency.tobytes()))

    def __repr__(self) -> str:
        edges = [(int(i), int(j)) for i, j in zip(*np.nonzero(self.adjacency))]
        return f"CellGraph(ops={list(self.ops)}, edges={edges})"

    def predecessors(self, j: int) -> list[int]:
        return [int(i) for i in np.nonzero(self.adjacency[:, j])[0]]

    def successors(self, i: int) -> list[int]:
        return [int(j) for j in np.nonzero(self.adjacency[i])[0]]

    def in_degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=0).astype(np.int64)

    def out_degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=1).astype(np.int64)

    def with_op(self, node: int, label: str) -> "CellGraph":
        ops = list(self.ops)
        ops[node] = label
        return CellGraph(ops, self.adjacency)

    def with_edge_toggled(self, i: int, j: int) -> "CellGraph":
        adj = self.adjacency.copy()
        adj[i, j] ^= 1
        return CellGraph(self.ops, adj)

    def upper_bits(self) -> list[int]:
        iu = np.triu_indices(self.n, k=1)
        return [int(b) for b in self.adjacency[iu]]

    @classmethod
    def from_upper_bits(cls, ops: Sequence[str], bits: Sequence[int]) -> "CellGraph":
        n = len(ops)
        if len(bits) != n * (n - 1) // 2:
            raise CellError(f"{len(bits)} adjacency bits for {n} nodes (expected {n * (n - 1) // 2})")
        adj = np.zeros((n, n), dtype=np.int8)
        adj[np.triu_indices(n, k=1)] = bits
        return cls(ops, adj)

    @classmethod
    def from_edges(cls, ops: Sequence[str], edges: Iterable[tuple[int, int]]) -> "CellGraph":
        n = len(ops)
        adj = np.zeros((n, n), dtype=np.int8)
        for i, j in edges:
            adj[i, j] = 1
        return cls(ops, adj)

    def permuted(self, order: Sequence[int]) -> "CellGraph":
        """Relabel so that new node k is old node ``order[k]``."""
        order = np.asarray(order)
        return CellGraph([self.ops[i] for i in order], self.adjacency[np.ix_(order, order)])


# ---------------------------------------------------------------- validation


def validate_cell(cell: CellGraph, spec: SpaceSpec, allow_mask: bool = False) -> list[str]:
    """Every violated structural constraint, as readable strings (empty if valid)."""
    v = spec.vocab
    out: list[str] = []
    n = cell.n
    adj = cell.adjacency
    n_in = len(v.inputs)
    if n < n_in + 1:
        return [f"too few nodes: {n}"]
    if n > spec.max_nodes:
        out.append(f"node count {n} exceeds max_nodes {spec.max_nodes}")
    if not np.isin(adj, (0, 1)).all():
        out.append("adjacency is not binary")
    if np.tril(adj).any():
        out.append("adjacency is not strictly upper-triangular")
    for k, label in enumerate(v.inputs):
        if cell.ops[k] != label:
            out.append(f"node {k} must be {label!r}, got {cell.ops[k]!r}")
    if cell.ops[-1] != v.output:
        out.append(f"last node must be {v.output!r}, got {cell.ops[-1]!r}")
    legal = set(spec.ops) | ({MASK} if allow_mask else set())
    for k in range(n_in, n - 1):
        if cell.ops[k] not in legal:
            out.append(f"node {k} has illegal op {cell.ops[k]!r}")
    upper = np.triu(adj, k=1)
    for j in range(n_in, n):
        if not upper[:, j].any():
            out.append(f"node {j} has no predecessor")
    for i in range(n - 1):
        if not upper[i].any():
            out.append(f"node {i} has no successor")
    if cell.num_edges > spec.max_edges:
        out.append(f"edge count {cell.num_edges} exceeds max_edges {spec.max_edges}")
    return out


def is_valid(cell: CellGraph, spec: SpaceSpec) -> bool:
    return not validate_cell(cell, spec)


def require_valid(cell: CellGraph, spec: SpaceSpec) -> None:
    problems = validate_cell(cell, spec)
    if problems:
        raise CellError(f"invalid cell {cell!r}: " + "; ".join(problems))


# ------------------------------------------------------------------ sampling


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def repair_connectivity(adj: np.ndarray) -> np.ndarray:
    """Link predecessor-less nodes to node 0 and successor-less nodes to the last node."""
    adj = adj.copy()
    n = adj.shape[0]
    for j in range(1, n - 1):
        if not adj[:, j].any():
            adj[0, j] = 1
    for i in range(1, n - 1):
        if not adj[i].any():
            adj[i, n - 1] = 1
    if n >= 2 and not adj[:, n - 1].any():
        adj[0, n - 1] = 1
    return adj


def random_cell(spec: SpaceSpec, seed=None, max_attempts: int = 10_000) -> CellGraph:
    """Sample a valid cell.

    Procedure: node count uniform in [min_nodes, max_nodes]; each
    intermediate op uniform over ``spec.ops``; each upper-triangular edge
    independently with probability ``edge_prob``; orphans repaired by
    :func:`repair_connectivity`; the whole draw is rejected and repeated if
    the edge budget is exceeded.
    """
    if len(spec.vocab.inputs) != 1:
        raise CellError("random_cell supports single-input spaces only")
    rng = as_rng(seed)
    for _ in range(max_attempts):
        n = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
        mids = [spec.ops[int(k)] for k in rng.integers(len(spec.ops), size=n - 2)]
        adj = np.triu((rng.random((n, n)) < spec.edge_prob).astype(np.int8), k=1)
        adj = repair_connectivity(adj)
        if adj.sum() <= spec.max_edges:
            return CellGraph((spec.vocab.inputs[0], *mids, spec.vocab.output), adj)
    raise CellError(f"random_cell: no valid cell after {max_attempts} attempts")


def sample_distinct_cells(spec: SpaceSpec, count: int, seed=None, max_draws: int | None = None,
                          predicate=None) -> list[CellGraph]:
    """``count`` random cells with pairwise-distinct canonical hashes."""
    rng = as_rng(seed)
    seen: set[str] = set()
    cells: list[CellGraph] = []
    max_draws = max_draws or 50 * count + 1000
    for _ in range(max_draws):
        if len(cells) == count:
            break
        c = random_cell(spec, rng)
        if predicate is not None and not predicate(c):
            continue
        h = canonical_hash(c)
        if h not in seen:
            seen.add(h)
            cells.append(c)
    if len(cells) < count:
        raise CellError(f"only {len(cells)} distinct cells found after {max_draws} draws (wanted {count})")
    return cells


def neighbors(cell: CellGraph, spec: SpaceSpec, kind: str | None = None) -> list[CellGraph]:
    """All valid cells one edit away: one op relabel or one edge toggle."""
    out: list[CellGraph] = []
    n_in = len(spec.vocab.inputs)
    if kind in (None, "op"):
        for node in range(n_in, cell.n - 1):
            for label in spec.ops:
                if label != cell.ops[node]:
                    out.append(cell.with_op(node, label))
    if kind in (None, "edge"):
        for i in range(cell.n):
            for j in range(i + 1, cell.n):
                cand = cell.with_edge_toggled(i, j)
                if is_valid(cand, spec):
                    out.append(cand)
    return out


def mutate_cell(cell: CellGraph, spec: SpaceSpec, seed=None, kind: str | None = None) -> CellGraph:
    """A uniformly chosen valid single-edit neighbor of ``cell``."""
    require_valid(cell, spec)
    rng = as_rng(seed)
    cands = neighbors(cell, spec, kind)
    if not cands:
        raise CellError(f"no valid single-edit neighbor of {cell!r}")
    return cands[int(rng.integers(len(cands)))]


# ------------------------------------------------------------------- hashing


def _h(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def canonical_hash(cell: CellGraph) -> str:
    """Isomorphism-invariant digest by iterated neighborhood label hashing.

    Node labels start from (op, in-degree, out-degree) and are refined n
    times with the sorted labels of predecessors and successors.
    """
    if cell._hash is not None:
        return cell._hash
    n = cell.n
    ind, outd = cell.in_degree(), cell.out_degree()
    preds = [cell.predecessors(j) for j in range(n)]
    succs = [cell.successors(i) for i in range(n)]
    labels = [_h(f"{cell.ops[i]}|{ind[i]}|{outd[i]}") for i in range(n)]
    for _ in range(n):
        labels = [
            _h(labels[i] + "<" + ",".join(sorted(labels[p] for p in preds[i]))
               + ">" + ",".join(sorted(labels[s] for s in succs[i])))
            for i in range(n)
        ]
    digest = _h("|".join(sorted(labels)))
    cell._hash = digest
    return digest


def topological_orders(cell: CellGraph) -> Iterator[list[int]]:
    """Every node order that keeps the adjacency strictly upper-triangular."""
    n = cell.n
    preds = [set(cell.predecessors(j)) for j in range(n)]

    def rec(placed: list[int], placed_set: set[int]):
        if len(placed) == n:
            yield list(placed)
            return
        for v in range(n):
            if v not in placed_set and preds[v] <= placed_set:
                placed.append(v)
                placed_set.add(v)
                yield from rec(placed, placed_set)
                placed.pop()
                placed_set.discard(v)

    yield from rec([], set())


def random_topological_order(cell: CellGraph, seed=None) -> list[int]:
    rng = as_rng(seed)
    n = cell.n
    indeg = cell.in_degree().copy()
    ready = [v for v in range(n) if indeg[v] == 0]
    order: list[int] = []
    while ready:
        v = ready.pop(int(rng.integers(len(ready))))
        order.append(v)
        for s in cell.successors(v):
            indeg[s] -= 1
            if indeg[s] == 0:
                ready.append(s)
    return order


# ----------------------------------------------------------------- attribute


def compute_attribute(cell: CellGraph, vocab: OpVocab, kind: str = "params") -> float:
    """Sum over non-structural nodes of op cost times in-degree."""
    if kind not in vocab.costs:
        raise KeyError(f"unknown attribute kind {kind!r}; known: {sorted(vocab.costs)}")
    ind = cell.in_degree()
    total = 0.0
    for i, label in enumerate(cell.ops):
        if not vocab.is_structural(label):
            total += vocab.cost(label, kind) * int(ind[i])
    return total


def longest_path(cell: CellGraph) -> int:
    """Number of edges on the longest path from node 0 to the last node."""
    depth = np.full(cell.n, -10**9, dtype=np.int64)
    depth[0] = 0
    for j in range(1, cell.n):
        p = cell.predecessors(j)
        if p:
            depth[j] = max(depth[i] for i in p) + 1
    return int(depth[-1])


# ------------------------------------------------------------------- padding


@dataclass
class PaddedBatch:
    ops: np.ndarray        # (B, N) token ids
    adjacency: np.ndarray  # (B, N, N)
    pad_mask: np.ndarray   # (B, N) True on real nodes
    n_nodes: np.ndarray    # (B,)

    @property
    def size(self) -> int:
        return self.ops.shape[0]

    @property
    def width(self) -> int:
        return self.ops.shape[1]


def pad_batch(cells: Sequence[CellGraph], n_max: int, vocab: OpVocab) -> PaddedBatch:
    b = len(cells)
    ops = np.full((b, n_max), vocab.pad_id, dtype=np.int64)
    adj = np.zeros((b, n_max, n_max), dtype=np.int8)
    mask = np.zeros((b, n_max), dtype=bool)
    sizes = np.zeros(b, dtype=np.int64)
    for k, c in enumerate(cells):
        if c.n > n_max:
            raise CellError(f"cell with {c.n} nodes exceeds padding width {n_max}")
        ops[k, :c.n] = [vocab.index(o) for o in c.ops]
        adj[k, :c.n, :c.n] = c.adjacency
        mask[k, :c.n] = True
        sizes[k] = c.n
    return PaddedBatch(ops, adj, mask, sizes)


# --------------------------------------------------------------- dataset io


@dataclass
class ArchRecord:
    cell: CellGraph
    accuracy: float | None = None
    attribute: float | None = None

    def to_json(self) -> dict:
        rec = {"ops": list(self.cell.ops), "adjacency": self.cell.upper_bits()}
        if self.accuracy is not None:
            rec["accuracy"] = float(self.accuracy)
        if self.attribute is not None:
            rec["attribute"] = float(self.attribute)
        return rec

    @classmethod
    def from_json(cls, obj: dict) -> "ArchRecord":
        try:
            cell = CellGraph.from_upper_bits(obj["ops"], obj["adjacency"])
        except KeyError as e:
            raise CellError(f"record missing field {e}") from None
        acc = obj.get("accuracy")
        attr = obj.get("attribute")
        if acc is not None and not (0.0 <= float(acc) <= 1.0):
            raise CellError(f"accuracy {acc} outside [0, 1]")
        return cls(cell, None if acc is None else float(acc), None if attr is None else float(attr))


def write_records(path, records: Iterable[ArchRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")


def read_records(path) -> list[ArchRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(ArchRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, CellError, TypeError) as e:
                raise CellError(f"{path}:{lineno}: {e}") from None
    return out

