"""Fixed baseline encodings, learned-encoding extraction and latent-space neighbor queries."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import EncoderWeights, encode_cells
from .space import CellError, CellGraph, SpaceSpec, canonical_hash

ADJACENCY_ONEHOT = "adjacency-onehot"
PATH_ONEHOT = "path-onehot"
PATH_TRUNCATED = "path-truncated"
CATE_UNI = "cate-uni"
CATE_BI = "cate-bi"
SCHEMES = (ADJACENCY_ONEHOT, PATH_ONEHOT, PATH_TRUNCATED, CATE_UNI, CATE_BI)

MAX_PATH_WIDTH = 1_000_000
DEFAULT_TRUNCATION = 100


@dataclass
class EncodingVector:
    values: np.ndarray
    scheme: str

    @property
    def width(self) -> int:
        return int(self.values.shape[-1])


def encode_adjacency_onehot(cell: CellGraph, spec: SpaceSpec) -> EncodingVector:
    """Flattened strict upper triangle plus per-node one-hot labels, both padded to max_nodes."""
    n_max = spec.max_nodes
    labels = spec.vocab.real_labels
    adj = np.zeros((n_max, n_max), dtype=np.float64)
    n = min(cell.n, n_max)
    adj[:n, :n] = cell.adjacency[:n, :n]
    onehot = np.zeros((n_max, len(labels)))
    for i, op in enumerate(cell.ops[:n_max]):
        if op in labels:
            onehot[i, labels.index(op)] = 1.0
    return EncodingVector(np.concatenate([adj[np.triu_indices(n_max, k=1)], onehot.reshape(-1)]),
                          ADJACENCY_ONEHOT)


def path_width(spec: SpaceSpec) -> int:
    v = len(spec.ops)
    width = sum(v ** i for i in range(spec.max_nodes - len(spec.vocab.inputs) - 1 + 1))
    if width > MAX_PATH_WIDTH:
        raise CellError(f"path encoding for this space needs {width} dims (> {MAX_PATH_WIDTH})")
    return width


def enumerate_paths(cell: CellGraph) -> list[tuple[int, ...]]:
    """Node sequences of every path from node 0 to the last node (endpoints excluded)."""
    out: list[tuple[int, ...]] = []
    last = cell.n - 1

    def walk(node: int, trail: tuple[int, ...]):
        for s in cell.successors(node):
            if s == last:
                out.append(trail)
            else:
                walk(s, trail + (s,))

    walk(0, ())
    return out


def path_index(ops_on_path: Sequence[str], spec: SpaceSpec) -> int:
    """Position of an op sequence: ordered by length, then lexicographically by op index."""
    v = len(spec.ops)
    offset = sum(v ** i for i in range(len(ops_on_path)))
    code = 0
    for op in ops_on_path:
        code = code * v + spec.ops.index(op)
    return offset + code


def encode_path(cell: CellGraph, spec: SpaceSpec, truncate_to: int | None = None) -> EncodingVector:
    width = path_width(spec)
    vec = np.zeros(width)
    for trail in enumerate_paths(cell):
        vec[path_index([cell.ops[i] for i in trail], spec)] = 1.0
    if truncate_to is None:
        return EncodingVector(vec, PATH_ONEHOT)
    return EncodingVector(vec[:truncate_to], PATH_TRUNCATED)


def extract_cate_encoding(weights: EncoderWeights, cells: Sequence[CellGraph], spec: SpaceSpec) -> np.ndarray:
    """Single-architecture encoder outputs (no cross-attention blocks)."""
    cfg = weights.config
    if cfg.vocab_size != spec.vocab.size:
        raise CellError(f"checkpoint vocabulary size {cfg.vocab_size} != space vocabulary {spec.vocab.size}")
    if cfg.max_nodes < max((c.n for c in cells), default=0):
        raise CellError(f"cells exceed checkpoint max_nodes {cfg.max_nodes}")
    return encode_cells(weights, list(cells), spec.vocab, spec)


def encode_many(scheme: str, cells: Sequence[CellGraph], spec: SpaceSpec, weights: EncoderWeights | None = None,
                truncate_to: int = DEFAULT_TRUNCATION) -> np.ndarray:
    """(len(cells), width) matrix for any supported scheme."""
    if scheme == ADJACENCY_ONEHOT:
        return np.stack([encode_adjacency_onehot(c, spec).values for c in cells])
    if scheme == PATH_ONEHOT:
        return np.stack([encode_path(c, spec).values for c in cells])
    if scheme == PATH_TRUNCATED:
        return np.stack([encode_path(c, spec, truncate_to).values for c in cells])
    if scheme in (CATE_UNI, CATE_BI):
        if weights is None:
            raise CellError(f"scheme {scheme!r} needs a pre-trained checkpoint")
        want = "uni" if scheme == CATE_UNI else "bi"
        if weights.config.direction != want:
            raise CellError(f"checkpoint direction {weights.config.direction!r} does not match {scheme!r}")
        return extract_cate_encoding(weights, cells, spec)
    raise ValueError(f"unknown encoding scheme {scheme!r}; known: {SCHEMES}")


@dataclass
class NeighborResult:
    indices: np.ndarray
    distances: np.ndarray
    short: bool


def latent_neighbors(query: np.ndarray, pool: np.ndarray, k: int, exclude: Iterable[int] = ()) -> NeighborResult:
    """k nearest pool rows by L2 distance, skipping ``exclude``; ties keep index order."""
    pool = np.asarray(pool, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if pool.ndim != 2 or query.shape != (pool.shape[1],):
        raise ValueError(f"query {query.shape} incompatible with pool {pool.shape}")
    d = np.sqrt(((pool - query) ** 2).sum(axis=1))
    keep = np.ones(len(pool), dtype=bool)
    ex = np.fromiter((int(i) for i in exclude), dtype=np.int64)
    keep[ex] = False
    cand = np.nonzero(keep)[0]
    order = cand[np.argsort(d[cand], kind="stable")][:k]
    return NeighborResult(order, d[order], len(order) < k)


def write_encodings(path, cells: Sequence[CellGraph], scheme: str, values: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for c, row in zip(cells, values):
            fh.write(json.dumps({"cell_hash": canonical_hash(c), "scheme": scheme,
                                 "values": [float(x) for x in row]}, separators=(",", ":")) + "\n")


def read_encodings(path) -> tuple[list[str], str, np.ndarray]:
    hashes, rows, schemes = [], [], set()
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                hashes.append(rec["cell_hash"])
                schemes.add(rec["scheme"])
                rows.append(rec["values"])
    if len(schemes) > 1:
        raise ValueError(f"mixed schemes in {path}: {sorted(schemes)}")
    return hashes, (schemes.pop() if schemes else ""), np.array(rows, dtype=np.float64)
