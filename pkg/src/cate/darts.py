"""Conversion of DARTS edge-labeled cells into node-labeled DAGs.

A DARTS cell has two inputs (outputs of the two previous cells), four
intermediate nodes each consuming two labeled edges, and an output that
concatenates the intermediate nodes. Each labeled edge A -> B with op O
becomes a node P labeled O with edges A -> P -> B, and each intermediate
node becomes a ``sum`` node. Node order::

    c_{k-2}, c_{k-1}, (op, op, sum) x 4, c_k      # 15 nodes
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .space import CellError, CellGraph, OpVocab, SpaceSpec, as_rng

DARTS_OPS = (
    "max_pool_3x3",
    "avg_pool_3x3",
    "skip_connect",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
)
SUM = "sum"

# Rough per fan-in costs in units of C^2 weights (params) or C^2*HW multiply-adds (flops).
DARTS_VOCAB = OpVocab(
    inputs=("c_{k-2}", "c_{k-1}"),
    ops=DARTS_OPS + (SUM,),
    output="c_{k}",
    costs={
        "params": {"sep_conv_3x3": 2.18, "sep_conv_5x5": 2.5, "dil_conv_3x3": 1.09,
                   "dil_conv_5x5": 1.25},
        "flops": {"max_pool_3x3": 0.09, "avg_pool_3x3": 0.09, "sep_conv_3x3": 2.18,
                  "sep_conv_5x5": 2.5, "dil_conv_3x3": 1.09, "dil_conv_5x5": 1.25,
                  SUM: 0.01},
    },
)

DARTS_SPACE = SpaceSpec(vocab=DARTS_VOCAB, max_nodes=15, max_edges=20, attribute="flops", min_nodes=15)

N_INTERMEDIATE = 4
N_NODES = 2 + 3 * N_INTERMEDIATE + 1

# One intermediate node: two (op, source) edges. Sources: 0, 1 = cell inputs;
# 2 + m = intermediate node m.
DartsEdge = tuple[str, int]
DartsCell = Sequence[Sequence[DartsEdge]]


def _check(cell: DartsCell) -> None:
    if len(cell) != N_INTERMEDIATE:
        raise CellError(f"DARTS cell needs {N_INTERMEDIATE} intermediate nodes, got {len(cell)}")
    for m, edges in enumerate(cell):
        if len(edges) != 2:
            raise CellError(f"intermediate node {m} needs exactly 2 input edges, got {len(edges)}")
        srcs = []
        for edge in edges:
            if len(edge) != 2:
                raise CellError(f"edge {edge!r} is not an (op, source) pair")
            op, src = edge
            if op not in DARTS_OPS:
                raise CellError(f"unknown DARTS op {op!r} (the zero op is excluded)")
            if not isinstance(src, (int, np.integer)) or not (0 <= src < m + 2):
                raise CellError(f"intermediate node {m}: source {src!r} must be in [0, {m + 1}]")
            srcs.append(int(src))
        if srcs[0] == srcs[1]:
            raise CellError(f"intermediate node {m}: both edges come from node {srcs[0]}")


def transform_darts_cell(cell: DartsCell) -> CellGraph:
    _check(cell)
    ops = list(DARTS_VOCAB.inputs)
    adj = np.zeros((N_NODES, N_NODES), dtype=np.int8)
    node_out = [0, 1]  # DAG index holding each DARTS node's output
    for edges in cell:
        base = len(ops)
        for k, (op, src) in enumerate(edges):
            ops.append(op)
            adj[node_out[src], base + k] = 1
            adj[base + k, base + 2] = 1
        ops.append(SUM)
        node_out.append(base + 2)
    ops.append(DARTS_VOCAB.output)
    for s in node_out[2:]:
        adj[s, N_NODES - 1] = 1
    return CellGraph(ops, adj)


def operation_matrix(cell: CellGraph) -> np.ndarray:
    """One-hot (N x 11) operation matrix over the non-special DARTS labels."""
    labels = DARTS_VOCAB.real_labels
    mat = np.zeros((cell.n, len(labels)), dtype=np.int8)
    for i, op in enumerate(cell.ops):
        mat[i, labels.index(op)] = 1
    return mat


def random_darts_cell(seed=None) -> list[list[DartsEdge]]:
    rng = as_rng(seed)
    cell = []
    for m in range(N_INTERMEDIATE):
        srcs = rng.choice(m + 2, size=2, replace=False)
        cell.append([(DARTS_OPS[int(rng.integers(len(DARTS_OPS)))], int(s)) for s in srcs])
    return cell
