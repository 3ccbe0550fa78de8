"""Transitive closure and attention masks derived from cell structure.

Masks are boolean arrays, True where a query row may attend to a key
column. A query attends to its ancestors (direct: parents; indirect: all
ancestors through the transitive closure) and to itself, so information
flows from the input towards the output node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DIRECT = "direct"
INDIRECT = "indirect"
CROSS = "cross"


@dataclass
class AttentionMask:
    allowed: np.ndarray  # (..., Q, K) bool
    kind: str

    def __post_init__(self):
        self.allowed = np.asarray(self.allowed, dtype=bool)

    def well_formed(self) -> bool:
        return bool(self.allowed.any(axis=-1).all())

    def additive(self, neg: float = -1e9) -> np.ndarray:
        return np.where(self.allowed, 0.0, neg)


def floyd_closure(adjacency) -> np.ndarray:
    """Reachability by the Floyd triple loop: R[i,j] |= R[i,k] & R[k,j]."""
    a = np.array(adjacency, dtype=bool)
    n = a.shape[0]
    for k in range(n):
        for i in range(n):
            for j in range(n):
                a[i, j] |= a[i, k] & a[k, j]
    return a.astype(np.int8)


def floyd_closure_batch(adjacency: np.ndarray) -> np.ndarray:
    """Vectorised closure over a (B, N, N) stack; same recurrence, k outermost."""
    a = np.array(adjacency, dtype=bool)
    n = a.shape[-1]
    for k in range(n):
        a |= a[..., :, k:k + 1] & a[..., k:k + 1, :]
    return a.astype(np.int8)


def build_attention_mask(adjacency: np.ndarray, pad_mask: np.ndarray, kind: str = INDIRECT,
                         reverse: bool = False) -> AttentionMask:
    """Dependency mask for a padded batch.

    ``adjacency`` is (B, N, N) or (N, N) with A[i, j] = 1 for edge i -> j and
    ``pad_mask`` marks real nodes. ``reverse`` builds the mask of the
    reversed DAG (queries attend to descendants).
    """
    adj = np.asarray(adjacency)
    pad = np.asarray(pad_mask, dtype=bool)
    squeeze = adj.ndim == 2
    if squeeze:
        adj, pad = adj[None], pad[None]
    if kind == INDIRECT:
        rel = floyd_closure_batch(adj).astype(bool)
    elif kind == DIRECT:
        rel = adj.astype(bool)
    else:
        raise ValueError(f"unknown mask kind {kind!r}")
    # rel[b, i, j]: i -> j. Query j attends to key i when i is an ancestor of j.
    allowed = rel if reverse else np.swapaxes(rel, -1, -2)
    allowed = allowed & pad[:, :, None] & pad[:, None, :]
    n = adj.shape[-1]
    allowed = allowed | np.eye(n, dtype=bool)[None]
    if squeeze:
        allowed = allowed[0]
    return AttentionMask(allowed, kind)


def build_cross_mask(pad_x: np.ndarray, pad_y: np.ndarray) -> AttentionMask:
    """(…, 2N, 2N) mask over a concatenated pair: real nodes see all real nodes of both."""
    px = np.asarray(pad_x, dtype=bool)
    py = np.asarray(pad_y, dtype=bool)
    if px.shape != py.shape:
        raise ValueError(f"pad masks differ in shape: {px.shape} vs {py.shape}")
    real = np.concatenate([px, py], axis=-1)
    allowed = real[..., :, None] & real[..., None, :]
    allowed = allowed | np.eye(real.shape[-1], dtype=bool)
    return AttentionMask(allowed, CROSS)
