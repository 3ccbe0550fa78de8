"""Masked Transformer encoder over cells, pairwise cross-attention encoder and MLM head.

Each block is, per head k::

    Q_k, K_k, V_k = H W_qk, H W_kk, H W_vk
    Hhat_k = softmax(Q_k K_k^T / sqrt(d) + M) V_k
    H' = ReLU(concat_k(Hhat_k) W_1 + b_1) W_2 + b_2

with ``d`` the stack width. There are no positional embeddings, residual
connections or layer norms: structure enters only through the mask M, which
makes the output-node encoding invariant to isomorphic relabelings.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masks import DIRECT, INDIRECT, build_attention_mask, build_cross_mask
from .space import CellError, CellGraph, OpVocab, PaddedBatch, SpaceSpec, pad_batch, validate_cell

UNI = "uni"
BI = "bi"


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    max_nodes: int = 7
    n_layers: int = 4
    n_cross_layers: int = 4
    n_heads: int = 4
    d_model: int = 32
    d_ff: int = 64
    direction: str = UNI
    mask_kind: str = INDIRECT

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1 or self.n_cross_layers < 1:
            raise ValueError("n_layers and n_cross_layers must be >= 1")
        if self.direction not in (UNI, BI):
            raise ValueError(f"direction must be 'uni' or 'bi', got {self.direction!r}")
        if self.mask_kind not in (DIRECT, INDIRECT):
            raise ValueError(f"mask_kind must be 'direct' or 'indirect', got {self.mask_kind!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_cross(self) -> int:
        """Cross-attention width; doubled for bidirectional encodings."""
        return self.d_model * (2 if self.direction == BI else 1)

    @property
    def encoding_width(self) -> int:
        return self.d_cross

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def paper(cls, vocab_size: int, max_nodes: int = 7) -> "EncoderConfig":
        return cls(vocab_size, max_nodes, n_layers=12, n_cross_layers=24, n_heads=8, d_model=64, d_ff=64)


@dataclass
class EncoderWeights:
    config: EncoderConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def groups(self) -> dict[str, str]:
        return {name: "regular" for name in self.params}

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(self.config, {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()})


def _block_shapes(prefix: str, d: int, heads: int, d_ff: int) -> dict[str, tuple[int, ...]]:
    dk = d // heads
    return {
        f"{prefix}.wq": (heads, d, dk),
        f"{prefix}.wk": (heads, d, dk),
        f"{prefix}.wv": (heads, d, dk),
        f"{prefix}.w1": (d, d_ff),
        f"{prefix}.b1": (d_ff,),
        f"{prefix}.w2": (d_ff, d),
        f"{prefix}.b2": (d,),
    }


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"embedding": (config.vocab_size, config.d_model)}
    for l in range(config.n_layers):
        shapes.update(_block_shapes(f"enc.{l}", config.d_model, config.n_heads, config.d_ff))
    dc = config.d_cross
    for l in range(config.n_cross_layers):
        shapes.update(_block_shapes(f"cross.{l}", dc, config.n_heads, config.d_ff))
    shapes["segment"] = (2, dc)
    shapes["head.w"] = (dc, config.vocab_size)
    shapes["head.b"] = (config.vocab_size,)
    return shapes


def init_weights(config: EncoderConfig, seed=0) -> EncoderWeights:
    """Scaled-uniform initialisation.

    Matrices are U(-a, a) with a = gain * sqrt(3 / fan_in), i.e. variance
    gain^2 / fan_in; gain is sqrt(2) for the ReLU-facing W_1 and 1
    elsewhere. Embedding and segment tables are U(-sqrt(3), sqrt(3)) (unit
    variance). Biases start at zero.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("b1", "b2", "b"):
            data = np.zeros(shape)
        elif name in ("embedding", "segment"):
            data = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=shape)
        else:
            fan_in = shape[-2]
            gain = np.sqrt(2.0) if leaf == "w1" else 1.0
            a = gain * np.sqrt(3.0 / fan_in)
            data = rng.uniform(-a, a, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return EncoderWeights(config, params)


def transformer_block(h: Tensor, w: EncoderWeights, prefix: str, allowed: np.ndarray, n_heads: int) -> Tensor:
    """One masked block. ``h`` is (B, N, d); ``allowed`` is (B, N, N) bool."""
    b, n, d = h.shape
    hx = ad.reshape(h, (b, 1, n, d))
    q = ad.matmul(hx, w[f"{prefix}.wq"])  # (B, heads, N, dk)
    k = ad.matmul(hx, w[f"{prefix}.wk"])
    v = ad.matmul(hx, w[f"{prefix}.wv"])
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    attn = ad.masked_softmax(scores, allowed[:, None, :, :])
    heads = ad.matmul(attn, v)  # (B, heads, N, dk)
    cat = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (b, n, d))
    hidden = ad.relu(ad.add(ad.matmul(cat, w[f"{prefix}.w1"]), w[f"{prefix}.b1"]))
    return ad.add(ad.matmul(hidden, w[f"{prefix}.w2"]), w[f"{prefix}.b2"])


@dataclass
class EncoderOutput:
    hidden: Tensor            # (B, N, d) or (B, N, 2d) for bi
    encoding: Tensor          # (B, d) or (B, 2d)
    layers: list[np.ndarray]  # forward-direction hidden after each block, layer 0 = embedding


def _run_stack(w: EncoderWeights, ops: np.ndarray, allowed: np.ndarray, layers: list | None) -> Tensor:
    cfg = w.config
    h = ad.embedding(w["embedding"], ops)
    if layers is not None:
        layers.append(h.data)
    for l in range(cfg.n_layers):
        h = transformer_block(h, w, f"enc.{l}", allowed, cfg.n_heads)
        if layers is not None:
            layers.append(h.data)
    return h


def _check_batch(batch: PaddedBatch, vocab_size: int) -> None:
    if batch.ops.size and (batch.ops.min() < 0 or batch.ops.max() >= vocab_size):
        raise CellError(f"token id outside vocabulary of size {vocab_size}")
    if (batch.n_nodes < 2).any():
        raise CellError("every cell needs at least an input and an output node")


def encode_architecture(w: EncoderWeights, batch: PaddedBatch, mask_kind: str | None = None,
                        direction: str | None = None, keep_layers: bool = False) -> EncoderOutput:
    """Per-node hidden states and the architecture encoding of a padded batch.

    ``uni``: the encoding is the output node's final hidden vector.
    ``bi``: the stack is also run on the reversed DAG (queries attend to
    descendants, shared weights); per-node states are concatenated and the
    encoding is [output node, forward ; input node, reversed].
    """
    cfg = w.config
    mask_kind = mask_kind or cfg.mask_kind
    direction = direction or cfg.direction
    _check_batch(batch, cfg.vocab_size)
    layers = [] if keep_layers else None
    out_idx = batch.n_nodes - 1
    fwd_mask = build_attention_mask(batch.adjacency, batch.pad_mask, mask_kind).allowed
    h_fwd = _run_stack(w, batch.ops, fwd_mask, layers)
    if direction == UNI:
        return EncoderOutput(h_fwd, ad.gather_rows(h_fwd, out_idx), layers or [])
    rev_mask = build_attention_mask(batch.adjacency, batch.pad_mask, mask_kind, reverse=True).allowed
    h_rev = _run_stack(w, batch.ops, rev_mask, None)
    hidden = ad.concat([h_fwd, h_rev], axis=-1)
    enc = ad.concat([ad.gather_rows(h_fwd, out_idx),
                     ad.gather_rows(h_rev, np.zeros_like(out_idx))], axis=-1)
    return EncoderOutput(hidden, enc, layers or [])


def encode_pair_joint(w: EncoderWeights, batch_x: PaddedBatch, batch_y: PaddedBatch,
                      mask_kind: str | None = None) -> Tensor:
    """Joint (B, 2N, d_c) representation of a batch of architecture pairs."""
    if batch_x.ops.shape != batch_y.ops.shape:
        raise CellError(f"pair batches must share padding: {batch_x.ops.shape} vs {batch_y.ops.shape}")
    cfg = w.config
    hx = encode_architecture(w, batch_x, mask_kind).hidden
    hy = encode_architecture(w, batch_y, mask_kind).hidden
    n = batch_x.width
    seg_ids = np.repeat([0, 1], n)
    h = ad.add(ad.concat([hx, hy], axis=1), ad.embedding(w["segment"], seg_ids))
    allowed = build_cross_mask(batch_x.pad_mask, batch_y.pad_mask).allowed
    for l in range(cfg.n_cross_layers):
        h = transformer_block(h, w, f"cross.{l}", allowed, cfg.n_heads)
    return h


def mlm_logits(w: EncoderWeights, batch_x: PaddedBatch, batch_y: PaddedBatch) -> Tensor:
    h = encode_pair_joint(w, batch_x, batch_y)
    return ad.add(ad.matmul(h, w["head.w"]), w["head.b"])


def mlm_forward_loss(w: EncoderWeights, batch_x: PaddedBatch, batch_y: PaddedBatch,
                     targets: np.ndarray, selected: np.ndarray) -> tuple[Tensor, Tensor]:
    """Mean cross-entropy over corrupted positions of both segments.

    ``targets`` and ``selected`` are (B, 2N): original token ids and the
    corruption indicator over the concatenated [X ; Y] positions.
    """
    selected = np.asarray(selected, dtype=bool)
    if not selected.any():
        raise ValueError("mlm_forward_loss: no corrupted positions")
    logits = mlm_logits(w, batch_x, batch_y)
    return ad.cross_entropy(logits, targets, selected), logits


def encode_cells(w: EncoderWeights, cells: Sequence[CellGraph], vocab: OpVocab,
                 spec: SpaceSpec | None = None, mask_kind: str | None = None,
                 direction: str | None = None, batch_size: int = 2048) -> np.ndarray:
    """Encodings for a list of cells, validated when ``spec`` is given."""
    cfg = w.config
    if vocab.size != cfg.vocab_size:
        raise CellError(f"vocabulary size {vocab.size} does not match encoder ({cfg.vocab_size})")
    if spec is not None:
        for c in cells:
            problems = validate_cell(c, spec)
            if problems:
                raise CellError(f"invalid cell {c!r}: {'; '.join(problems)}")
    too_big = [c.n for c in cells if c.n > cfg.max_nodes]
    if too_big:
        raise CellError(f"cell with {max(too_big)} nodes exceeds encoder max_nodes {cfg.max_nodes}")
    out = []
    for s in range(0, len(cells), batch_size):
        chunk = cells[s:s + batch_size]
        batch = pad_batch(chunk, max(c.n for c in chunk), vocab)
        out.append(encode_architecture(w, batch, mask_kind, direction).encoding.data)
    if not out:
        return np.zeros((0, cfg.encoding_width))
    return np.concatenate(out, axis=0)
