"""Pairwise masked-operator pre-training.

Pairs come from a sliding window over the attribute-sorted dataset: each
anchor x is paired with up to K distinct partners y with
|P(x) - P(y)| < delta. Both cells of a pair are corrupted BERT-style and
the cross-attention model is trained to recover the original operators.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .encoder import EncoderConfig, EncoderWeights, init_weights, mlm_logits
from .optim import AdamW
from .space import MASK, CellGraph, OpVocab, SpaceSpec, compute_attribute, pad_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairSampleConfig:
    delta: float = 2.0
    k: int = 2
    attribute: str = "params"
    split: float = 0.95

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 < self.split < 1.0:
            raise ValueError(f"split must lie in (0, 1), got {self.split}")


@dataclass(frozen=True)
class CorruptionConfig:
    rate: float = 0.2
    mask_fraction: float = 0.8
    random_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rate < 1.0:
            raise ValueError(f"rate must lie in (0, 1), got {self.rate}")
        if abs(self.mask_fraction + self.random_fraction - 1.0) > 1e-12:
            raise ValueError("mask_fraction and random_fraction must sum to 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 1024
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    seed: int = 0


# -------------------------------------------------------------- pair sampling


def sample_pairs(attributes: Sequence[float], config: PairSampleConfig, seed=None) -> list[tuple[int, int]]:
    """(anchor, partner) index pairs with |P(anchor) - P(partner)| < delta.

    Anchors are visited in attribute order while two pointers bound the
    window, so the cost is O(n log n + n K). Anchors with fewer than K
    window-mates pair with all of them.
    """
    attrs = np.asarray(attributes, dtype=np.float64)
    n = len(attrs)
    rng = np.random.default_rng(seed)
    order = np.argsort(attrs, kind="stable")
    srt = attrs[order]
    pairs: list[tuple[int, int]] = []
    lo = hi = 0
    lonely = 0
    for pos in range(n):
        p = srt[pos]
        # differences (not shifted bounds) so the window agrees exactly with |P(x) - P(y)| < delta
        while p - srt[lo] >= config.delta:
            lo += 1
        hi = max(hi, pos + 1)
        while hi < n and srt[hi] - p < config.delta:
            hi += 1
        m = hi - lo - 1  # window minus the anchor itself
        if m <= 0:
            lonely += 1
            continue
        if m <= config.k:
            picks = range(m)
        else:
            chosen: list[int] = []
            seen: set[int] = set()
            while len(chosen) < config.k:
                r = int(rng.integers(m))
                if r not in seen:
                    seen.add(r)
                    chosen.append(r)
            picks = chosen
        for r in picks:
            idx = lo + r
            if idx >= pos:
                idx += 1
            pairs.append((int(order[pos]), int(order[idx])))
    if lonely:
        log.info("sample_pairs: %d of %d anchors had an empty neighborhood", lonely, n)
    return pairs


# ----------------------------------------------------------------- corruption


@dataclass
class CorruptedCell:
    cell: CellGraph          # ops with corruption applied
    positions: list[int]     # corrupted node indices
    original: list[str]      # original labels at ``positions``


def corruption_counts(rate: float, mask_fraction: float, maskable: int) -> tuple[int, int]:
    """(selected, masked) counts: ceil(rate*m) selected, round-half-up share masked."""
    if maskable == 0:
        return 0, 0
    k = min(maskable, max(1, math.ceil(rate * maskable - 1e-9)))
    n_mask = min(k, int(math.floor(mask_fraction * k + 0.5 + 1e-9)))
    return k, n_mask


def corrupt_cell(cell: CellGraph, vocab: OpVocab, config: CorruptionConfig, rng: np.random.Generator) -> CorruptedCell:
    maskable = [i for i, op in enumerate(cell.ops) if op in vocab.ops]
    k, n_mask = corruption_counts(config.rate, config.mask_fraction, len(maskable))
    if k == 0:
        log.warning("corrupt_cell: no maskable node in %r; left uncorrupted", cell)
        return CorruptedCell(cell, [], [])
    picked = [maskable[int(i)] for i in rng.permutation(len(maskable))[:k]]
    ops = list(cell.ops)
    for rank, pos in enumerate(picked):
        if rank < n_mask:
            ops[pos] = MASK
        else:
            choices = [o for o in vocab.ops if o != cell.ops[pos]]
            ops[pos] = choices[int(rng.integers(len(choices)))]
    return CorruptedCell(CellGraph(ops, cell.adjacency), sorted(picked),
                         [cell.ops[p] for p in sorted(picked)])


@dataclass
class CorruptedPair:
    x: CorruptedCell
    y: CorruptedCell
    original_x: CellGraph
    original_y: CellGraph


def corrupt_pair(pair: tuple[CellGraph, CellGraph], vocab: OpVocab, config: CorruptionConfig,
                 seed=None) -> CorruptedPair:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(
        config.seed if seed is None else seed)
    x, y = pair
    return CorruptedPair(corrupt_cell(x, vocab, config, rng), corrupt_cell(y, vocab, config, rng), x, y)


@dataclass
class PairBatch:
    x: object
    y: object
    targets: np.ndarray   # (B, 2N)
    selected: np.ndarray  # (B, 2N) bool


def assemble_batch(pairs: Sequence[CorruptedPair], vocab: OpVocab) -> PairBatch:
    n = max(max(p.x.cell.n, p.y.cell.n) for p in pairs)
    bx = pad_batch([p.x.cell for p in pairs], n, vocab)
    by = pad_batch([p.y.cell for p in pairs], n, vocab)
    ox = pad_batch([p.original_x for p in pairs], n, vocab)
    oy = pad_batch([p.original_y for p in pairs], n, vocab)
    targets = np.concatenate([ox.ops, oy.ops], axis=1)
    selected = np.zeros(targets.shape, dtype=bool)
    for b, p in enumerate(pairs):
        selected[b, p.x.positions] = True
        selected[b, [n + q for q in p.y.positions]] = True
    return PairBatch(bx, by, targets, selected)


# ------------------------------------------------------------------- training


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    heldout_masked_acc: float
    wall_time_s: float

    def record(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "heldout_masked_acc": self.heldout_masked_acc}


@dataclass
class PretrainResult:
    weights: EncoderWeights
    metrics: list[EpochMetrics]
    best_epoch: int
    train_index: np.ndarray
    heldout_index: np.ndarray
    diverged: bool = False
    extra: dict = field(default_factory=dict)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def split_indices(n: int, split: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = _rng(seed, 7).permutation(n)
    n_train = int(round(split * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def make_pairs(cells: Sequence[CellGraph], attrs: np.ndarray, index: np.ndarray, pair_cfg: PairSampleConfig,
               corr_cfg: CorruptionConfig, vocab: OpVocab, rng: np.random.Generator) -> list[CorruptedPair]:
    local = sample_pairs(attrs[index], pair_cfg, rng)
    out = []
    for a, b in local:
        cp = corrupt_pair((cells[index[a]], cells[index[b]]), vocab, corr_cfg, rng)
        if cp.x.positions or cp.y.positions:
            out.append(cp)
    return out


def masked_accuracy(w: EncoderWeights, pairs: Sequence[CorruptedPair], vocab: OpVocab,
                    batch_size: int = 512) -> float:
    """Argmax accuracy at corrupted positions, restricted to intermediate operations."""
    if not pairs:
        return float("nan")
    op_ids = vocab.op_ids
    hits = total = 0
    for s in range(0, len(pairs), batch_size):
        pb = assemble_batch(pairs[s:s + batch_size], vocab)
        logits = mlm_logits(w, pb.x, pb.y).data
        pred = op_ids[np.argmax(logits[..., op_ids], axis=-1)]
        hits += int(((pred == pb.targets) & pb.selected).sum())
        total += int(pb.selected.sum())
    return hits / total


def mean_loss(w: EncoderWeights, pairs: Sequence[CorruptedPair], vocab: OpVocab, batch_size: int) -> float:
    losses = []
    for s in range(0, len(pairs), batch_size):
        pb = assemble_batch(pairs[s:s + batch_size], vocab)
        logits = mlm_logits(w, pb.x, pb.y)
        losses.append(ad.cross_entropy(logits, pb.targets, pb.selected).item())
    return float(np.mean(losses))


def pretrain(cells: Sequence[CellGraph], spec: SpaceSpec, pair_cfg: PairSampleConfig,
             corr_cfg: CorruptionConfig, enc_cfg: EncoderConfig, train_cfg: TrainConfig,
             metrics_path: str | Path | None = None, timing_path: str | Path | None = None,
             weights: EncoderWeights | None = None) -> PretrainResult:
    """Train the encoder with the pairwise MLM objective.

    Pairs are resampled every epoch from the training split and shuffled
    before batching. Each epoch logs the mean training loss and masked-op
    accuracy on a fixed corrupted held-out pair set; the weights from the
    epoch with the best held-out accuracy are returned. Epoch 0 reports the
    untrained loss on the first epoch's pairs. A non-finite loss stops
    training and returns the last good weights.
    """
    vocab = spec.vocab
    if enc_cfg.vocab_size != vocab.size:
        raise ValueError(f"encoder vocab_size {enc_cfg.vocab_size} != space vocabulary {vocab.size}")
    cells = list(cells)
    attrs = np.array([compute_attribute(c, vocab, pair_cfg.attribute) for c in cells])
    train_idx, held_idx = split_indices(len(cells), pair_cfg.split, train_cfg.seed)
    w = weights if weights is not None else init_weights(enc_cfg, train_cfg.seed)
    opt = AdamW(w.params, lr=train_cfg.lr, betas=train_cfg.betas, weight_decay=train_cfg.weight_decay,
                groups=w.groups())
    held_pairs = make_pairs(cells, attrs, held_idx, pair_cfg, corr_cfg, vocab, _rng(corr_cfg.seed, 1))

    metrics: list[EpochMetrics] = []
    t0 = time.perf_counter()
    epoch_pairs = make_pairs(cells, attrs, train_idx, pair_cfg, corr_cfg, vocab,
                             _rng(corr_cfg.seed, 2, 1))
    if not epoch_pairs:
        raise ValueError("no training pairs: every anchor has an empty attribute neighborhood")
    init_loss = mean_loss(w, epoch_pairs, vocab, max(train_cfg.batch_size, 256))
    metrics.append(EpochMetrics(0, init_loss, masked_accuracy(w, held_pairs, vocab),
                                time.perf_counter() - t0))
    best_acc, best_epoch, best = metrics[0].heldout_masked_acc, 0, w.copy()
    last_good = w.copy()
    diverged = False

    for epoch in range(1, train_cfg.epochs + 1):
        if epoch > 1:
            epoch_pairs = make_pairs(cells, attrs, train_idx, pair_cfg, corr_cfg, vocab,
                                     _rng(corr_cfg.seed, 2, epoch))
        order = _rng(train_cfg.seed, 3, epoch).permutation(len(epoch_pairs))
        losses = []
        for s in range(0, len(order), train_cfg.batch_size):
            pb = assemble_batch([epoch_pairs[i] for i in order[s:s + train_cfg.batch_size]], vocab)
            with ad.Tape() as tape:
                logits = mlm_logits(w, pb.x, pb.y)
                loss = ad.cross_entropy(logits, pb.targets, pb.selected)
            if not np.isfinite(loss.data):
                diverged = True
                break
            grads = tape.backward(loss, w.params)
            opt.step(grads)
            opt.zero_grad()
            losses.append(loss.item())
        if diverged or not ad.parameters_finite(w.params.values()):
            log.error("pretrain: non-finite loss in epoch %d; returning last good weights", epoch)
            diverged = True
            w = last_good
            break
        last_good = w.copy()
        acc = masked_accuracy(w, held_pairs, vocab)
        metrics.append(EpochMetrics(epoch, float(np.mean(losses)), acc, time.perf_counter() - t0))
        log.info("epoch %d: train_loss=%.4f heldout_acc=%.4f", epoch, metrics[-1].train_loss, acc)
        if acc > best_acc:
            best_acc, best_epoch, best = acc, epoch, w.copy()

    if metrics_path is not None:
        write_metrics(metrics, metrics_path, timing_path)
    result_w = best if not diverged or best_epoch > 0 else last_good
    return PretrainResult(result_w, metrics, best_epoch, train_idx, held_idx, diverged,
                          {"attributes": attrs, "final_weights": w})


def write_metrics(metrics: Sequence[EpochMetrics], path, timing_path=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for m in metrics:
            fh.write(json.dumps(m.record()) + "\n")
    if timing_path is not None:
        with open(timing_path, "w") as fh:
            for m in metrics:
                fh.write(json.dumps({"epoch": m.epoch, "wall_time_s": round(m.wall_time_s, 3)}) + "\n")
