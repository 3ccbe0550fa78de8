from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cate import autodiff as ad
from cate.checkpoint import CheckpointError, checkpoint_io, load_checkpoint, save_checkpoint
from cate.encoder import EncoderConfig, encode_cells, init_weights, mlm_logits
from cate.optim import AdamW
from cate.pretrain import (CorruptionConfig, PairSampleConfig, TrainConfig, assemble_batch, corrupt_cell,
                           corrupt_pair, corruption_counts, pretrain, sample_pairs, write_metrics)
from cate.space import MASK, NB101_SPACE, NB101_VOCAB, CellGraph, OpVocab, validate_cell

from .conftest import CONV1, CONV3, POOL, random_cells

V = NB101_VOCAB.size


def brute_pairs(attrs, delta) -> set[tuple[int, int]]:
    n = len(attrs)
    return {(i, j) for i in range(n) for j in range(n) if i != j and abs(attrs[i] - attrs[j]) < delta}


# ------------------------------------------------------------------- pairs


def test_pair_example_definition():
    pairs = sample_pairs([1.0, 2.0, 3.0, 10.0], PairSampleConfig(delta=2.0, k=1), seed=0)
    by_anchor = {a: b for a, b in pairs}
    assert by_anchor[0] == 1
    assert 3 not in by_anchor


def test_paper_scale_pair_settings_recorded():
    from pathlib import Path

    from cate.config import load_config
    cfg = load_config(Path(__file__).parents[1] / "configs" / "paper.yaml")
    assert (cfg.pair.delta, cfg.pair.k) == (2_000_000, 2)
    assert (cfg.train.epochs, cfg.train.batch_size, cfg.train.lr) == (10, 1024, 1e-3)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0), st.integers(1, 4))
def test_pairs_subset_of_bruteforce(seed, delta, k):
    r = np.random.default_rng(seed)
    attrs = np.round(r.uniform(0, 20, size=60), 1)
    pairs = sample_pairs(attrs, PairSampleConfig(delta=delta, k=k), seed=seed)
    allowed = brute_pairs(attrs, delta)
    assert set(pairs) <= allowed
    assert len(pairs) == len(set(pairs))
    assert len(pairs) <= k * len(attrs)
    counts = np.bincount([a for a, _ in pairs], minlength=len(attrs))
    # anchors with fewer than K neighbors pair with all of them
    for i in range(len(attrs)):
        avail = sum(1 for j in range(len(attrs)) if (i, j) in allowed)
        assert counts[i] == min(k, avail)


def test_pairs_2000_cells_bruteforce():
    cells = random_cells(2000, seed=1)
    from cate.space import compute_attribute
    attrs = np.array([compute_attribute(c, NB101_VOCAB) for c in cells])
    pairs = sample_pairs(attrs, PairSampleConfig(delta=1.0, k=2), seed=0)
    diff = np.abs(attrs[:, None] - attrs[None, :]) < 1.0
    np.fill_diagonal(diff, False)
    assert all(diff[a, b] for a, b in pairs)
    assert np.bincount([a for a, _ in pairs]).max() <= 2


def test_partner_choice_roughly_uniform():
    attrs = np.zeros(6)
    counts = np.zeros(6)
    for s in range(3000):
        for a, b in sample_pairs(attrs, PairSampleConfig(delta=1.0, k=1), seed=s):
            if a == 0:
                counts[b] += 1
    assert counts[0] == 0
    assert np.all(np.abs(counts[1:] / 3000 - 0.2) < 0.03)


# -------------------------------------------------------------- corruption


def test_counts_example():
    assert corruption_counts(0.2, 0.8, 10) == (2, 2)
    assert corruption_counts(0.2, 0.8, 1) == (1, 1)
    assert corruption_counts(0.2, 0.8, 0) == (0, 0)
    assert corruption_counts(0.2, 0.8, 23) == (5, 4)


def _wide_vocab(n_ops=6) -> OpVocab:
    return OpVocab(("input",), tuple(f"op{i}" for i in range(n_ops)), "output", {})


def _chain(n_mid, vocab, rng):
    ops = ["input", *[vocab.ops[int(rng.integers(len(vocab.ops)))] for _ in range(n_mid)], "output"]
    return CellGraph.from_edges(ops, [(i, i + 1) for i in range(n_mid + 1)])


def test_fixed_seed_identical_corruption(diamond):
    a = corrupt_cell(diamond, NB101_VOCAB, CorruptionConfig(), np.random.default_rng(3))
    b = corrupt_cell(diamond, NB101_VOCAB, CorruptionConfig(), np.random.default_rng(3))
    assert a.cell == b.cell and a.positions == b.positions


def test_structural_tokens_never_corrupted():
    cfg = CorruptionConfig(rate=0.5)
    r = np.random.default_rng(0)
    for c in random_cells(300, seed=4):
        cc = corrupt_cell(c, NB101_VOCAB, cfg, r)
        assert cc.cell.ops[0] == "input" and cc.cell.ops[-1] == "output"
        assert 0 not in cc.positions and c.n - 1 not in cc.positions
        assert validate_cell(cc.cell, NB101_SPACE, allow_mask=True) == []
        for p, orig in zip(cc.positions, cc.original):
            assert cc.cell.ops[p] != orig
            assert c.ops[p] == orig


def test_random_replacement_is_legal_and_different():
    v = _wide_vocab()
    r = np.random.default_rng(1)
    cc = corrupt_cell(_chain(20, v, r), v, CorruptionConfig(rate=0.5), r)
    replaced = [p for p in cc.positions if cc.cell.ops[p] != MASK]
    assert replaced
    assert all(cc.cell.ops[p] in v.ops for p in replaced)


def test_monte_carlo_mask_fraction():
    # 23 maskable nodes -> 5 selected -> 4 masked: the rule's share is exactly 0.8
    v = _wide_vocab()
    r = np.random.default_rng(5)
    cells = [_chain(23, v, r) for _ in range(20)]
    masked = selected = 0
    for t in range(100_000 // 5):
        cc = corrupt_cell(cells[t % 20], v, CorruptionConfig(), r)
        selected += len(cc.positions)
        masked += sum(cc.cell.ops[p] == MASK for p in cc.positions)
    assert selected == 100_000
    assert abs(masked / selected - 0.80) <= 0.01


def test_mask_fraction_matches_rule_per_count():
    # tally agrees with the analytic per-k share for every maskable count 1..12
    v = _wide_vocab()
    r = np.random.default_rng(6)
    for m in range(1, 13):
        k, n_mask = corruption_counts(0.2, 0.8, m)
        cc = corrupt_cell(_chain(m, v, r), v, CorruptionConfig(), r)
        assert len(cc.positions) == k
        assert sum(cc.cell.ops[p] == MASK for p in cc.positions) == n_mask


def test_no_maskable_node_skipped():
    c = CellGraph.from_edges(["input", "output"], [(0, 1)])
    cc = corrupt_cell(c, NB101_VOCAB, CorruptionConfig(), np.random.default_rng(0))
    assert cc.positions == [] and cc.cell == c


def test_targets_are_original_ops():
    x, y = random_cells(2, seed=7)
    cp = corrupt_pair((x, y), NB101_VOCAB, CorruptionConfig(), seed=1)
    pb = assemble_batch([cp], NB101_VOCAB)
    n = pb.x.width
    for p in cp.x.positions:
        assert pb.selected[0, p] and pb.targets[0, p] == NB101_VOCAB.index(x.ops[p])
    for p in cp.y.positions:
        assert pb.selected[0, n + p] and pb.targets[0, n + p] == NB101_VOCAB.index(y.ops[p])
    assert pb.selected.sum() == len(cp.x.positions) + len(cp.y.positions)


# ---------------------------------------------------------------- training


def small_cfg(**kw) -> EncoderConfig:
    base = dict(n_layers=2, n_cross_layers=2, n_heads=2, d_model=16, d_ff=32)
    base.update(kw)
    return EncoderConfig(V, **base)


def test_overfit_single_pair():
    x, y = random_cells(2, seed=8)
    pb = assemble_batch([corrupt_pair((x, y), NB101_VOCAB, CorruptionConfig(), seed=0)], NB101_VOCAB)
    w = init_weights(small_cfg(), seed=0)
    opt = AdamW(w.params, lr=1e-2, weight_decay=0.0)
    for _ in range(200):
        with ad.Tape() as tape:
            loss = ad.cross_entropy(mlm_logits(w, pb.x, pb.y), pb.targets, pb.selected)
        opt.step(tape.backward(loss, w.params))
        opt.zero_grad()
    final = ad.cross_entropy(mlm_logits(w, pb.x, pb.y), pb.targets, pb.selected).item()
    assert final < 0.1


def test_short_pretrain_learns_and_writes_metrics(tmp_path):
    cells = random_cells(400, seed=9)
    res = pretrain(cells, NB101_SPACE, PairSampleConfig(delta=1.0, k=2), CorruptionConfig(), small_cfg(),
                   TrainConfig(epochs=2, batch_size=32, seed=0), metrics_path=tmp_path / "m.jsonl",
                   timing_path=tmp_path / "t.jsonl")
    assert [m.epoch for m in res.metrics] == [0, 1, 2]
    assert res.metrics[1].train_loss < res.metrics[0].train_loss
    assert len(res.train_index) == 380 and len(res.heldout_index) == 20
    assert not set(res.train_index) & set(res.heldout_index)
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert len(lines) == 3 and "wall_time" not in lines[0]
    assert "wall_time_s" in (tmp_path / "t.jsonl").read_text()


def test_pretrain_deterministic(tmp_path):
    cells = random_cells(200, seed=10)
    args = (NB101_SPACE, PairSampleConfig(delta=1.0, k=1), CorruptionConfig(), small_cfg(),
            TrainConfig(epochs=1, batch_size=32))
    a = pretrain(cells, *args, metrics_path=tmp_path / "a.jsonl")
    b = pretrain(cells, *args, metrics_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert all(np.array_equal(a.weights[k].data, b.weights[k].data) for k in a.weights.params)


def test_pretrain_vocab_mismatch():
    with pytest.raises(ValueError, match="vocab"):
        pretrain(random_cells(10), NB101_SPACE, PairSampleConfig(), CorruptionConfig(),
                 EncoderConfig(V + 1), TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_returns_last_good_weights():
    cells = random_cells(100, seed=11)
    w = init_weights(small_cfg(), seed=0)
    w.params["head.b"].data[:] = np.inf
    res = pretrain(cells, NB101_SPACE, PairSampleConfig(delta=1.0, k=1), CorruptionConfig(), small_cfg(),
                   TrainConfig(epochs=2, batch_size=16), weights=w)
    assert res.diverged
    assert len(res.metrics) == 1


def test_config_validation():
    with pytest.raises(ValueError):
        PairSampleConfig(delta=0)
    with pytest.raises(ValueError):
        PairSampleConfig(k=0)
    with pytest.raises(ValueError):
        PairSampleConfig(split=1.0)
    with pytest.raises(ValueError):
        CorruptionConfig(mask_fraction=0.7, random_fraction=0.2)
    with pytest.raises(ValueError):
        CorruptionConfig(rate=0.0)


def test_train_config_defaults_are_paper_scale():
    t = TrainConfig()
    assert (t.epochs, t.batch_size, t.lr) == (10, 1024, 1e-3)


# -------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    w = init_weights(small_cfg(), seed=3)
    p = save_checkpoint(w, tmp_path / "ck.npz", NB101_VOCAB, {"note": 1})
    w2, meta = load_checkpoint(p, NB101_VOCAB, small_cfg())
    probe = random_cells(16, seed=12)
    assert np.array_equal(encode_cells(w, probe, NB101_VOCAB), encode_cells(w2, probe, NB101_VOCAB))
    assert meta["extra"] == {"note": 1}
    assert checkpoint_io(w, tmp_path / "x.npz", "save", NB101_VOCAB) is None
    assert set(checkpoint_io(None, tmp_path / "x.npz", "load", NB101_VOCAB).params) == set(w.params)


def test_checkpoint_wrong_vocab(tmp_path):
    p = save_checkpoint(init_weights(small_cfg()), tmp_path / "ck.npz", NB101_VOCAB)
    with pytest.raises(CheckpointError, match="vocabulary"):
        load_checkpoint(p, _wide_vocab())
    with pytest.raises(CheckpointError, match="config"):
        load_checkpoint(p, NB101_VOCAB, small_cfg(d_model=32))


def test_checkpoint_corrupted_file(tmp_path):
    p = tmp_path / "bad.npz"
    p.write_bytes(b"not a zip file at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    good = save_checkpoint(init_weights(small_cfg()), tmp_path / "ok.npz", NB101_VOCAB)
    data = good.read_bytes()
    (tmp_path / "trunc.npz").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.npz")
    with pytest.raises(CheckpointError, match="does not exist"):
        load_checkpoint(tmp_path / "missing.npz")
