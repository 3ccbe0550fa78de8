from __future__ import annotations

import math

import numpy as np
import pytest

from cate import autodiff as ad
from cate.encoder import (BI, EncoderConfig, encode_architecture, encode_cells, encode_pair_joint, init_weights,
                          mlm_forward_loss, parameter_shapes)
from cate.pretrain import CorruptionConfig, assemble_batch, corrupt_pair
from cate.space import NB101_SPACE, NB101_VOCAB, CellError, CellGraph, pad_batch, topological_orders

from .conftest import CONV1, CONV3, POOL, random_cells

V = NB101_VOCAB.size


def small(**kw) -> EncoderConfig:
    base = dict(n_layers=2, n_cross_layers=2, n_heads=2, d_model=16, d_ff=16)
    base.update(kw)
    return EncoderConfig(V, **base)


def test_same_seed_bit_identical():
    a, b = init_weights(small(), seed=3), init_weights(small(), seed=3)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.params)


def test_parameter_count_matches_shape_arithmetic():
    cfg = EncoderConfig(V)
    d, f, h, dc = cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.d_cross

    def block(width):
        return 3 * h * width * (width // h) + width * f + f + f * width + width

    expected = V * d + cfg.n_layers * block(d) + cfg.n_cross_layers * block(dc) + 2 * dc + dc * V + V
    assert init_weights(cfg).num_parameters() == expected
    assert sum(math.prod(s) for s in parameter_shapes(cfg).values()) == expected


def test_paper_config_widths():
    cfg = EncoderConfig.paper(V)
    assert cfg.d_head == 8
    assert cfg.encoding_width == 64


def test_invalid_config():
    with pytest.raises(ValueError):
        EncoderConfig(V, d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(V, mask_kind="full")


def test_uni_encoding_width():
    w = init_weights(small())
    assert encode_cells(w, random_cells(4), NB101_VOCAB).shape == (4, 16)
    wb = init_weights(small(direction=BI))
    assert encode_cells(wb, random_cells(4), NB101_VOCAB).shape == (4, 32)


@pytest.mark.parametrize("direction", ["uni", "bi"])
def test_relabeling_invariance(direction):
    w = init_weights(small(direction=direction), seed=1)
    spec = NB101_SPACE.with_nodes(3, 5)
    for c in random_cells(15, seed=2, spec=spec):
        relabeled = [c.permuted(o) for o in topological_orders(c)]
        enc = encode_cells(w, relabeled, NB101_VOCAB)
        assert np.abs(enc - enc[0]).max() <= 1e-10


def test_padded_equals_unpadded():
    w = init_weights(small(), seed=4)
    for c in random_cells(10, seed=4):
        a = encode_architecture(w, pad_batch([c], c.n, NB101_VOCAB)).encoding.data
        b = encode_architecture(w, pad_batch([c], 7, NB101_VOCAB)).encoding.data
        assert np.abs(a - b).max() <= 1e-10


def test_non_ancestor_perturbation_leaves_hidden_unchanged():
    # node 1 and node 2 are siblings: neither is an ancestor of the other
    c = CellGraph.from_edges(["input", CONV3, CONV1, POOL, "output"], [(0, 1), (0, 2), (1, 3), (2, 4), (3, 4)])
    w = init_weights(small(), seed=5)
    base = encode_architecture(w, pad_batch([c], 5, NB101_VOCAB), keep_layers=True).layers
    pert = encode_architecture(w, pad_batch([c.with_op(2, POOL)], 5, NB101_VOCAB), keep_layers=True).layers
    for h0, h1 in zip(base, pert):
        for i in (0, 1, 3):
            assert np.array_equal(h0[0, i], h1[0, i])
    assert not np.allclose(base[-1][0, 4], pert[-1][0, 4])


def test_any_op_change_changes_encoding():
    w = init_weights(small(), seed=6)
    c = random_cells(1, seed=8)[0]
    ref = encode_cells(w, [c], NB101_VOCAB)
    for j in range(1, c.n - 1):
        other = next(o for o in (CONV3, CONV1, POOL) if o != c.ops[j])
        assert not np.allclose(encode_cells(w, [c.with_op(j, other)], NB101_VOCAB), ref)


def test_token_outside_vocab():
    w = init_weights(small())
    b = pad_batch(random_cells(1), 7, NB101_VOCAB)
    b.ops[0, 1] = V + 3
    with pytest.raises(CellError, match="vocabulary"):
        encode_architecture(w, b)


def test_joint_length_and_symmetry():
    w = init_weights(small(), seed=7)
    w.params["segment"].data[:] = 0.0
    c = random_cells(1, seed=9)[0]
    b = pad_batch([c], 7, NB101_VOCAB)
    h = encode_pair_joint(w, b, b).data
    assert h.shape == (1, 14, 16)
    assert np.abs(h[0, :7] - h[0, 7:]).max() <= 1e-12


def test_cross_attention_carries_information():
    w = init_weights(small(), seed=8)
    x, y = random_cells(2, seed=10)
    n = max(x.n, y.n)
    bx = pad_batch([x], n, NB101_VOCAB)
    h0 = encode_pair_joint(w, bx, pad_batch([y], n, NB101_VOCAB)).data
    j = 1
    other = next(o for o in (CONV3, CONV1, POOL) if o != y.ops[j])
    h1 = encode_pair_joint(w, bx, pad_batch([y.with_op(j, other)], n, NB101_VOCAB)).data
    assert not np.allclose(h0[0, :x.n], h1[0, :x.n])


def _mlm_batch(cells, seed):
    pairs = [corrupt_pair((cells[i], cells[i + 1]), NB101_VOCAB, CorruptionConfig(), seed=seed + i)
             for i in range(0, len(cells) - 1, 2)]
    return assemble_batch(pairs, NB101_VOCAB)


def test_untrained_loss_near_log_vocab():
    w = init_weights(EncoderConfig(V), seed=0)
    pb = _mlm_batch(random_cells(64, seed=11), 0)
    loss, _ = mlm_forward_loss(w, pb.x, pb.y, pb.targets, pb.selected)
    assert abs(loss.item() - math.log(V)) < 0.5


def test_full_encoder_gradients_match_finite_differences():
    for draw in range(20):
        w = init_weights(small(), seed=draw)
        pb = _mlm_batch(random_cells(4, seed=100 + draw), draw)

        def loss_fn():
            return mlm_forward_loss(w, pb.x, pb.y, pb.targets, pb.selected)[0]

        _, report = ad.backward_and_check(loss_fn, w.params, check=True, rng=np.random.default_rng(draw),
                                          n_coordinates=30, n_directions=4)
        assert report.passed(1e-4), report
