import numpy as np
import pytest

from mdctr import tensor as T
from mdctr.backbone import Backbone, BackboneConfig, pool
from mdctr.errors import ConfigError, ValidationError
from mdctr.gradcheck import finite_diff_check
from mdctr.nn import MultiHeadSelfAttention
from mdctr.tensor import NumericalError, Tensor


def small(seed=0, **kw):
    cfg = BackboneConfig(**{**dict(vocab_size=30, num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=16,
                                   max_seq_len=10), **kw})
    return Backbone(cfg, np.random.default_rng(seed))


def ids_mask(rows, width):
    ids = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.int8)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        mask[i, :len(r)] = 1
    return ids, mask


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(hidden_dim=10, num_heads=4).validate()
    with pytest.raises(ConfigError):
        BackboneConfig(num_layers=0).validate()
    with pytest.raises(ConfigError):
        BackboneConfig(pooling="max").validate()


def test_tapset_has_l_plus_one_equal_shapes():
    bb = small(num_layers=3)
    ids, mask = ids_mask([[4, 5, 6], [7, 8]], 6)
    taps = bb(ids, mask)
    assert len(taps) == 4
    assert {t.shape for t in taps.h} == {(2, 6, 8)}
    np.testing.assert_array_equal(taps.h[0].data, bb.embed(ids, mask).data)


def test_embed_pad_row_and_positional_difference():
    bb = small()
    ids, mask = ids_mask([[5, 5]], 4)
    h0 = bb.embed(ids, mask).data
    tok, pos = bb.tok.weight.data, bb.pos.weight.data
    np.testing.assert_allclose(h0[0, 2], tok[0])
    np.testing.assert_allclose(h0[0, 3], tok[0])
    np.testing.assert_allclose(h0[0, 1] - h0[0, 0], pos[1] - pos[0], atol=1e-6)


def test_embed_rejects_out_of_vocab_and_long_sequences():
    bb = small()
    with pytest.raises(IndexError):
        bb.embed(np.array([[2, 99]]), np.ones((1, 2), dtype=np.int8))
    with pytest.raises(ConfigError):
        bb.embed(np.zeros((1, 11), dtype=np.int64), np.ones((1, 11), dtype=np.int8))


def test_zero_query_key_gives_uniform_value_mixing(f64):
    rng = np.random.default_rng(1)
    attn = MultiHeadSelfAttention(4, 1, rng)
    w = attn.qkv.weight.data
    w[:, :8] = 0.0
    attn.qkv.bias.data[:8] = 0.0
    x = rng.normal(size=(1, 3, 4))
    mask = np.array([[1, 1, 0]])
    out = attn(Tensor(x), mask).data
    v = x @ w[:, 8:] + attn.qkv.bias.data[8:]
    expect = v[0, :2].mean(axis=0) @ attn.out.weight.data + attn.out.bias.data
    np.testing.assert_allclose(out[0], np.tile(expect, (3, 1)), atol=1e-12)


def test_padded_positions_receive_no_attention():
    bb = small()
    ids, mask = ids_mask([[4, 5, 6]], 5)
    h0 = bb.embed(ids, mask)
    base = bb.forward_collect(h0, mask).last.data
    bumped = h0.data.copy()
    bumped[0, 3:] += 10.0
    out = bb.forward_collect(Tensor(bumped), mask).last.data
    np.testing.assert_array_equal(out[0, :3], base[0, :3])


def test_pad_invariance_of_pooled_output():
    bb = small()
    ids, mask = ids_mask([[4, 9, 6, 12]], 5)
    ids2, mask2 = ids_mask([[4, 9, 6, 12]], 10)
    for mode in ("mean", "first"):
        a = pool(bb(ids, mask).last, mask, mode).data
        b = pool(bb(ids2, mask2).last, mask2, mode).data
        np.testing.assert_allclose(a, b, atol=1e-5)


def test_permutation_sensitive():
    bb = small()
    a = bb(*ids_mask([[4, 5, 6]], 3)).last.data
    b = bb(*ids_mask([[5, 4, 6]], 3)).last.data
    assert np.abs(a - b).max() > 1e-4


def test_causal_flag_blocks_future_tokens():
    bb = small(causal=True)
    a = bb(*ids_mask([[4, 5, 6]], 3)).last.data
    b = bb(*ids_mask([[4, 5, 9]], 3)).last.data
    np.testing.assert_array_equal(a[0, :2], b[0, :2])
    assert np.abs(a[0, 2] - b[0, 2]).max() > 0


def test_pool_examples():
    h = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0], [7.0, 7.0]]]))
    np.testing.assert_allclose(pool(h, np.array([[1, 1, 0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(pool(h, np.array([[1, 0, 0]]), "mean").data, [[1.0, 0.0]])
    np.testing.assert_allclose(pool(h, np.array([[1, 0, 0]]), "first").data, [[1.0, 0.0]])
    same = Tensor(np.array([[[2.0, 3.0], [2.0, 3.0]]]))
    np.testing.assert_allclose(pool(same, np.array([[1, 1]])).data, [[2.0, 3.0]])
    with pytest.raises(ValidationError):
        pool(h, np.array([[0, 0, 0]]))


def test_nan_aborts_with_layer_index():
    bb = small()
    bb.layer1.ffn.up.weight.data[:] = np.nan
    with pytest.raises(NumericalError, match="layer 2"):
        bb(*ids_mask([[4, 5]], 3))


def test_backbone_gradients_match_finite_differences(f64):
    bb = small(seed=3)
    ids, mask = ids_mask([[4, 5, 6, 7], [8, 9]], 5)
    audit = finite_diff_check(lambda: bb(ids, mask).last.mean(), dict(bb.named_parameters()),
                              max_entries=6, seed=1)
    assert audit.worst < 1e-3, audit.max_rel_error
