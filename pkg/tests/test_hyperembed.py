import numpy as np
import pytest

from hyperpelt import tensor as T
from hyperpelt.backbone import BLOCK_KINDS, BlockId, all_blocks
from hyperpelt.config import C1
from hyperpelt.errors import DimensionError, UnknownNameError
from hyperpelt.hyperembed import (EMBED_STD, build_hyper_embedding, build_hyper_embeddings,
                                  init_embeddings, pool_for_adapter)


def zeroed(bank, projector):
    for t in list(bank.named().values()) + [projector.w1, projector.b1, projector.w2, projector.b2]:
        t.data[...] = 0.0


def test_all_zero_gives_zero_hyper_embedding():
    bank, proj = init_embeddings(C1, 0)
    zeroed(bank, proj)
    proj.w1.data[...] = 1.0   # weights alone cannot lift a zero input
    out = build_hyper_embedding(bank, proj, bank.task(0), BlockId(0, "enc_ffn"))
    assert (out.value.data == 0).all()


def test_shape_contract():
    bank, proj = init_embeddings(C1, 0)
    out = build_hyper_embedding(bank, proj, bank.task(1), BlockId(1, "dec_cross_attn"), source=1)
    assert out.value.shape == (4, 8)
    assert out.source == 1 and out.target == BlockId(1, "dec_cross_attn")


def test_distinct_sites_differ():
    bank, proj = init_embeddings(C1, 0)
    a = build_hyper_embedding(bank, proj, bank.task(0), BlockId(0, "enc_self_attn")).value.data
    b = build_hyper_embedding(bank, proj, bank.task(0), BlockId(1, "enc_self_attn")).value.data
    c = build_hyper_embedding(bank, proj, bank.task(0), BlockId(0, "dec_ffn")).value.data
    assert np.abs(a - b).max() > 0 and np.abs(a - c).max() > 0


def test_batched_sites_match_single_site_calls():
    bank, proj = init_embeddings(C1, 3)
    blocks = all_blocks(2)
    many = build_hyper_embeddings(bank, proj, bank.task(2), blocks).data
    for s, blk in enumerate(blocks):
        one = build_hyper_embedding(bank, proj, bank.task(2), blk).value.data
        np.testing.assert_allclose(many[s], one, rtol=1e-6, atol=1e-7)


def test_per_example_sources():
    bank, proj = init_embeddings(C1, 0)
    src = T.Tensor(np.random.default_rng(0).normal(size=(3, 4, 16)))
    out = build_hyper_embeddings(bank, proj, src, all_blocks(2))
    assert out.shape == (3, 10, 4, 8)
    single = build_hyper_embeddings(bank, proj, src[1], all_blocks(2))
    np.testing.assert_allclose(out.data[1], single.data, rtol=1e-6, atol=1e-7)


def test_out_of_range_site_or_bad_source():
    bank, proj = init_embeddings(C1, 0)
    with pytest.raises(UnknownNameError):
        build_hyper_embedding(bank, proj, bank.task(0), BlockId(2, "enc_ffn"))
    with pytest.raises(UnknownNameError):
        build_hyper_embedding(bank, proj, bank.task(0), BlockId(0, "cross_ffn"))
    with pytest.raises(UnknownNameError):
        bank.task(3)
    with pytest.raises(DimensionError):
        build_hyper_embedding(bank, proj, T.Tensor(np.zeros((4, 15))), BlockId(0, "enc_ffn"))


def test_zeroing_site_columns_removes_site_dependence():
    bank, proj = init_embeddings(C1, 1)
    proj.w1.data[16:] = 0.0   # columns fed by the layer and block rows
    outs = [build_hyper_embedding(bank, proj, bank.task(0), b).value.data for b in all_blocks(2)]
    for o in outs[1:]:
        np.testing.assert_array_equal(o, outs[0])
    other = build_hyper_embedding(bank, proj, bank.task(1), BlockId(0, "enc_ffn")).value.data
    assert np.abs(other - outs[0]).max() > 0


def test_pooling():
    v = np.arange(8, dtype=np.float32)
    np.testing.assert_array_equal(pool_for_adapter(T.Tensor(np.tile(v, (4, 1)))).data, v)
    assert (pool_for_adapter(T.Tensor(np.zeros((4, 8)))).data == 0).all()
    rows = np.random.default_rng(0).normal(size=(4, 8))
    np.testing.assert_allclose(pool_for_adapter(T.Tensor(rows)).data, rows.mean(0), atol=1e-6)
    batched = pool_for_adapter(T.Tensor(np.random.default_rng(1).normal(size=(2, 5, 4, 8))))
    assert batched.shape == (2, 5, 8)


def test_init_is_seeded_and_centred():
    a, _ = init_embeddings(C1, 7)
    b, _ = init_embeddings(C1, 7)
    c, _ = init_embeddings(C1, 8)
    for k, t in a.named().items():
        assert t.data.tobytes() == b.named()[k].data.tobytes()
    assert any(not np.array_equal(t.data, c.named()[k].data) for k, t in a.named().items())

    big, _ = init_embeddings(C1.replace(prefix_len=25, d_task=100), 0)
    sample = big.task(0).data.ravel()
    assert sample.size == 2500
    pooled = np.concatenate([t.data.ravel() for t in big.named().values()])
    assert pooled.size >= 10_000
    assert abs(pooled.mean()) < 3 * EMBED_STD / np.sqrt(pooled.size)
    assert abs(pooled.std() - EMBED_STD) < 0.05 * EMBED_STD


def test_embeddings_are_trainable_and_cover_every_kind():
    bank, _ = init_embeddings(C1, 0)
    names = bank.named()
    assert len(names) == 3 + 2 + len(BLOCK_KINDS)
    assert all(t.requires_grad for t in names.values())
