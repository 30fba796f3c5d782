import struct

import numpy as np
import pytest

from hyperpelt import backbone as bb
from hyperpelt import tensor as T
from hyperpelt.backbone import BlockId
from hyperpelt.config import C1
from hyperpelt.errors import DimensionError, FormatError, VersionError
from hyperpelt.hyperembed import init_embeddings
from hyperpelt.model import Batch, HyperPELT
from hyperpelt.visual import (VisualFeatures, VisualProjection, build_visual_hyper_embedding,
                              init_visual_projection, init_visual_projector, iter_visual_features,
                              load_visual_features, merge_prefixes, prefetch, project_visual,
                              synth_visual_features, write_visual_features)


def projection():
    return init_visual_projection(C1, np.random.default_rng(0))


def test_projection_zero_shape_linearity():
    proj = projection()
    assert not project_visual(proj, np.zeros((4, 16))).data.any()
    feats = synth_visual_features(3, 0)
    out = project_visual(proj, feats)
    assert out.shape == (4, 16)
    np.testing.assert_allclose(project_visual(proj, 2 * feats.grid).data, 2 * out.data, rtol=1e-6)


def test_projection_shape_errors():
    proj = projection()
    with pytest.raises(DimensionError):
        project_visual(proj, np.zeros((4, 15)))
    with pytest.raises(DimensionError):
        project_visual(proj, np.zeros((5, 16)), prefix_len=4)


def test_visual_hyper_embedding():
    bank, text_projector = init_embeddings(C1, 0)
    vis = init_visual_projector(C1, np.random.default_rng(1))
    assert vis.w1 is not text_projector.w1
    assert not np.shares_memory(vis.w1.data, text_projector.w1.data)
    projected = project_visual(projection(), synth_visual_features(5, 0))
    a = build_visual_hyper_embedding(bank, vis, projected, BlockId(0, "enc_self_attn"), source=5)
    b = build_visual_hyper_embedding(bank, vis, projected, BlockId(0, "dec_ffn"), source=5)
    assert a.value.shape == (4, 8) and np.abs(a.value.data - b.value.data).max() > 0

    for t in list(bank.named().values()) + [vis.b1, vis.b2]:
        t.data[...] = 0.0
    zero = build_visual_hyper_embedding(bank, vis, T.Tensor(np.zeros((4, 16))), BlockId(1, "enc_ffn"))
    assert not zero.value.data.any()


def test_merge_prefixes():
    rng = np.random.default_rng(2)
    text = (T.Tensor(rng.normal(size=(4, 32))), T.Tensor(rng.normal(size=(4, 32))))
    zero = (T.Tensor(np.zeros((4, 32))), T.Tensor(np.zeros((4, 32))))
    k, v = merge_prefixes(text, zero)
    assert k.shape == v.shape == (8, 32)
    np.testing.assert_array_equal(k.data[:4], text[0].data)
    assert not k.data[4:].any() and not v.data[4:].any()

    per_image = (T.Tensor(rng.normal(size=(3, 4, 32))), T.Tensor(rng.normal(size=(3, 4, 32))))
    k, _ = merge_prefixes(text, per_image)
    assert k.shape == (3, 8, 32)
    np.testing.assert_array_equal(k.data[2, :4], text[0].data)
    with pytest.raises(DimensionError):
        merge_prefixes(text, (T.Tensor(np.zeros((4, 16))), T.Tensor(np.zeros((4, 16)))))


def test_masked_visual_prefixes_match_text_only_attention():
    rng = np.random.default_rng(3)
    d = 32
    x = T.Tensor(rng.uniform(0.5, 1.5, (2, 3, d)))
    w = {n: T.Tensor(rng.normal(0, d ** -0.5, (d, d))) for n in "kvo"}
    w["q"] = T.Tensor(np.eye(d))
    text = (T.Tensor(rng.normal(size=(4, d))), T.Tensor(rng.normal(size=(4, d))))
    masked = (T.Tensor(np.full((4, d), -1e4)), T.Tensor(rng.normal(size=(4, d))))
    ref = bb.attention_with_prefix(x, x, w, 4, prefix=text)
    out = bb.attention_with_prefix(x, x, w, 4, prefix=merge_prefixes(text, masked))
    assert np.abs(ref.data - out.data).max() < 1e-4


def test_hpvf_round_trip(tmp_path):
    feats = [synth_visual_features(i, 9) for i in (0, 7, 2 ** 40)]
    path = tmp_path / "f.hpvf"
    write_visual_features(path, feats)
    back = load_visual_features(path)
    assert [f.image_id for f in back] == [0, 7, 2 ** 40]
    for a, b in zip(feats, back):
        assert a.grid.tobytes() == b.grid.tobytes()
    assert path.stat().st_size == 20 + 3 * (8 + 4 * 16 * 4)


def test_hpvf_errors_name_offsets(tmp_path):
    path = tmp_path / "f.hpvf"
    write_visual_features(path, [synth_visual_features(i, 0) for i in range(2)])
    raw = path.read_bytes()

    bad = tmp_path / "bad.hpvf"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="offset 0"):
        load_visual_features(bad)

    bad.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(VersionError):
        load_visual_features(bad)

    bad.write_bytes(raw[:-10])
    with pytest.raises(FormatError, match="offset"):
        load_visual_features(bad)

    bad.write_bytes(raw[:12])
    with pytest.raises(FormatError, match="truncated header"):
        load_visual_features(bad)

    bad.write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_visual_features(bad)


def test_synthetic_features_deterministic_and_sane():
    a, b = synth_visual_features(7, 1), synth_visual_features(7, 1)
    assert a.grid.tobytes() == b.grid.tobytes()
    assert not np.array_equal(a.grid, synth_visual_features(8, 1).grid)
    big = synth_visual_features(7, 1, n_grid=16, d_visual=16).grid
    assert big.size >= 256
    assert abs(big.mean()) < 0.1 and 0.5 <= big.var() <= 2.0


def test_prefetch_preserves_order_and_errors():
    assert list(prefetch(range(50), maxsize=2)) == list(range(50))

    def broken():
        yield 1
        raise FormatError("boom")

    with pytest.raises(FormatError):
        list(prefetch(broken()))


def test_prefetch_streams_a_file(tmp_path):
    path = tmp_path / "f.hpvf"
    write_visual_features(path, [synth_visual_features(i, 0) for i in range(20)])
    ids = [f.image_id for f in prefetch(iter_visual_features(path), maxsize=3)]
    assert ids == list(range(20))


# ---------------------------------------------------------------- inside the model

def _batch(rng, visual=True):
    inputs = rng.integers(2, 64, (2, 5))
    targets = np.array([[7, 1], [9, 1]])
    grids = np.stack([synth_visual_features(i, 0).grid for i in (1, 2)]) if visual else None
    return Batch(0, inputs, targets, grids)


def test_per_example_visual_prefixes_differ():
    model = HyperPELT(C1.replace(mode="vl_hyperpelt"))
    grids = np.stack([synth_visual_features(i, 0).grid for i in (1, 2)])
    prefix, adapters = model.generate(0, grids)
    k, _ = prefix[BlockId(0, "enc_self_attn")]
    assert k.shape == (2, 8, 32)
    np.testing.assert_array_equal(k.data[0, :4], k.data[1, :4])   # shared text rows
    assert np.abs(k.data[0, 4:] - k.data[1, 4:]).max() > 0
    assert len(adapters[BlockId(0, "enc_ffn")]) == 2


def test_text_only_batches_are_identical_with_and_without_visual_module():
    rng = np.random.default_rng(4)
    text = HyperPELT(C1.replace(mode="hyperpelt"))
    vl = HyperPELT(C1.replace(mode="vl_hyperpelt"))
    batch = _batch(rng, visual=False)
    a = text.forward(batch)[0].data
    b = vl.forward(batch)[0].data
    assert a.tobytes() == b.tobytes()


def test_zero_visual_gate_leaves_only_the_text_adapter():
    rng = np.random.default_rng(5)
    vl = HyperPELT(C1.replace(mode="vl_hyperpelt"))
    grids = np.stack([synth_visual_features(i, 0).grid for i in (1, 2)])
    _, adapters = vl.generate(0, grids)
    text_adapter, visual_adapter = adapters[BlockId(0, "enc_ffn")]
    visual_adapter.lam = T.Tensor([0.0])
    h = T.Tensor(rng.normal(size=(2, 3, 32)).astype(np.float32))
    args = [vl.params[f"encoder.0.{n}"] for n in ("ln_ffn.scale", "ln_ffn.bias", "ffn.wi", "ffn.wo")]
    both = bb.ffn_with_adapter(h, *args, [text_adapter, visual_adapter]).data
    text_only = bb.ffn_with_adapter(h, *args, [text_adapter]).data
    np.testing.assert_array_equal(both, text_only)


def test_visual_features_are_a_dataclass():
    f = VisualFeatures(3, np.zeros((4, 16), np.float32))
    assert f.image_id == 3 and isinstance(projection(), VisualProjection)
