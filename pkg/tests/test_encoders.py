import numpy as np
import pytest

from e2easr import tensor as T
from e2easr.encoders import (BlstmConfig, BlstmEncoder, BlstmLayer, ConformerBlock, ConformerConfig,
                             ConformerEncoder, build_encoder, reverse_padded, subsampled_length)
from e2easr.nn import length_mask

from gradcheck import check_module

SMALL_CONF = ConformerConfig(num_blocks=2, d_model=16, num_heads=4, conv_kernel=5, d_ffn=32,
                             dropout=0.1, subsample_channels=4)
SMALL_BLSTM = BlstmConfig(num_layers=2, d_model=16, dropout=0.1, subsample_channels=4)


@pytest.mark.parametrize("t,expected", [(100, 25), (1, 1), (4, 1), (5, 2), (8, 2), (9, 3)])
def test_subsampled_length(t, expected):
    assert subsampled_length(t) == expected
    enc = ConformerEncoder(SMALL_CONF, np.random.default_rng(0)).eval()
    _, out_len = enc(np.zeros((1, t, 80)), [t])
    assert out_len[0] == expected


@pytest.mark.parametrize("cls,cfg", [(ConformerEncoder, SMALL_CONF), (BlstmEncoder, SMALL_BLSTM)])
def test_shape_and_padding_invariance(cls, cfg):
    rng = np.random.default_rng(1)
    enc = cls(cfg, rng).eval()
    lens = [37, 12, 5]
    feats = np.zeros((3, 37, 80))
    for i, n in enumerate(lens):
        feats[i, :n] = rng.normal(size=(n, 80))
    with T.no_grad():
        out, out_len = enc(feats, lens)
        assert out.shape == (3, max(out_len), 16)
        for i, n in enumerate(lens):
            single, _ = enc(feats[i:i + 1, :n], [n])
            assert np.allclose(single.data[0], out.data[i, :out_len[i]], atol=1e-10)


@pytest.mark.parametrize("kind,cfg", [("conformer", SMALL_CONF), ("blstm", SMALL_BLSTM)])
def test_eval_mode_is_deterministic(kind, cfg):
    enc = build_encoder(kind, cfg, np.random.default_rng(2)).eval()
    x = np.random.default_rng(3).normal(size=(2, 30, 80))
    a, _ = enc(x, [30, 21])
    b, _ = enc(x, [30, 21])
    assert np.array_equal(a.data, b.data)


def test_output_length_ignores_values():
    enc = ConformerEncoder(SMALL_CONF, np.random.default_rng(0)).eval()
    _, l1 = enc(np.zeros((1, 23, 80)), [23])
    _, l2 = enc(np.full((1, 23, 80), 7.0), [23])
    assert np.array_equal(l1, l2)


def test_attention_rows_and_score_shape():
    cfg = ConformerConfig(1, 8, 2, 3, 16, 0.0, 4)
    block = ConformerBlock(cfg, np.random.default_rng(4))
    x = T.Tensor(np.random.default_rng(5).normal(size=(2, 6, 8)))
    mask = length_mask([6, 4], 6)
    out = block(x, mask)
    assert out.shape == (2, 6, 8)
    w = block.attn.last_weights
    assert w.shape == (2, 2, 6, 6)
    assert np.allclose(w.sum(-1), 1.0, atol=1e-12)
    assert np.all(w[1, :, :, 4:] < 1e-300)  # padded keys get no weight


def test_unknown_encoder_and_bad_width():
    with pytest.raises(ValueError):
        build_encoder("transformer", {}, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ConformerConfig(d_model=10, num_heads=4)
    enc = ConformerEncoder(SMALL_CONF, np.random.default_rng(0))
    with pytest.raises(T.ShapeError):
        enc.encode_subsampled(T.Tensor(np.zeros((1, 3, 5))), [3])


def test_conformer_block_gradcheck():
    rng = np.random.default_rng(6)
    cfg = ConformerConfig(1, 8, 2, 3, 16, 0.0, 4)
    block = ConformerBlock(cfg, rng)
    mask = np.ones((1, 4), dtype=bool)
    w = rng.normal(size=(1, 4, 8))
    params = block.parameters()
    gx, gp = check_module(lambda x: (block(x, mask) * w).sum(), rng.normal(size=(1, 4, 8)), params, rng)
    assert gx < 1e-4 and gp < 1e-4


def _mirror(layer: BlstmLayer):
    for name in ("w_x", "w_h", "bias"):
        getattr(layer.bwd, name).data = getattr(layer.fwd, name).data.copy()


def test_blstm_time_reversal_swaps_directions():
    layer = BlstmLayer(5, 3, np.random.default_rng(7))
    _mirror(layer)
    x = np.random.default_rng(8).normal(size=(1, 9, 5))
    out = layer(T.Tensor(x), [9]).data[0]
    rev = layer(T.Tensor(x[:, ::-1].copy()), [9]).data[0]
    assert np.allclose(rev[:, :3], out[::-1, 3:], atol=1e-12)
    assert np.allclose(rev[:, 3:], out[::-1, :3], atol=1e-12)


def test_blstm_single_frame_is_one_cell_step():
    layer = BlstmLayer(5, 3, np.random.default_rng(9))
    x = np.random.default_rng(10).normal(size=(2, 1, 5))
    out = layer(T.Tensor(x), [1, 1]).data
    hf, _ = layer.fwd.step(T.Tensor(x[:, 0]), layer.fwd.initial_state(2))
    hb, _ = layer.bwd.step(T.Tensor(x[:, 0]), layer.bwd.initial_state(2))
    assert np.allclose(out[:, 0, :3], hf.data) and np.allclose(out[:, 0, 3:], hb.data)


def test_blstm_zero_input_bounded():
    layer = BlstmLayer(4, 3, np.random.default_rng(11))
    for p in layer.parameters():
        p.data[...] = 0.0
    out = layer(T.Tensor(np.zeros((1, 6, 4))), [6]).data
    assert np.all(np.abs(out) < 1.0)


def test_reverse_padded_keeps_padding():
    x = T.Tensor(np.arange(8.0).reshape(2, 4, 1))
    r = reverse_padded(x, [4, 2]).data[..., 0]
    assert np.array_equal(r, [[3, 2, 1, 0], [5, 4, 6, 7]])


def test_blstm_layer_gradcheck():
    rng = np.random.default_rng(12)
    layer = BlstmLayer(4, 3, rng)
    w = rng.normal(size=(2, 5, 6))
    gx, gp = check_module(lambda x: (layer(x, [5, 3]) * w).sum(), rng.normal(size=(2, 5, 4)),
                          layer.parameters(), rng)
    assert gx < 1e-4 and gp < 1e-4


def test_vn_scope_covers_only_lstm_and_embedding():
    enc = BlstmEncoder(SMALL_BLSTM, np.random.default_rng(0))
    names = enc.vn_parameter_names()
    assert names and all(".fwd." in n or ".bwd." in n for n in names)
    assert ConformerEncoder(SMALL_CONF, np.random.default_rng(0)).vn_parameter_names() == []
