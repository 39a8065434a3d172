import numpy as np
import pytest

from e2easr import tensor as T
from e2easr.heads import (AttentionDecoder, CtcHead, HeadConfig, PredictionCache, TransducerHead,
                          attend_spell, frame_with_sos, transducer_logits)
from e2easr.losses import attention_loss

from gradcheck import check_module

V = 7


def small(kind, att="dot"):
    return HeadConfig(kind, embed_dim=6, lstm_dim=10, joint_dim=9, attention_type=att,
                      attention_dim=8, attention_heads=2)


def test_ctc_head_rows_normalized_and_zero_weights_uniform():
    head = CtcHead(5, V, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(3, 5))
    assert np.allclose(np.exp(head(x).data).sum(-1), 1.0, atol=1e-9)
    head.proj.weight.data[...] = 0.0
    assert np.allclose(head(x).data, np.log(1 / V))
    with pytest.raises(T.ShapeError):
        head(np.zeros((2, 4)))


def test_ctc_head_gradcheck():
    rng = np.random.default_rng(2)
    head = CtcHead(4, V, rng)
    w = rng.normal(size=(3, V))
    gx, gp = check_module(lambda x: (head(x) * w).sum(), rng.normal(size=(3, 4)), head.parameters(), rng)
    assert gx < 1e-4 and gp < 1e-4


def test_transducer_cache_is_bitwise_and_deterministic():
    rng = np.random.default_rng(3)
    head = TransducerHead(5, V, small("transducer"), rng)
    x = rng.normal(size=5)
    cache = PredictionCache(head)
    for prefix in ([], [4], [4, 5], [4, 5, 6], [4, 5]):
        cached = transducer_logits(x, prefix, head, cache)
        assert np.array_equal(cached, transducer_logits(x, prefix, head))
    assert cache.misses == 4  # the repeated prefix is served from the cache
    assert np.array_equal(transducer_logits(x, [], head), transducer_logits(x, [], head))


def test_transducer_rejects_blank_prefix():
    head = TransducerHead(5, V, small("transducer"), np.random.default_rng(0))
    with pytest.raises(ValueError):
        transducer_logits(np.zeros(5), [4, 0], head)


def test_lattice_matches_single_cells():
    rng = np.random.default_rng(4)
    head = TransducerHead(5, V, small("transducer"), rng)
    enc = rng.normal(size=(2, 4, 5))
    ys = [[4, 5, 6], [6]]
    with T.no_grad():
        lp = head.lattice_log_probs(T.Tensor(enc), ys).data
    for i, y in enumerate(ys):
        for t in range(4):
            for u in range(len(y) + 1):
                logits = transducer_logits(enc[i, t], y[:u], head)
                ref = logits - np.log(np.exp(logits).sum())
                assert np.allclose(lp[i, t, u], ref, atol=1e-12)


def test_joint_gradcheck():
    rng = np.random.default_rng(5)
    head = TransducerHead(4, V, small("transducer"), rng)
    pred = T.Tensor(rng.normal(size=(1, 1, 3, 9)))
    w = rng.normal(size=(1, 2, 3, V))
    params = head.enc_proj.parameters() + head.out.parameters()
    gx, gp = check_module(lambda x: (head.joint(head.enc_proj(x), pred) * w).sum(),
                          rng.normal(size=(1, 2, 1, 4)), params, rng)
    assert gx < 1e-4 and gp < 1e-4


@pytest.mark.parametrize("att", ["dot", "additive"])
def test_attention_weights_convex_and_padding_ignored(att):
    rng = np.random.default_rng(6)
    dec = AttentionDecoder(5, V, small("attention", att), rng)
    enc = T.Tensor(rng.normal(size=(2, 6, 5)))
    cache = dec.precompute(enc, [6, 3])
    _, _, w = dec.step(np.array([1, 1]), dec.initial_state(2), cache)
    assert np.allclose(w.data.sum(-1), 1.0) and np.all(w.data >= 0)
    assert np.all(w.data[1, ..., 3:] == 0.0)


def test_single_frame_context_is_that_frame():
    rng = np.random.default_rng(7)
    dec = AttentionDecoder(5, V, small("attention", "additive"), rng)
    frame = rng.normal(size=(1, 1, 5))
    cache = dec.precompute(T.Tensor(frame), [1])
    _, state, _ = dec.step(np.array([1]), dec.initial_state(1), cache)
    assert np.allclose(state.context.data, frame[0])


def test_empty_encoder_rejected():
    dec = AttentionDecoder(5, V, small("attention"), np.random.default_rng(0))
    with pytest.raises(ValueError):
        dec.precompute(T.Tensor(np.zeros((1, 0, 5))), [0])
    with pytest.raises(ValueError):
        attend_spell(np.zeros((3, 5)), [4], dec)


@pytest.mark.parametrize("att", ["dot", "additive"])
def test_teacher_forcing_matches_attend_spell_and_loss(att):
    rng = np.random.default_rng(8)
    dec = AttentionDecoder(5, V, small("attention", att), rng)
    x = rng.normal(size=(4, 5))
    y = [4, 6, 5]
    inputs, outputs = frame_with_sos([y])
    with T.no_grad():
        lp = dec.teacher_forced(T.Tensor(x[None]), [4], inputs)
        loss = float(attention_loss(lp, outputs).data[0])
    steps = [attend_spell(x, [1] + y[:i], dec) for i in range(len(y) + 1)]
    assert np.allclose(np.exp(steps[0]).sum(), 1.0)
    assert loss == pytest.approx(-sum(s[c] for s, c in zip(steps, outputs[0])), abs=1e-10)


def test_attention_loss_gradcheck_through_decoder():
    rng = np.random.default_rng(9)
    dec = AttentionDecoder(4, V, small("attention", "dot"), rng)
    inputs, outputs = frame_with_sos([[4, 5]])

    def f(x):
        return attention_loss(dec.teacher_forced(x, [3], inputs), outputs).sum()

    gx, gp = check_module(f, rng.normal(size=(1, 3, 4)), dec.parameters(), rng)
    assert gx < 1e-4 and gp < 1e-4


def test_head_config_validation():
    with pytest.raises(ValueError):
        HeadConfig("lm")
    with pytest.raises(ValueError):
        HeadConfig("attention", attention_dim=10, attention_heads=4)
