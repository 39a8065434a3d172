import math
from dataclasses import dataclass

import numpy as np
import pytest

from e2easr import tensor as T
from e2easr.heads import AttentionDecoder, HeadConfig, TransducerHead
from e2easr.search import (Hypothesis, SearchConfig, attention_beam, attention_greedy, ctc_greedy,
                           transducer_beam, transducer_greedy)
from e2easr.vocab import EOS, SOS, UNK

X, Y = 4, 5


def test_ctc_greedy_collapse_example():
    lp = np.log(np.full((4, 6), 0.01))
    for t, k in enumerate([X, X, 0, Y]):
        lp[t, k] = 0.0
    assert ctc_greedy(lp) == [X, Y]


def test_ctc_greedy_all_blank_and_ties():
    assert ctc_greedy(np.log(np.full((5, 6), 1 / 6))) == []
    lp = np.zeros((2, 6))
    lp[:, 0] = -1.0
    assert ctc_greedy(lp) == [1]  # tie between all non-blank ids goes to the lowest


# --- scripted attention decoder ---------------------------------------------------


@dataclass
class PrefixState:
    h: T.Tensor  # (n, 3) last three tokens, -1 padded

    def select(self, idx):
        return PrefixState(T.Tensor(self.h.data[idx]))


class ScriptedDecoder:
    """Raw logits looked up from a table keyed by the token prefix."""

    vocab_size = 6

    def __init__(self, table, default):
        self.table = table
        self.default = np.asarray(default, dtype=float)

    def precompute(self, enc, lengths):
        return {"mask": np.ones((1, enc.shape[1]), dtype=bool)}

    def select_cache(self, cache, idx):
        return {"mask": cache["mask"][idx]}

    def initial_state(self, n):
        return PrefixState(T.Tensor(np.full((n, 3), -1.0)))

    def step(self, tokens, state, cache):
        hist = np.concatenate([state.h.data[:, 1:], np.asarray(tokens, dtype=float)[:, None]], axis=1)
        rows = []
        for h in hist:
            key = tuple(int(v) for v in h if v >= 0 and v != SOS)
            rows.append(self.table.get(key, self.default))
        return np.array(rows), PrefixState(T.Tensor(hist)), None


def logits_from_probs(probs: dict, offset: float = 0.0):
    p = np.full(6, 1e-6)
    for k, v in probs.items():
        p[k] = v
    return np.log(p) + offset


END = logits_from_probs({EOS: 1.0}, offset=10.0)


def test_beam_beats_greedy_on_two_step_example():
    table = {
        (): logits_from_probs({X: 0.6, Y: 0.4}),
        (X,): logits_from_probs({X: 0.2, Y: 0.2, UNK: 0.2, EOS: 0.2, 0: 0.1, 1: 0.1 - 1e-5}),
        (Y,): logits_from_probs({X: 0.9, Y: 0.1 - 5e-6}),
    }
    dec = ScriptedDecoder(table, END)
    enc = np.zeros((5, 2))
    g = attention_greedy(enc, dec, SearchConfig(1))
    b = attention_beam(enc, dec, SearchConfig(2))
    assert math.exp(g.score) == pytest.approx(0.12, rel=1e-3) and g.tokens[0] == X
    assert b[0].tokens == (Y, X) and math.exp(b[0].score) == pytest.approx(0.36, rel=1e-3)
    assert b[0].finished


@pytest.mark.parametrize("eos_logit,stops", [(4.9, False), (5.1, True)])
def test_eos_gate(eos_logit, stops):
    first = np.full(6, -5.0)
    first[EOS] = eos_logit
    first[X] = eos_logit - 3.0
    dec = ScriptedDecoder({(): first}, END)
    for hyp in (attention_greedy(np.zeros((4, 2)), dec), attention_beam(np.zeros((4, 2)), dec)[0]):
        assert (hyp.tokens == ()) == stops


def test_unfinished_hypothesis_flagged():
    never = np.zeros(6)
    never[X] = 3.0  # EOS logit 0 < 5 forever
    dec = ScriptedDecoder({}, never)
    hyp = attention_beam(np.zeros((3, 2)), dec, SearchConfig(2))[0]
    assert not hyp.finished and len(hyp.tokens) == 3
    assert not attention_greedy(np.zeros((3, 2)), dec).finished


def _attention_model(seed, att):
    rng = np.random.default_rng(seed)
    cfg = HeadConfig("attention", 6, 10, 9, att, 8, 2)
    dec = AttentionDecoder(6, 8, cfg, rng)
    dec.out.bias.data[EOS] += 5.5
    return dec, rng.normal(size=(6, 6)) * 2


@pytest.mark.parametrize("att", ["dot", "additive"])
def test_attention_beam_one_is_greedy(att):
    for seed in range(15):
        dec, enc = _attention_model(seed, att)
        g = attention_greedy(enc, dec, SearchConfig(1))
        b = attention_beam(enc, dec, SearchConfig(1))
        assert len(b) == 1 and b[0].tokens == g.tokens and b[0].score == pytest.approx(g.score, abs=1e-12)


def test_attention_results_sorted_and_bounded():
    dec, enc = _attention_model(3, "dot")
    hyps = attention_beam(enc, dec, SearchConfig(4))
    assert 1 <= len(hyps) <= 4
    assert all(a.score >= b.score for a, b in zip(hyps, hyps[1:]))
    assert all(h.score <= 0 for h in hyps)


# --- transducer ------------------------------------------------------------------------------


def _transducer_model(seed, vocab=7, scale=2.0, frames=5):
    rng = np.random.default_rng(seed)
    head = TransducerHead(6, vocab, HeadConfig("transducer", 6, 10, 9), rng)
    return head, rng.normal(size=(frames, 6)) * scale


@pytest.mark.parametrize("cap", [1, 2, 4])
def test_transducer_beam_one_is_greedy(cap):
    for seed in range(15):
        head, enc = _transducer_model(seed)
        cfg = SearchConfig(1, max_symbols_per_frame=cap)
        g = transducer_greedy(enc, head, cfg)
        b = transducer_beam(enc, head, cfg)[0]
        assert b.tokens == g.tokens and b.score == pytest.approx(g.score, abs=1e-12)


def _frame_log_probs(head, frame, prefix):
    from e2easr.heads import transducer_logits
    logits = transducer_logits(frame, prefix, head)
    return logits - np.logaddexp.reduce(logits)


def enumerate_label_sequences(head, enc, cap, labels):
    """log P(y) for every label sequence, summing all move sequences (brute force)."""
    out = {}

    def walk(t, prefix, emitted, score):
        if t == len(enc):
            out[prefix] = np.logaddexp(out.get(prefix, -np.inf), score)
            return
        lp = _frame_log_probs(head, enc[t], prefix)
        walk(t + 1, prefix, 0, score + lp[0])
        if emitted < cap:
            for k in labels:
                walk(t, prefix + (k,), emitted + 1, score + lp[k])

    walk(0, (), 0, 0.0)
    return out


def test_merged_prefix_is_logsumexp_of_branches():
    head, enc = _transducer_model(1, vocab=5, frames=2)
    lp00 = _frame_log_probs(head, enc[0], ())
    lp0a = _frame_log_probs(head, enc[0], (X,))
    lp1a = _frame_log_probs(head, enc[1], (X,))
    lp10 = _frame_log_probs(head, enc[1], ())
    early = lp00[X] + lp0a[0] + lp1a[0]
    late = lp00[0] + lp10[X] + lp1a[0]
    hyps = transducer_beam(enc, head, SearchConfig(50, max_symbols_per_frame=1), labels=[X])
    got = {h.tokens: h.score for h in hyps}
    assert got[(X,)] == pytest.approx(np.logaddexp(early, late), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_transducer_beam_exact_map(seed):
    head, enc = _transducer_model(seed, vocab=5, frames=3)
    cap = 2
    exact = enumerate_label_sequences(head, enc, cap, [X])
    hyps = transducer_beam(enc, head, SearchConfig(200, max_symbols_per_frame=cap), labels=[X])
    best = max(exact, key=exact.get)
    assert hyps[0].tokens == best
    assert hyps[0].score == pytest.approx(exact[best], abs=1e-10)
    assert len(hyps) == len(exact)


def test_beam_width_monotone_top_score():
    for seed in range(10):
        head, enc = _transducer_model(seed)
        tops = [transducer_beam(enc, head, SearchConfig(w, max_symbols_per_frame=2))[0].score
                for w in (1, 2, 4, 8)]
        assert all(b >= a - 1e-12 for a, b in zip(tops, tops[1:]))


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(beam_width=0)
    assert SearchConfig().beam_width == 8 and SearchConfig().eos_logit_threshold == 5.0
